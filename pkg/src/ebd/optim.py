"""Optimizers and hyperparameter schedules.

Rates in run configs are products of a base constant and schedule factors in
the batch index m and/or epoch index i; forgetting factors can follow the
geometric convergence-to-one recursion with parameter lambda_R.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import ConfigError


def schedule_value(kind: str, m: int, epoch: int, **params) -> float:
    """Closed-form schedule factors.

    constant:          c
    step_decay_floor:  1 / (c * floor(m/width) + 1)
    step_growth_floor: 1 + c * floor(m/width)
    exp_epoch:         alpha_exp ** (-epoch)
    blend_floor:       a*s + b*(1-s), s = 1/(floor(m/width)+1)
    lambda_r:          1 - (1-lam0) * (1-lam_r)**epoch
    """
    if kind == "constant":
        return float(params.get("c", 1.0))
    if kind == "step_decay_floor":
        c = params["c"]
        width = params.get("width", 10)
        return 1.0 / (c * (m // width) + 1.0)
    if kind == "step_growth_floor":
        c = params["c"]
        width = params.get("width", 10)
        return 1.0 + c * (m // width)
    if kind == "exp_epoch":
        return float(params["alpha_exp"]) ** (-epoch)
    if kind == "blend_floor":
        width = params.get("width", 10)
        s = 1.0 / (m // width + 1.0)
        return params["a"] * s + params["b"] * (1.0 - s)
    if kind == "lambda_r":
        lam0 = params["lam0"]
        lam_r = params["lam_r"]
        return 1.0 - (1.0 - lam0) * (1.0 - lam_r) ** epoch
    raise ConfigError(f"unknown schedule kind {kind!r}")


def lambda_r_step(lam: float, lam_r: float) -> float:
    """One epoch of the convergence recursion: lam + lam_r (1 - lam)."""
    return lam + lam_r * (1.0 - lam)


@dataclass
class Rate:
    """base * prod(schedules); base may differ for epoch 0 (warmup switches)."""

    base: float
    schedules: list = field(default_factory=list)
    base_epoch0: Optional[float] = None

    def __call__(self, m: int, epoch: int) -> float:
        v = self.base_epoch0 if (self.base_epoch0 is not None and epoch == 0) else self.base
        for s in self.schedules:
            v *= schedule_value(s["kind"], m, epoch, **{k: x for k, x in s.items() if k != "kind"})
        return v

    @classmethod
    def parse(cls, spec) -> "Rate":
        if isinstance(spec, (int, float)):
            return cls(base=float(spec))
        if isinstance(spec, dict):
            return cls(base=float(spec.get("base", 1.0)),
                       schedules=list(spec.get("schedules", [])),
                       base_epoch0=spec.get("base_epoch0"))
        raise ConfigError(f"bad rate spec {spec!r}")


class SGD:
    kind = "sgd"

    def update(self, key: str, grad: np.ndarray, lr: float) -> np.ndarray:
        return lr * grad

    def state_tensors(self) -> dict:
        return {}

    def load_state(self, state: dict) -> None:
        pass


class SGDMomentum:
    kind = "sgd_momentum"

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.v: dict = {}

    def update(self, key: str, grad: np.ndarray, lr: float) -> np.ndarray:
        v = self.v.get(key)
        if v is None:
            v = np.zeros_like(grad)
        v = self.momentum * v + grad
        self.v[key] = v
        return lr * v

    def state_tensors(self) -> dict:
        return {f"opt.v.{k}": v for k, v in self.v.items()}

    def load_state(self, state: dict) -> None:
        for name, v in state.items():
            if name.startswith("opt.v."):
                self.v[name[len("opt.v."):]] = v.copy()


class Adam:
    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def update(self, key: str, grad: np.ndarray, lr: float) -> np.ndarray:
        m = self.m.get(key)
        if m is None:
            m = np.zeros_like(grad)
            v = np.zeros_like(grad)
            t = 0
        else:
            v = self.v[key]
            t = self.t[key]
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.m[key], self.v[key], self.t[key] = m, v, t
        mhat = m / (1.0 - self.beta1 ** t)
        vhat = v / (1.0 - self.beta2 ** t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_tensors(self) -> dict:
        out = {}
        for k in self.m:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
            out[f"opt.t.{k}"] = np.array([self.t[k]], dtype=np.int64)
        return out

    def load_state(self, state: dict) -> None:
        for name, val in state.items():
            if name.startswith("opt.m."):
                self.m[name[6:]] = val.copy()
            elif name.startswith("opt.v."):
                self.v[name[6:]] = val.copy()
            elif name.startswith("opt.t."):
                self.t[name[6:]] = int(val[0])


def make_optimizer(cfg: dict):
    kind = cfg.get("kind", "sgd")
    if kind == "sgd":
        return SGD()
    if kind == "sgd_momentum":
        return SGDMomentum(momentum=cfg.get("momentum", 0.9))
    if kind == "adam":
        return Adam(beta1=cfg.get("beta1", 0.9), beta2=cfg.get("beta2", 0.999),
                    eps=cfg.get("eps", 1e-8))
    raise ConfigError(f"unknown optimizer {kind!r}")
