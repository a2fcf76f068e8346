"""Measurement and verification utilities.

Streaming Pearson correlation between layer activations and output errors
(batched Welford statistics, mergeable across shards), cosine alignment of
update directions, a central finite-difference oracle, and an exact discrete
MMSE estimator used to verify the stochastic orthogonality property.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

PEARSON_EPS = 1e-8
FD_DELTA = 1e-4


@dataclass
class WelfordState:
    """Sufficient statistics for Pearson correlations between every
    (hidden unit i, error component q) pair, accumulated one batch at a time."""

    n: int
    mean_h: np.ndarray       # [units]
    mean_e: np.ndarray       # [errs]
    M2_h: np.ndarray         # [units]
    M2_e: np.ndarray         # [errs]
    C: np.ndarray            # [units x errs]

    @classmethod
    def empty(cls, units: int, errs: int) -> "WelfordState":
        return cls(0, np.zeros(units), np.zeros(errs),
                   np.zeros(units), np.zeros(errs), np.zeros((units, errs)))

    def update(self, H: np.ndarray, E: np.ndarray) -> None:
        """Fold in one batch; H [units x B], E [errs x B]."""
        B = H.shape[1]
        mh = H.mean(axis=1)
        me = E.mean(axis=1)
        dh = H - mh[:, None]
        de = E - me[:, None]
        batch = WelfordState(B, mh, me, (dh * dh).sum(axis=1),
                             (de * de).sum(axis=1), dh @ de.T)
        self.merge(batch)

    def merge(self, other: "WelfordState") -> None:
        """Combine independently accumulated shards (parallel reduction)."""
        if other.n == 0:
            return
        if self.n == 0:
            self.n = other.n
            self.mean_h = other.mean_h.copy()
            self.mean_e = other.mean_e.copy()
            self.M2_h = other.M2_h.copy()
            self.M2_e = other.M2_e.copy()
            self.C = other.C.copy()
            return
        na, nb = self.n, other.n
        n = na + nb
        dh = other.mean_h - self.mean_h
        de = other.mean_e - self.mean_e
        w = na * nb / n
        self.M2_h += other.M2_h + dh * dh * w
        self.M2_e += other.M2_e + de * de * w
        self.C += other.C + np.outer(dh, de) * w
        self.mean_h += dh * nb / n
        self.mean_e += de * nb / n
        self.n = n

    def correlations(self, eps: float = PEARSON_EPS) -> np.ndarray:
        """Pearson rho per pair; zero-variance pairs come out as 0."""
        if self.n < 2:
            raise ValueError("need at least two samples")
        sd = np.sqrt(np.outer(self.M2_h, self.M2_e)) / self.n
        return (self.C / self.n) / (sd + eps)

    def mean_abs_correlation(self, eps: float = PEARSON_EPS) -> float:
        return float(np.abs(self.correlations(eps)).mean())


def two_pass_pearson(H: np.ndarray, E: np.ndarray, eps: float = PEARSON_EPS) -> np.ndarray:
    """Reference implementation over a fully buffered dataset."""
    dh = H - H.mean(axis=1, keepdims=True)
    de = E - E.mean(axis=1, keepdims=True)
    n = H.shape[1]
    cov = dh @ de.T / n
    sd = np.sqrt(np.outer((dh * dh).sum(axis=1), (de * de).sum(axis=1))) / n
    return cov / (sd + eps)


def layer_error_correlation(batches: Iterable[tuple[np.ndarray, np.ndarray]],
                            eps: float = PEARSON_EPS) -> float:
    """Mean |rho| over all (unit, error) pairs for a stream of (H, E) batches."""
    state: Optional[WelfordState] = None
    for H, E in batches:
        if state is None:
            state = WelfordState.empty(H.shape[0], E.shape[0])
        state.update(H, E)
    if state is None or state.n < 2:
        raise ValueError("need at least two samples")
    return state.mean_abs_correlation(eps)


def cosine_alignment(a: np.ndarray, b: np.ndarray) -> float:
    """<a,b>/(|a||b|) on flattened arrays; NaN when either side is zero."""
    af = a.astype(np.float64).ravel()
    bf = b.astype(np.float64).ravel()
    na, nb = np.linalg.norm(af), np.linalg.norm(bf)
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float(af @ bf / (na * nb))


def truncation_alignment(dW1: np.ndarray, dW2: np.ndarray) -> float:
    """Cosine between the local update and the full decorrelation gradient."""
    return cosine_alignment(dW1, dW1 + dW2)


class NondeterministicLoss(RuntimeError):
    pass


def finite_difference_check(loss: Callable[[], float], param: np.ndarray,
                            analytic: np.ndarray, delta: float = FD_DELTA,
                            max_coords: int = 200,
                            rng: Optional[np.random.Generator] = None,
                            fingerprint: Optional[Callable[[], bytes]] = None) -> float:
    """Max relative error between central differences and the analytic
    gradient, probing all coordinates up to ``max_coords`` (random subset
    beyond). ``loss`` must be deterministic given the frozen state; the
    parameter array is perturbed in place and restored.

    ``fingerprint``, when given, identifies the piecewise-linear region of
    the evaluation (e.g. the ReLU active set); coordinates whose +/- delta
    perturbations land in different regions straddle a kink, where central
    differences are meaningless, and are skipped.

    rel err = |fd - an| / max(1, |fd|, |an|).
    """
    if loss() != loss():
        raise NondeterministicLoss("loss evaluator returned different values at the same point")
    flat = param.reshape(-1)
    n = flat.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
    base_fp = fingerprint() if fingerprint is not None else None
    worst = 0.0
    for i in coords:
        orig = flat[i]
        step = delta * max(1.0, abs(float(orig)))
        flat[i] = orig + step
        up = loss()
        fp_up = fingerprint() if fingerprint is not None else None
        flat[i] = orig - step
        dn = loss()
        fp_dn = fingerprint() if fingerprint is not None else None
        flat[i] = orig
        if base_fp is not None and (fp_up != base_fp or fp_dn != base_fp):
            continue
        fd = (up - dn) / (2.0 * step)
        an = float(analytic.reshape(-1)[i])
        err = abs(fd - an) / max(1.0, abs(fd), abs(an))
        worst = max(worst, err)
    return worst


@dataclass
class DiscreteJoint:
    """Finite-support joint distribution: p[x, y] plus an embedding of the
    output symbols into real vectors."""

    p: np.ndarray            # [nx x ny], nonnegative, sums to 1
    y_embed: np.ndarray      # [ny x d]

    def __post_init__(self):
        if (self.p < 0).any() or abs(self.p.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1")

    @property
    def px(self) -> np.ndarray:
        return self.p.sum(axis=1)


def mmse_estimator(joint: DiscreteJoint) -> np.ndarray:
    """b*(x) = E[y|x] by exact summation; rows with p(x)=0 are NaN
    (excluded from the estimator's domain)."""
    px = joint.px
    b = np.full((joint.p.shape[0], joint.y_embed.shape[1]), np.nan)
    ok = px > 0
    b[ok] = (joint.p[ok] / px[ok, None]) @ joint.y_embed
    return b


def estimator_mse(joint: DiscreteJoint, b: np.ndarray) -> float:
    """E||y - b(x)||^2; rows with p(x)=0 contribute nothing."""
    nx, ny = joint.p.shape
    total = 0.0
    for x in range(nx):
        if joint.px[x] == 0:
            continue
        diff = joint.y_embed - b[x]
        total += float(joint.p[x] @ np.sum(diff * diff, axis=1))
    return total


def orthogonality_residual(joint: DiscreteJoint, b: np.ndarray, g: np.ndarray) -> float:
    """max |E[g(x) eps^T]| with eps = y - b(x); g is a table [nx x k]."""
    ok = joint.px > 0
    acc = np.zeros((g.shape[1], joint.y_embed.shape[1]))
    for x in np.nonzero(ok)[0]:
        eps = joint.y_embed - b[x]
        acc += np.outer(g[x], joint.p[x] @ eps)
    return float(np.abs(acc).max())


@dataclass
class MmseReport:
    b_star: np.ndarray
    max_orthogonality: float        # over random g tables, for b*
    optimality_ok: bool             # MSE(b*) <= MSE(b) for all competitors
    sufficiency_ok: bool            # perturbed b has residual > 0 and larger MSE
    mse_star: float


def mmse_oracle(joint: DiscreteJoint, n_g: int = 10, n_competitors: int = 100,
                seed: int = 0) -> MmseReport:
    """Exhaustive check of the MMSE orthogonality story at finite support:
    (a) the optimal estimator's error is orthogonal to random functions of x,
    (b) it beats random competitor tables, (c) perturbing it breaks
    orthogonality and strictly increases the MSE."""
    rng = np.random.default_rng(seed)
    nx = joint.p.shape[0]
    b_star = mmse_estimator(joint)
    bs = np.where(np.isnan(b_star), 0.0, b_star)

    max_orth = 0.0
    for _ in range(n_g):
        g = rng.normal(size=(nx, rng.integers(1, 4)))
        max_orth = max(max_orth, orthogonality_residual(joint, bs, g))

    mse_star = estimator_mse(joint, bs)
    optimality_ok = True
    for _ in range(n_competitors):
        comp = bs + rng.normal(size=bs.shape)
        if estimator_mse(joint, comp) < mse_star - 1e-15:
            optimality_ok = False

    # sufficiency probe: bump b* at one supported x; indicator functions of x
    # form a complete family, so the residual must become positive
    ok_idx = np.nonzero(joint.px > 0)[0]
    x0 = int(ok_idx[0])
    pert = bs.copy()
    pert[x0] += 0.5
    basis = np.eye(nx)
    resid = orthogonality_residual(joint, pert, basis)
    sufficiency_ok = resid > 1e-13 and estimator_mse(joint, pert) > mse_star + 1e-15

    return MmseReport(b_star=b_star, max_orthogonality=max_orth,
                      optimality_ok=optimality_ok, sufficiency_ok=sufficiency_ok,
                      mse_star=mse_star)
