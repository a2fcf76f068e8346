/**
 * Plot builders over parsed metrics frames.
 *
 * Conventions: solid lines are test curves, dashed lines are train curves;
 * with two or more runs, lines show the mean and a shaded band shows +-1 std.
 * Output is deterministic for identical inputs (no timestamps).
 */

import { MetricsFrame, SchemaError, meanStd, series } from "./csv.js";
import {
  DEFAULT_GEOMETRY,
  LegendEntry,
  PlotGeometry,
  axes,
  band,
  document as svgDocument,
  legend,
  polyline,
} from "./svg.js";

const PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

interface Aggregated {
  epochs: number[];
  mean: number[];
  std: number[];
  multi: boolean;
}

function aggregate(frames: MetricsFrame[], column: string, split: "train" | "test"): Aggregated {
  const all = frames.map((f) => series(f, column, split));
  const agg = meanStd(all);
  return { ...agg, multi: frames.length >= 2 };
}

function extentOf(aggs: Aggregated[], padFrac = 0.05) {
  let yMin = Infinity;
  let yMax = -Infinity;
  let xMin = Infinity;
  let xMax = -Infinity;
  for (const a of aggs) {
    for (let i = 0; i < a.epochs.length; i++) {
      yMin = Math.min(yMin, a.mean[i] - a.std[i]);
      yMax = Math.max(yMax, a.mean[i] + a.std[i]);
    }
    xMin = Math.min(xMin, a.epochs[0]);
    xMax = Math.max(xMax, a.epochs[a.epochs.length - 1]);
  }
  const pad = (yMax - yMin || 1) * padFrac;
  return { xMin, xMax, yMin: yMin - pad, yMax: yMax + pad };
}

export function plotLearningCurves(frames: MetricsFrame[], metric: "accuracy" | "mse" = "accuracy",
                                   title?: string): string {
  if (frames.length === 0) {
    throw new SchemaError("no input frames");
  }
  const test = aggregate(frames, metric, "test");
  const train = aggregate(frames, metric, "train");
  const g: PlotGeometry = { ...DEFAULT_GEOMETRY, extent: extentOf([test, train]) };
  const color = PALETTE[0];
  const parts: string[] = [];
  parts.push(axes(g, "epoch", metric, title ?? `${frames[0].run}: ${metric} vs epoch`));
  for (const [agg, dashed] of [[test, false], [train, true]] as [Aggregated, boolean][]) {
    if (agg.multi) {
      parts.push(band(g, agg.epochs,
        agg.mean.map((m, i) => m - agg.std[i]),
        agg.mean.map((m, i) => m + agg.std[i]), color));
    }
    parts.push(polyline(g, agg.epochs, agg.mean, color, dashed));
  }
  const entries: LegendEntry[] = [
    { label: `test (${frames.length} run${frames.length > 1 ? "s" : ""})`, color, dashed: false },
    { label: "train", color, dashed: true },
  ];
  parts.push(legend(g, entries));
  return svgDocument(g, parts.join("\n"));
}

export function plotCorrelationDecay(frames: MetricsFrame[], split: "train" | "test" = "test",
                                     title?: string): string {
  if (frames.length === 0) {
    throw new SchemaError("no input frames");
  }
  const corrCols = frames[0].columns.filter((c) => c.startsWith("corr_l"));
  if (corrCols.length === 0) {
    throw new SchemaError(`${frames[0].path}: no corr_l* columns (run the correlation probe)`);
  }
  const aggs = corrCols.map((c) => aggregate(frames, c, split));
  const g: PlotGeometry = { ...DEFAULT_GEOMETRY, extent: extentOf(aggs) };
  const parts: string[] = [];
  parts.push(axes(g, "epoch", "mean |corr(h, error)|",
    title ?? `${frames[0].run}: correlation decay (${split})`));
  const entries: LegendEntry[] = [];
  aggs.forEach((agg, i) => {
    const color = PALETTE[i % PALETTE.length];
    if (agg.multi) {
      parts.push(band(g, agg.epochs,
        agg.mean.map((m, j) => m - agg.std[j]),
        agg.mean.map((m, j) => m + agg.std[j]), color));
    }
    parts.push(polyline(g, agg.epochs, agg.mean, color, false));
    entries.push({ label: `layer ${corrCols[i].slice("corr_l".length)}`, color, dashed: false });
  });
  parts.push(legend(g, entries));
  return svgDocument(g, parts.join("\n"));
}

export function plotAlignment(frames: MetricsFrame[], kind: "bp" | "trunc" = "bp",
                              title?: string): string {
  if (frames.length === 0) {
    throw new SchemaError("no input frames");
  }
  const prefix = kind === "bp" ? "align_bp_l" : "align_trunc_l";
  const cols = frames[0].columns.filter((c) => c.startsWith(prefix));
  if (cols.length === 0) {
    throw new SchemaError(`${frames[0].path}: no ${prefix}* columns (run the alignment probe)`);
  }
  // alignment summaries exist only on rows logged during training epochs;
  // epoch 0 carries zeros, skip it
  const aggs = cols.map((c) => {
    const a = aggregate(frames, c, "train");
    return { ...a, epochs: a.epochs.slice(1), mean: a.mean.slice(1), std: a.std.slice(1) };
  });
  const g: PlotGeometry = { ...DEFAULT_GEOMETRY, extent: extentOf(aggs) };
  const parts: string[] = [];
  parts.push(axes(g, "epoch", `cosine (${kind})`,
    title ?? `${frames[0].run}: update alignment`));
  const entries: LegendEntry[] = [];
  aggs.forEach((agg, i) => {
    const color = PALETTE[i % PALETTE.length];
    parts.push(polyline(g, agg.epochs, agg.mean, color, false));
    entries.push({ label: `layer ${cols[i].slice(prefix.length)}`, color, dashed: false });
  });
  parts.push(legend(g, entries));
  return svgDocument(g, parts.join("\n"));
}
