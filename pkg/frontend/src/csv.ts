/**
 * Trainer metrics CSV parsing and schema validation.
 *
 * The trainer writes one row per (epoch, split) with a fixed header:
 *   run,epoch,split,accuracy,mse[,corr_l*...][,power_l*...][,align_*...][,eq_*]
 * Files whose header does not match this schema are rejected.
 */

export interface MetricsRow {
  run: string;
  epoch: number;
  split: "train" | "test";
  values: Record<string, number>;
}

export interface MetricsFrame {
  path: string;
  run: string;
  columns: string[];
  rows: MetricsRow[];
}

export class SchemaError extends Error {}

const BASE_COLUMNS = ["run", "epoch", "split", "accuracy", "mse"];
const OPTIONAL_PATTERN = /^(corr_l\d+|power_l\d+|align_bp_l\d+|align_trunc_l\d+|eq_converged|eq_iters_mean)$/;

export function validateHeader(header: string[]): void {
  if (header.length < BASE_COLUMNS.length) {
    throw new SchemaError(`header has ${header.length} columns, need at least ${BASE_COLUMNS.length}`);
  }
  BASE_COLUMNS.forEach((name, i) => {
    if (header[i] !== name) {
      throw new SchemaError(`column ${i} is '${header[i]}', expected '${name}'`);
    }
  });
  for (const extra of header.slice(BASE_COLUMNS.length)) {
    if (!OPTIONAL_PATTERN.test(extra)) {
      throw new SchemaError(`unknown metrics column '${extra}'`);
    }
  }
}

export function parseMetricsCsv(text: string, path = "<memory>"): MetricsFrame {
  const lines = text.split(/\r?\n/).filter((l) => l.length > 0);
  if (lines.length === 0) {
    throw new SchemaError(`${path}: empty file`);
  }
  const header = lines[0].split(",");
  validateHeader(header);
  const rows: MetricsRow[] = [];
  let run = "";
  for (let i = 1; i < lines.length; i++) {
    const parts = lines[i].split(",");
    if (parts.length !== header.length) {
      throw new SchemaError(`${path}:${i + 1}: ${parts.length} fields, header has ${header.length}`);
    }
    const split = parts[2];
    if (split !== "train" && split !== "test") {
      throw new SchemaError(`${path}:${i + 1}: split '${split}' is not train/test`);
    }
    const values: Record<string, number> = {};
    for (let c = 3; c < header.length; c++) {
      const v = Number(parts[c]);
      if (!Number.isFinite(v)) {
        throw new SchemaError(`${path}:${i + 1}: non-numeric '${parts[c]}' in ${header[c]}`);
      }
      values[header[c]] = v;
    }
    run = parts[0];
    rows.push({ run: parts[0], epoch: Number(parts[1]), split, values });
  }
  if (rows.length === 0) {
    throw new SchemaError(`${path}: no data rows`);
  }
  return { path, run, columns: header, rows };
}

/** Epoch-ordered values of one column for one split. */
export function series(frame: MetricsFrame, column: string, split: "train" | "test"):
    { epochs: number[]; values: number[] } {
  if (!frame.columns.includes(column)) {
    throw new SchemaError(`${frame.path}: missing column '${column}'`);
  }
  const rows = frame.rows
    .filter((r) => r.split === split)
    .sort((a, b) => a.epoch - b.epoch);
  return { epochs: rows.map((r) => r.epoch), values: rows.map((r) => r.values[column]) };
}

/** Mean and population std across runs, epoch-aligned (epochs must agree). */
export function meanStd(framesSeries: { epochs: number[]; values: number[] }[]):
    { epochs: number[]; mean: number[]; std: number[] } {
  const epochs = framesSeries[0].epochs;
  for (const s of framesSeries) {
    if (s.epochs.length !== epochs.length || s.epochs.some((e, i) => e !== epochs[i])) {
      throw new SchemaError("runs disagree on evaluated epochs; cannot aggregate");
    }
  }
  const mean = epochs.map((_, i) =>
    framesSeries.reduce((acc, s) => acc + s.values[i], 0) / framesSeries.length);
  const std = epochs.map((_, i) => {
    const m = mean[i];
    const v = framesSeries.reduce((acc, s) => acc + (s.values[i] - m) ** 2, 0) / framesSeries.length;
    return Math.sqrt(v);
  });
  return { epochs, mean, std };
}
