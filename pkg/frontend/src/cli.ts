#!/usr/bin/env node
/**
 * ebd-plots: render trainer metrics CSVs to SVG.
 *
 *   ebd-plots learning-curves --csv run1.csv [--csv run2.csv ...] --out plot.svg [--metric accuracy|mse]
 *   ebd-plots correlation-decay --csv run.csv --out plot.svg [--split train|test]
 *   ebd-plots alignment --csv run.csv --out plot.svg [--kind bp|trunc]
 *
 * Exit codes: 0 ok, 2 usage error, 3 schema/data error.
 */

import { readFileSync, writeFileSync } from "fs";
import { MetricsFrame, SchemaError, parseMetricsCsv } from "./csv.js";
import { plotAlignment, plotCorrelationDecay, plotLearningCurves } from "./plot.js";

interface Args {
  verb: string;
  csv: string[];
  out: string;
  metric: "accuracy" | "mse";
  split: "train" | "test";
  kind: "bp" | "trunc";
  title?: string;
}

function parseArgs(argv: string[]): Args {
  const [verb, ...rest] = argv;
  const args: Args = { verb: verb ?? "", csv: [], out: "", metric: "accuracy", split: "test", kind: "bp" };
  for (let i = 0; i < rest.length; i++) {
    const flag = rest[i];
    const val = rest[++i];
    if (val === undefined) throw new UsageError(`missing value for ${flag}`);
    switch (flag) {
      case "--csv": args.csv.push(val); break;
      case "--out": args.out = val; break;
      case "--metric":
        if (val !== "accuracy" && val !== "mse") throw new UsageError(`bad --metric ${val}`);
        args.metric = val; break;
      case "--split":
        if (val !== "train" && val !== "test") throw new UsageError(`bad --split ${val}`);
        args.split = val; break;
      case "--kind":
        if (val !== "bp" && val !== "trunc") throw new UsageError(`bad --kind ${val}`);
        args.kind = val; break;
      case "--title": args.title = val; break;
      default: throw new UsageError(`unknown flag ${flag}`);
    }
  }
  return args;
}

class UsageError extends Error {}

export function main(argv: string[]): number {
  let args: Args;
  try {
    args = parseArgs(argv);
    if (!["learning-curves", "correlation-decay", "alignment"].includes(args.verb)) {
      throw new UsageError(`unknown verb '${args.verb}'`);
    }
    if (args.csv.length === 0 || !args.out) {
      throw new UsageError("--csv and --out are required");
    }
  } catch (e) {
    if (e instanceof UsageError) {
      process.stderr.write(`usage error: ${e.message}\n`);
      return 2;
    }
    throw e;
  }

  try {
    const frames: MetricsFrame[] = args.csv.map((p) => parseMetricsCsv(readFileSync(p, "utf8"), p));
    let svg: string;
    if (args.verb === "learning-curves") {
      svg = plotLearningCurves(frames, args.metric, args.title);
    } else if (args.verb === "correlation-decay") {
      svg = plotCorrelationDecay(frames, args.split, args.title);
    } else {
      svg = plotAlignment(frames, args.kind, args.title);
    }
    writeFileSync(args.out, svg);
    process.stdout.write(`${args.out}\n`);
    return 0;
  } catch (e) {
    if (e instanceof SchemaError || (e as NodeJS.ErrnoException).code === "ENOENT") {
      process.stderr.write(`data error: ${(e as Error).message}\n`);
      return 3;
    }
    throw e;
  }
}
