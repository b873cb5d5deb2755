#!/usr/bin/env node
import { readFileSync, writeFileSync } from "node:fs";

import { buildAnchors, renderAnchorFile } from "./anchorfile.js";
import { type Encoder, hashedNgramEncoder } from "./encoder.js";
import { wordVectorEncoder } from "./wordvecs.js";

const USAGE = `usage: anchor-export --names a,b,c | --names-file FILE
                     [--encoder hashed|vectors] [--dim 512|768]
                     [--vectors-file FILE] [--no-normalize] --out FILE

Writes one JSONL anchor record per class name, 'unknown' first at class_id 0.
The hashed encoder needs --dim; the vectors encoder needs --vectors-file and
takes its dimension from that file.`;

interface Args {
  names: string[];
  encoder: "hashed" | "vectors";
  dim: number;
  vectorsFile?: string;
  out: string;
  normalize: boolean;
}

class UsageError extends Error {}

function parseArgs(argv: string[]): Args {
  const opts = new Map<string, string>();
  const flags = new Set<string>();
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === "--no-normalize" || arg === "--help" || arg === "-h") {
      flags.add(arg);
    } else if (arg.startsWith("--")) {
      const value = argv[++i];
      if (value === undefined) throw new UsageError(`${arg} needs a value`);
      opts.set(arg, value);
    } else {
      throw new UsageError(`unexpected argument ${JSON.stringify(arg)}`);
    }
  }
  if (flags.has("--help") || flags.has("-h")) {
    console.log(USAGE);
    process.exit(0);
  }

  let names: string[];
  if (opts.has("--names") && opts.has("--names-file")) {
    throw new UsageError("--names and --names-file are mutually exclusive");
  } else if (opts.has("--names")) {
    names = opts.get("--names")!.split(",").map((s) => s.trim()).filter(Boolean);
  } else if (opts.has("--names-file")) {
    names = readFileSync(opts.get("--names-file")!, "utf-8")
      .split("\n")
      .map((line) => line.trim())
      .filter((line) => line && !line.startsWith("#"));
  } else {
    throw new UsageError("one of --names or --names-file is required");
  }

  const encoder = opts.get("--encoder") ?? "hashed";
  if (encoder !== "hashed" && encoder !== "vectors") {
    throw new UsageError(`--encoder must be 'hashed' or 'vectors', got ${encoder}`);
  }
  const dim = Number(opts.get("--dim") ?? "512");
  if (encoder === "hashed" && dim !== 512 && dim !== 768) {
    throw new UsageError("--dim must be 512 or 768");
  }
  if (encoder === "vectors" && !opts.has("--vectors-file")) {
    throw new UsageError("--encoder vectors needs --vectors-file");
  }
  const out = opts.get("--out");
  if (!out) throw new UsageError("--out is required");

  return {
    names,
    encoder,
    dim,
    vectorsFile: opts.get("--vectors-file"),
    out,
    normalize: !flags.has("--no-normalize"),
  };
}

export function run(argv: string[]): number {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`error: ${err.message}\n\n${USAGE}`);
      return 2;
    }
    throw err;
  }
  try {
    const encoder: Encoder =
      args.encoder === "hashed"
        ? hashedNgramEncoder(args.dim, args.normalize)
        : wordVectorEncoder(args.vectorsFile!, args.normalize);
    const records = buildAnchors(args.names, encoder);
    writeFileSync(args.out, renderAnchorFile(records, encoder.id));
    console.log(`wrote ${records.length} anchors of dim ${encoder.dim} to ${args.out}`);
    return 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

if (process.argv[1] && import.meta.url === new URL(`file://${process.argv[1]}`).href) {
  process.exit(run(process.argv.slice(2)));
}
