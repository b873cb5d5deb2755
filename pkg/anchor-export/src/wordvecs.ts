import { readFileSync } from "node:fs";

import { type Encoder, l2normalize } from "./encoder.js";

/**
 * Encoder over a pretrained word-vector text file (`word v1 v2 ...` per
 * line, as published for GloVe and word2vec). A class name is split on
 * whitespace, hyphens, and underscores; its vector is the mean of its
 * words' vectors. Words missing from the file are an error, not a fallback:
 * a silently hashed stand-in would not be the embedding the file promises.
 */
export function wordVectorEncoder(path: string, normalize = true): Encoder {
  const table = new Map<string, number[]>();
  let dim = 0;
  const lines = readFileSync(path, "utf-8").split("\n");
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i].trim();
    if (!line || line.startsWith("#")) continue;
    const parts = line.split(/\s+/);
    const vec = parts.slice(1).map(Number);
    if (parts.length < 2 || vec.some((x) => !Number.isFinite(x))) {
      throw new Error(`${path}:${i + 1}: expected 'word v1 v2 ...'`);
    }
    if (dim === 0) dim = vec.length;
    if (vec.length !== dim) {
      throw new Error(`${path}:${i + 1}: expected ${dim} values, got ${vec.length}`);
    }
    table.set(parts[0].toLowerCase(), vec);
  }
  if (table.size === 0) throw new Error(`${path}: no word vectors found`);

  return {
    id: `word-vectors-${dim}`,
    dim,
    encode(name: string): number[] {
      const words = name.toLowerCase().split(/[\s_-]+/).filter(Boolean);
      if (words.length === 0) throw new Error("cannot encode an empty name");
      const sum = new Array<number>(dim).fill(0);
      for (const word of words) {
        const vec = table.get(word);
        if (!vec) throw new Error(`no vector for ${JSON.stringify(word)} in ${path}`);
        for (let i = 0; i < dim; i++) sum[i] += vec[i];
      }
      const mean = sum.map((x) => x / words.length);
      return normalize ? l2normalize(mean, name) : mean;
    },
  };
}
