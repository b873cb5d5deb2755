/** Deterministic text encoders for class names. No models, no network. */

export interface Encoder {
  /** Identifier written into the output file's header comment. */
  id: string;
  dim: number;
  encode(name: string): number[];
}

// FNV-1a, 32-bit. Math.imul keeps the multiply in int32 land, so the same
// string hashes identically on every platform and run.
function fnv1a(text: string, seed: number): number {
  let h = (0x811c9dc5 ^ seed) >>> 0;
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 0x01000193) >>> 0;
  }
  return h;
}

function* ngrams(name: string): Generator<string> {
  const padded = `^${name.toLowerCase()}$`;
  for (let n = 2; n <= 4; n++) {
    for (let i = 0; i + n <= padded.length; i++) {
      yield padded.slice(i, i + n);
    }
  }
}

/**
 * Hashed character n-gram embedding: each 2-4 gram adds +-1 to one of `dim`
 * buckets (bucket and sign from independent hashes), optionally L2-normalized.
 * Pure function of the name, so re-encoding is bit-identical.
 */
export function hashedNgramEncoder(dim: number, normalize = true): Encoder {
  if (!Number.isInteger(dim) || dim < 2) {
    throw new Error(`encoder dim must be an integer >= 2, got ${dim}`);
  }
  return {
    id: `hashed-ngram-${dim}${normalize ? "" : "-raw"}`,
    dim,
    encode(name: string): number[] {
      if (!name) throw new Error("cannot encode an empty name");
      const v = new Array<number>(dim).fill(0);
      for (const gram of ngrams(name)) {
        const bucket = fnv1a(gram, 0) % dim;
        const sign = fnv1a(gram, 0x9747b28c) & 1 ? 1 : -1;
        v[bucket] += sign;
      }
      return normalize ? l2normalize(v, name) : v;
    },
  };
}

export function l2normalize(v: number[], label = "vector"): number[] {
  const norm = Math.sqrt(v.reduce((s, x) => s + x * x, 0));
  if (norm === 0) throw new Error(`${label}: zero vector cannot be normalized`);
  return v.map((x) => x / norm);
}
