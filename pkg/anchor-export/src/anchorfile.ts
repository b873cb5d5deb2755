import type { Encoder } from "./encoder.js";

export const UNKNOWN_NAME = "unknown";

export interface AnchorRecord {
  class_id: number;
  name: string;
  vector: number[];
}

/**
 * Encode class names into anchor records. The `unknown` anchor is always
 * emitted first at class_id 0 (it is implicit; listing it is an error),
 * object classes get ids 1..C in input order. Every vector shares the
 * encoder's dimension by construction.
 */
export function buildAnchors(names: string[], encoder: Encoder): AnchorRecord[] {
  if (names.length === 0) throw new Error("need at least one class name");
  const seen = new Set<string>();
  for (const name of names) {
    if (name === UNKNOWN_NAME) {
      throw new Error(`'${UNKNOWN_NAME}' is written automatically, do not list it`);
    }
    if (seen.has(name)) throw new Error(`duplicate class name ${JSON.stringify(name)}`);
    seen.add(name);
  }
  const all = [UNKNOWN_NAME, ...names];
  return all.map((name, class_id) => ({
    class_id,
    name,
    vector: encoder.encode(name),
  }));
}

/** Serialize records as JSONL with a header comment naming the encoder. */
export function renderAnchorFile(records: AnchorRecord[], encoderId: string): string {
  const header = `# anchor-export ${encoderId}`;
  const lines = records.map((r) => JSON.stringify(r));
  return [header, ...lines].join("\n") + "\n";
}
