import { createHash } from "node:crypto";

export interface Encoder {
  readonly model: string;
  readonly dim: number;
  embed(phrases: string[]): number[][];
}

const FLOATS_PER_BLOCK = 8; // one sha256 block yields 8 uint32 -> 8 floats

/**
 * Deterministic bag-of-tokens encoder.
 *
 * Each token maps to a pseudo-random direction seeded by sha256 of
 * (namespace, token); a phrase is the L2-normalized sum of its token
 * directions, so phrases sharing words land close in cosine while unrelated
 * phrases stay near-orthogonal. Identical (namespace, phrase) pairs always
 * produce identical vectors, on any platform.
 */
export class TokenHashEncoder implements Encoder {
  readonly model: string;
  private readonly cache = new Map<string, Float64Array>();

  constructor(
    readonly namespace: string = "all-MiniLM-L6-v2",
    readonly dim: number = 384,
  ) {
    this.model = `token-hash:${namespace}`;
  }

  private tokenDirection(token: string): Float64Array {
    const cached = this.cache.get(token);
    if (cached) return cached;
    const out = new Float64Array(this.dim);
    const blocks = Math.ceil(this.dim / FLOATS_PER_BLOCK);
    for (let block = 0; block < blocks; block++) {
      const digest = createHash("sha256")
        .update(`${this.namespace}\0${token}\0${block}`)
        .digest();
      for (let i = 0; i < FLOATS_PER_BLOCK; i++) {
        const index = block * FLOATS_PER_BLOCK + i;
        if (index >= this.dim) break;
        // uint32 -> uniform in [-1, 1)
        out[index] = digest.readUInt32BE(i * 4) / 2 ** 31 - 1;
      }
    }
    this.cache.set(token, out);
    return out;
  }

  private encodeOne(phrase: string): number[] {
    const tokens = phrase.toLowerCase().match(/[a-z0-9]+/g) ?? [phrase];
    const sum = new Float64Array(this.dim);
    for (const token of tokens) {
      const direction = this.tokenDirection(token);
      for (let i = 0; i < this.dim; i++) sum[i] += direction[i];
    }
    let norm = Math.sqrt(sum.reduce((acc, x) => acc + x * x, 0));
    if (norm === 0) {
      sum[0] = 1;
      norm = 1;
    }
    return Array.from(sum, (x) => x / norm);
  }

  embed(phrases: string[]): number[][] {
    return phrases.map((p) => this.encodeOne(p));
  }
}
