/**
 * Byte-level corpus handling: train/held-out split and seeded batch
 * sampling of contiguous windows.
 */

import { readFileSync } from 'node:fs';
import { Rng } from './rng.js';

export interface Corpus {
  train: Uint8Array;
  heldout: Uint8Array;
}

export function loadCorpus(path: string, heldoutFraction = 0.1): Corpus {
  const bytes = new Uint8Array(readFileSync(path));
  if (bytes.length < 100_000) {
    throw new Error(`corpus too small: ${bytes.length} bytes (need >= 100k)`);
  }
  const split = Math.floor(bytes.length * (1 - heldoutFraction));
  return { train: bytes.subarray(0, split), heldout: bytes.subarray(split) };
}

export function sampleBatch(stream: Uint8Array, rng: Rng, batch: number,
                            seqLen: number): number[][] {
  const maxStart = stream.length - seqLen;
  const seqs: number[][] = [];
  for (let b = 0; b < batch; b++) {
    const start = rng.int(maxStart + 1);
    const seq: number[] = new Array(seqLen);
    for (let i = 0; i < seqLen; i++) seq[i] = stream[start + i];
    seqs.push(seq);
  }
  return seqs;
}

/** Sequential non-overlapping windows covering (most of) a stream. */
export function sequentialWindows(stream: Uint8Array, seqLen: number,
                                  maxWindows: number): number[][] {
  const out: number[][] = [];
  for (let start = 0; start + seqLen <= stream.length && out.length < maxWindows;
       start += seqLen) {
    const seq: number[] = new Array(seqLen);
    for (let i = 0; i < seqLen; i++) seq[i] = stream[start + i];
    out.push(seq);
  }
  return out;
}
