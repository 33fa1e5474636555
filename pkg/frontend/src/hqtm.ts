/**
 * HQTM container writer and token-file writer, matching
 * docs/file_formats.md byte for byte: "HQTM" magic, u32 version, u32 header
 * length, canonical JSON header with a tensor directory, little-endian
 * float32 payload, trailing CRC32 of the payload.
 */

import { writeFileSync } from 'node:fs';
import { Model } from './model.js';

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let i = 0; i < 256; i++) {
    let c = i;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[i] = c >>> 0;
  }
  return table;
})();

export function crc32(data: Uint8Array): number {
  let c = 0xffffffff;
  for (let i = 0; i < data.length; i++) {
    c = CRC_TABLE[(c ^ data[i]) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

/** JSON with recursively sorted keys and compact separators. */
export function canonicalJson(value: unknown): string {
  if (value === null || typeof value !== 'object') return JSON.stringify(value);
  if (Array.isArray(value)) return '[' + value.map(canonicalJson).join(',') + ']';
  const keys = Object.keys(value as object).sort();
  const parts = keys.map(
    (k) => JSON.stringify(k) + ':' + canonicalJson((value as Record<string, unknown>)[k]));
  return '{' + parts.join(',') + '}';
}

interface TensorEntry {
  name: string;
  shape: number[];
  dtype: string;
  offset: number;
  nbytes: number;
}

export function f32Bytes(data: Float64Array): Uint8Array {
  const out = new Uint8Array(data.length * 4);
  const view = new DataView(out.buffer);
  for (let i = 0; i < data.length; i++) view.setFloat32(i * 4, data[i], true);
  return out;
}

export function writeModel(model: Model, path: string): void {
  const cfg = model.cfg;
  const tensors: Array<{ name: string; shape: number[]; bytes: Uint8Array }> = [];
  tensors.push({ name: 'embedding', shape: [cfg.vocab, cfg.dModel],
                 bytes: f32Bytes(model.embedding.data) });
  tensors.push({ name: 'final_norm', shape: [cfg.dModel],
                 bytes: f32Bytes(model.finalNorm.data) });
  tensors.push({ name: 'lm_head', shape: [cfg.dModel, cfg.vocab],
                 bytes: f32Bytes(model.lmHead.data) });
  model.layers.forEach((lp, i) => {
    const d = cfg.dModel;
    const f = cfg.dFf;
    const entries: Array<[string, Float64Array, number[]]> = [
      [`layers.${i}.w_q`, lp.wq.data, [d, d]],
      [`layers.${i}.w_k`, lp.wk.data, [d, d]],
      [`layers.${i}.w_v`, lp.wv.data, [d, d]],
      [`layers.${i}.w_o`, lp.wo.data, [d, d]],
      [`layers.${i}.w_gate`, lp.wgate.data, [d, f]],
      [`layers.${i}.w_up`, lp.wup.data, [d, f]],
      [`layers.${i}.w_down`, lp.wdown.data, [f, d]],
      [`layers.${i}.norm_attn`, lp.normAttn.data, [d]],
      [`layers.${i}.norm_ffn`, lp.normFfn.data, [d]],
    ];
    for (const [name, data, shape] of entries) {
      tensors.push({ name, shape, bytes: f32Bytes(data) });
    }
  });

  const directory: TensorEntry[] = [];
  let offset = 0;
  for (const t of tensors) {
    directory.push({ name: t.name, shape: t.shape, dtype: 'f32',
                     offset, nbytes: t.bytes.length });
    offset += t.bytes.length;
  }
  const payload = new Uint8Array(offset);
  for (const [idx, t] of tensors.entries()) {
    payload.set(t.bytes, directory[idx].offset);
  }

  const header = {
    format: 'HQTM',
    dims: {
      d_model: cfg.dModel, d_ff: cfg.dFf, n_heads: cfg.nHeads,
      n_layers: cfg.nLayers, vocab: cfg.vocab, max_seq: cfg.maxSeq,
      rope_base: cfg.ropeBase,
    },
    tensors: directory,
  };
  const headerBytes = new TextEncoder().encode(canonicalJson(header));

  const file = new Uint8Array(4 + 4 + 4 + headerBytes.length + payload.length + 4);
  const view = new DataView(file.buffer);
  file.set([0x48, 0x51, 0x54, 0x4d], 0); // "HQTM"
  view.setUint32(4, 1, true);
  view.setUint32(8, headerBytes.length, true);
  file.set(headerBytes, 12);
  file.set(payload, 12 + headerBytes.length);
  view.setUint32(12 + headerBytes.length + payload.length, crc32(payload), true);
  writeFileSync(path, file);
}

/** Little-endian u32 token ids; single-document streams carry no separator. */
export function writeTokenFile(tokens: Uint8Array | number[], path: string): void {
  const out = new Uint8Array(tokens.length * 4);
  const view = new DataView(out.buffer);
  for (let i = 0; i < tokens.length; i++) view.setUint32(i * 4, tokens[i], true);
  writeFileSync(path, out);
}
