/**
 * The toy decoder-only transformer: pre-RMSNorm attention with rotary
 * embeddings, SwiGLU FFN, byte-level vocabulary - implementing
 * docs/forward_math.md verbatim (the parity contract with the Python
 * inference side). Forward caches everything the manual backward needs.
 */

import { Rng } from './rng.js';
import { matmul, matmulGradA, matmulGradB, zeros } from './tensor.js';

export const RMS_EPS = 1e-6;

export interface ModelConfig {
  dModel: number;
  dFf: number;
  nHeads: number;
  nLayers: number;
  vocab: number;
  maxSeq: number;
  ropeBase: number;
}

export class Param {
  readonly data: Float64Array;
  readonly grad: Float64Array;

  constructor(readonly name: string, readonly rows: number, readonly cols: number) {
    this.data = zeros(rows * cols);
    this.grad = zeros(rows * cols);
  }
}

export interface LayerParams {
  wq: Param; wk: Param; wv: Param; wo: Param;
  wgate: Param; wup: Param; wdown: Param;
  normAttn: Param; normFfn: Param;
}

interface LayerCache {
  x: Float64Array;        // layer input rows
  xn: Float64Array;       // rmsnorm(x)
  rmsAttn: Float64Array;  // per-row rms of x
  q: Float64Array; k: Float64Array; v: Float64Array;  // q,k post-rope
  probs: Float64Array;    // attention probabilities per (seq, head)
  ctx: Float64Array;
  h1: Float64Array;
  hn: Float64Array;
  rmsFfn: Float64Array;
  g: Float64Array; u: Float64Array; sig: Float64Array; inter: Float64Array;
  out: Float64Array;
}

export interface ForwardCache {
  seqs: number[][];
  offsets: number[];      // row offset of each sequence
  n: number;
  layers: LayerCache[];
  xFinal: Float64Array;
  xnFinal: Float64Array;
  rmsFinal: Float64Array;
  logits: Float64Array;
}

export class Model {
  layers: LayerParams[] = [];
  embedding: Param;
  finalNorm: Param;
  lmHead: Param;

  constructor(readonly cfg: ModelConfig) {
    if (cfg.dModel % cfg.nHeads !== 0) throw new Error('dModel % nHeads != 0');
    if ((cfg.dModel / cfg.nHeads) % 2 !== 0) throw new Error('head dim must be even');
    this.embedding = new Param('embedding', cfg.vocab, cfg.dModel);
    this.finalNorm = new Param('final_norm', 1, cfg.dModel);
    this.lmHead = new Param('lm_head', cfg.dModel, cfg.vocab);
    for (let l = 0; l < cfg.nLayers; l++) {
      const p = (s: string, r: number, c: number) => new Param(`layers.${l}.${s}`, r, c);
      this.layers.push({
        wq: p('w_q', cfg.dModel, cfg.dModel), wk: p('w_k', cfg.dModel, cfg.dModel),
        wv: p('w_v', cfg.dModel, cfg.dModel), wo: p('w_o', cfg.dModel, cfg.dModel),
        wgate: p('w_gate', cfg.dModel, cfg.dFf), wup: p('w_up', cfg.dModel, cfg.dFf),
        wdown: p('w_down', cfg.dFf, cfg.dModel),
        normAttn: p('norm_attn', 1, cfg.dModel), normFfn: p('norm_ffn', 1, cfg.dModel),
      });
    }
  }

  static init(cfg: ModelConfig, seed: number): Model {
    const m = new Model(cfg);
    const rng = new Rng(seed);
    const fill = (p: Param, std: number) => {
      for (let i = 0; i < p.data.length; i++) p.data[i] = rng.gauss() * std;
    };
    fill(m.embedding, 0.5);
    m.finalNorm.data.fill(1);
    fill(m.lmHead, 1 / Math.sqrt(cfg.dModel));
    for (const lp of m.layers) {
      for (const w of [lp.wq, lp.wk, lp.wv, lp.wo, lp.wgate, lp.wup]) {
        fill(w, 1 / Math.sqrt(cfg.dModel));
      }
      fill(lp.wdown, 1 / Math.sqrt(cfg.dFf));
      lp.normAttn.data.fill(1);
      lp.normFfn.data.fill(1);
    }
    return m;
  }

  params(): Param[] {
    const out = [this.embedding, this.finalNorm, this.lmHead];
    for (const lp of this.layers) {
      out.push(lp.wq, lp.wk, lp.wv, lp.wo, lp.wgate, lp.wup, lp.wdown,
               lp.normAttn, lp.normFfn);
    }
    return out;
  }

  zeroGrads(): void {
    for (const p of this.params()) p.grad.fill(0);
  }

  private rmsnorm(x: Float64Array, gain: Float64Array, n: number,
                  out: Float64Array, rms: Float64Array): void {
    const d = this.cfg.dModel;
    for (let i = 0; i < n; i++) {
      const xi = i * d;
      let ss = 0;
      for (let j = 0; j < d; j++) ss += x[xi + j] * x[xi + j];
      const r = Math.sqrt(ss / d + RMS_EPS);
      rms[i] = r;
      for (let j = 0; j < d; j++) out[xi + j] = x[xi + j] / r * gain[j];
    }
  }

  private rmsnormBackward(x: Float64Array, gain: Float64Array, rms: Float64Array,
                          dy: Float64Array, n: number,
                          dx: Float64Array, dgain: Float64Array): void {
    const d = this.cfg.dModel;
    for (let i = 0; i < n; i++) {
      const xi = i * d;
      const r = rms[i];
      let s1 = 0;
      for (let j = 0; j < d; j++) s1 += dy[xi + j] * gain[j] * x[xi + j];
      const c = s1 / (d * r * r * r);
      for (let j = 0; j < d; j++) {
        dx[xi + j] += gain[j] * dy[xi + j] / r - x[xi + j] * c;
        dgain[j] += x[xi + j] * dy[xi + j] / r;
      }
    }
  }

  /** Rotate adjacent pairs of each head by the row's position angle. */
  private rope(x: Float64Array, offsets: number[], seqs: number[][],
               sign: number): void {
    const { dModel, nHeads, ropeBase } = this.cfg;
    const hd = dModel / nHeads;
    for (let s = 0; s < seqs.length; s++) {
      for (let pos = 0; pos < seqs[s].length; pos++) {
        const row = (offsets[s] + pos) * dModel;
        for (let h = 0; h < nHeads; h++) {
          for (let i = 0; i < hd / 2; i++) {
            const theta = pos * Math.pow(ropeBase, -2 * i / hd);
            const c = Math.cos(theta);
            const si = Math.sin(theta) * sign;
            const a = x[row + h * hd + 2 * i];
            const b = x[row + h * hd + 2 * i + 1];
            x[row + h * hd + 2 * i] = a * c - b * si;
            x[row + h * hd + 2 * i + 1] = a * si + b * c;
          }
        }
      }
    }
  }

  forward(seqs: number[][]): ForwardCache {
    const { dModel, dFf, nHeads, vocab, maxSeq } = this.cfg;
    const hd = dModel / nHeads;
    const offsets: number[] = [];
    let n = 0;
    for (const seq of seqs) {
      if (seq.length === 0 || seq.length > maxSeq) throw new Error('bad sequence length');
      for (const t of seq) {
        if (t < 0 || t >= vocab) throw new Error('token out of range');
      }
      offsets.push(n);
      n += seq.length;
    }

    let x = zeros(n * dModel);
    for (let s = 0; s < seqs.length; s++) {
      for (let pos = 0; pos < seqs[s].length; pos++) {
        const row = (offsets[s] + pos) * dModel;
        const erow = seqs[s][pos] * dModel;
        for (let j = 0; j < dModel; j++) x[row + j] = this.embedding.data[erow + j];
      }
    }

    const caches: LayerCache[] = [];
    const invSqrtHd = 1 / Math.sqrt(hd);

    for (const lp of this.layers) {
      const xn = zeros(n * dModel);
      const rmsAttn = zeros(n);
      this.rmsnorm(x, lp.normAttn.data, n, xn, rmsAttn);

      const q = zeros(n * dModel);
      const k = zeros(n * dModel);
      const v = zeros(n * dModel);
      matmul(xn, lp.wq.data, q, n, dModel, dModel);
      matmul(xn, lp.wk.data, k, n, dModel, dModel);
      matmul(xn, lp.wv.data, v, n, dModel, dModel);
      this.rope(q, offsets, seqs, 1);
      this.rope(k, offsets, seqs, 1);

      // attention per sequence and head; probs stored triangularly padded
      let probSize = 0;
      for (const seq of seqs) probSize += nHeads * seq.length * seq.length;
      const probs = zeros(probSize);
      const ctx = zeros(n * dModel);
      let pbase = 0;
      for (let s = 0; s < seqs.length; s++) {
        const slen = seqs[s].length;
        const base = offsets[s];
        for (let h = 0; h < nHeads; h++) {
          const hoff = h * hd;
          for (let i = 0; i < slen; i++) {
            const qrow = (base + i) * dModel + hoff;
            const prow = pbase + (h * slen + i) * slen;
            let maxScore = -Infinity;
            for (let j = 0; j <= i; j++) {
              const krow = (base + j) * dModel + hoff;
              let acc = 0;
              for (let t = 0; t < hd; t++) acc += q[qrow + t] * k[krow + t];
              const sc = acc * invSqrtHd;
              probs[prow + j] = sc;
              if (sc > maxScore) maxScore = sc;
            }
            let sum = 0;
            for (let j = 0; j <= i; j++) {
              const e = Math.exp(probs[prow + j] - maxScore);
              probs[prow + j] = e;
              sum += e;
            }
            const crow = (base + i) * dModel + hoff;
            for (let j = 0; j <= i; j++) {
              const p = probs[prow + j] / sum;
              probs[prow + j] = p;
              const vrow = (base + j) * dModel + hoff;
              for (let t = 0; t < hd; t++) ctx[crow + t] += p * v[vrow + t];
            }
          }
        }
        pbase += nHeads * slen * slen;
      }

      const h1 = zeros(n * dModel);
      matmul(ctx, lp.wo.data, h1, n, dModel, dModel);
      for (let i = 0; i < n * dModel; i++) h1[i] += x[i];

      const hn = zeros(n * dModel);
      const rmsFfn = zeros(n);
      this.rmsnorm(h1, lp.normFfn.data, n, hn, rmsFfn);

      const g = zeros(n * dFf);
      const u = zeros(n * dFf);
      matmul(hn, lp.wgate.data, g, n, dModel, dFf);
      matmul(hn, lp.wup.data, u, n, dModel, dFf);
      const sig = zeros(n * dFf);
      const inter = zeros(n * dFf);
      for (let i = 0; i < n * dFf; i++) {
        const sg = 1 / (1 + Math.exp(-g[i]));
        sig[i] = sg;
        inter[i] = g[i] * sg * u[i];
      }

      const out = zeros(n * dModel);
      matmul(inter, lp.wdown.data, out, n, dFf, dModel);
      for (let i = 0; i < n * dModel; i++) out[i] += h1[i];

      caches.push({ x, xn, rmsAttn, q, k, v, probs, ctx, h1, hn, rmsFfn,
                    g, u, sig, inter, out });
      x = out;
    }

    const xnFinal = zeros(n * dModel);
    const rmsFinal = zeros(n);
    this.rmsnorm(x, this.finalNorm.data, n, xnFinal, rmsFinal);
    const logits = zeros(n * vocab);
    matmul(xnFinal, this.lmHead.data, logits, n, dModel, vocab);
    for (let i = 0; i < logits.length; i++) {
      if (!Number.isFinite(logits[i])) throw new Error('non-finite logits');
    }

    return { seqs, offsets, n, layers: caches, xFinal: x, xnFinal, rmsFinal, logits };
  }

  /**
   * Teacher-forced mean NLL over non-initial positions, natural log.
   * With accumulate=true also backpropagates into every parameter's grad.
   */
  loss(cache: ForwardCache, accumulate = false): { nll: number; count: number } {
    const { vocab } = this.cfg;
    const { seqs, offsets, n, logits } = cache;
    let count = 0;
    for (const seq of seqs) count += seq.length - 1;
    if (count === 0) throw new Error('need sequences of length >= 2');

    const dlogits = accumulate ? zeros(n * vocab) : null;
    let nll = 0;
    for (let s = 0; s < seqs.length; s++) {
      for (let pos = 0; pos + 1 < seqs[s].length; pos++) {
        const row = (offsets[s] + pos) * vocab;
        const target = seqs[s][pos + 1];
        let maxv = -Infinity;
        for (let j = 0; j < vocab; j++) if (logits[row + j] > maxv) maxv = logits[row + j];
        let sum = 0;
        for (let j = 0; j < vocab; j++) sum += Math.exp(logits[row + j] - maxv);
        const logZ = maxv + Math.log(sum);
        nll += logZ - logits[row + target];
        if (dlogits) {
          for (let j = 0; j < vocab; j++) {
            dlogits[row + j] = Math.exp(logits[row + j] - logZ) / count;
          }
          dlogits[row + target] -= 1 / count;
        }
      }
    }
    if (dlogits) this.backward(cache, dlogits);
    return { nll, count };
  }

  private backward(cache: ForwardCache, dlogits: Float64Array): void {
    const { dModel, dFf, nHeads, vocab } = this.cfg;
    const hd = dModel / nHeads;
    const { seqs, offsets, n } = cache;
    const invSqrtHd = 1 / Math.sqrt(hd);

    // head
    const dxn = zeros(n * dModel);
    matmulGradA(dlogits, this.lmHead.data, dxn, n, dModel, vocab);
    matmulGradB(cache.xnFinal, dlogits, this.lmHead.grad, n, dModel, vocab);
    let dx = zeros(n * dModel);
    this.rmsnormBackward(cache.xFinal, this.finalNorm.data, cache.rmsFinal,
                         dxn, n, dx, this.finalNorm.grad);

    for (let l = this.layers.length - 1; l >= 0; l--) {
      const lp = this.layers[l];
      const c = cache.layers[l];
      const dh1 = zeros(n * dModel);

      // FFN branch: out = h1 + inter @ wdown
      const dinter = zeros(n * dFf);
      matmulGradA(dx, lp.wdown.data, dinter, n, dFf, dModel);
      matmulGradB(c.inter, dx, lp.wdown.grad, n, dFf, dModel);
      for (let i = 0; i < n * dModel; i++) dh1[i] += dx[i];

      const dg = zeros(n * dFf);
      const du = zeros(n * dFf);
      for (let i = 0; i < n * dFf; i++) {
        const sg = c.sig[i];
        const silu = c.g[i] * sg;
        du[i] = dinter[i] * silu;
        dg[i] = dinter[i] * c.u[i] * (sg + c.g[i] * sg * (1 - sg));
      }
      const dhn = zeros(n * dModel);
      matmulGradA(dg, lp.wgate.data, dhn, n, dModel, dFf);
      matmulGradB(c.hn, dg, lp.wgate.grad, n, dModel, dFf);
      matmulGradA(du, lp.wup.data, dhn, n, dModel, dFf);
      matmulGradB(c.hn, du, lp.wup.grad, n, dModel, dFf);
      this.rmsnormBackward(c.h1, lp.normFfn.data, c.rmsFfn, dhn, n,
                           dh1, lp.normFfn.grad);

      // attention branch: h1 = x + ctx @ wo
      const dctx = zeros(n * dModel);
      matmulGradA(dh1, lp.wo.data, dctx, n, dModel, dModel);
      matmulGradB(c.ctx, dh1, lp.wo.grad, n, dModel, dModel);

      const dq = zeros(n * dModel);
      const dk = zeros(n * dModel);
      const dv = zeros(n * dModel);
      const dp = zeros(Math.max(...seqs.map((q2) => q2.length)));
      let pbase = 0;
      for (let s = 0; s < seqs.length; s++) {
        const slen = seqs[s].length;
        const base = offsets[s];
        for (let h = 0; h < nHeads; h++) {
          const hoff = h * hd;
          for (let i = 0; i < slen; i++) {
            const prow = pbase + (h * slen + i) * slen;
            const crow = (base + i) * dModel + hoff;
            // softmax backward: ds_j = p_j * (dp_j - sum_j' p_j' dp_j')
            let dot = 0;
            for (let j = 0; j <= i; j++) {
              const vrow = (base + j) * dModel + hoff;
              let acc = 0;
              for (let t = 0; t < hd; t++) acc += dctx[crow + t] * c.v[vrow + t];
              dp[j] = acc;
              dot += c.probs[prow + j] * acc;
            }
            const qrow = crow;
            for (let j = 0; j <= i; j++) {
              const p = c.probs[prow + j];
              const ds = p * (dp[j] - dot) * invSqrtHd;
              const krow = (base + j) * dModel + hoff;
              for (let t = 0; t < hd; t++) {
                dq[qrow + t] += ds * c.k[krow + t];
                dk[krow + t] += ds * c.q[qrow + t];
                dv[krow + t] += p * dctx[crow + t];
              }
            }
          }
        }
        pbase += nHeads * slen * slen;
      }

      // inverse rotation transposes the rope
      this.rope(dq, offsets, seqs, -1);
      this.rope(dk, offsets, seqs, -1);

      const dxnA = zeros(n * dModel);
      matmulGradA(dq, lp.wq.data, dxnA, n, dModel, dModel);
      matmulGradB(c.xn, dq, lp.wq.grad, n, dModel, dModel);
      matmulGradA(dk, lp.wk.data, dxnA, n, dModel, dModel);
      matmulGradB(c.xn, dk, lp.wk.grad, n, dModel, dModel);
      matmulGradA(dv, lp.wv.data, dxnA, n, dModel, dModel);
      matmulGradB(c.xn, dv, lp.wv.grad, n, dModel, dModel);

      const dxPrev = zeros(n * dModel);
      for (let i = 0; i < n * dModel; i++) dxPrev[i] += dh1[i];
      this.rmsnormBackward(c.x, lp.normAttn.data, c.rmsAttn, dxnA, n,
                           dxPrev, lp.normAttn.grad);
      dx = dxPrev;
    }

    // embedding rows
    for (let s = 0; s < seqs.length; s++) {
      for (let pos = 0; pos < seqs[s].length; pos++) {
        const row = (offsets[s] + pos) * dModel;
        const erow = seqs[s][pos] * dModel;
        for (let j = 0; j < dModel; j++) this.embedding.grad[erow + j] += dx[row + j];
      }
    }
  }
}
