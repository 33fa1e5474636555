/**
 * Train the toy byte-level transformer on the bundled corpus and export the
 * artifacts the quantization toolkit consumes: trained.hqtm (float32 HQTM
 * container), train.tok / eval.tok (little-endian u32 token streams),
 * probe_logits.json (the cross-component parity fixture) and metrics.json.
 *
 * The probe logits are computed AFTER rounding every parameter through
 * float32, i.e. on exactly the values the container stores, so the Python
 * side reproduces them up to accumulation-order noise.
 */

import { mkdirSync, writeFileSync } from 'node:fs';
import { dirname, join } from 'node:path';
import { fileURLToPath } from 'node:url';

import { Adam } from './adam.js';
import { loadCorpus, sampleBatch, sequentialWindows } from './data.js';
import { writeModel, writeTokenFile } from './hqtm.js';
import { Model, ModelConfig } from './model.js';
import { Rng } from './rng.js';
import { roundF32 } from './tensor.js';

export interface TrainSpec {
  corpus: string;
  steps: number;
  batch: number;
  seqLen: number;
  lr: number;
  seed: number;
  outDir: string;
  model: ModelConfig;
}

const HERE = dirname(fileURLToPath(import.meta.url));

export function defaultSpec(): TrainSpec {
  return {
    corpus: join(HERE, '..', 'corpus', 'corpus.txt'),
    steps: 1400,
    batch: 8,
    seqLen: 64,
    lr: 3e-3,
    seed: 0,
    outDir: join(HERE, '..', 'out'),
    model: {
      dModel: 64, dFf: 172, nHeads: 4, nLayers: 8,
      vocab: 256, maxSeq: 512, ropeBase: 10000.0,
    },
  };
}

export function heldoutPerplexity(model: Model, windows: number[][]): number {
  let nll = 0;
  let count = 0;
  for (const seq of windows) {
    const cache = model.forward([seq]);
    const r = model.loss(cache, false);
    nll += r.nll;
    count += r.count;
  }
  return Math.exp(nll / count);
}

export interface TrainResult {
  model: Model;
  finalLoss: number;
  heldoutPpl: number;
  probe: { tokens: number[][]; logits: number[][] };
}

export function trainAndExport(spec: TrainSpec,
                               log: (msg: string) => void = console.log): TrainResult {
  const corpus = loadCorpus(spec.corpus);
  const model = Model.init(spec.model, spec.seed);
  const opt = new Adam(model.params(), spec.lr);
  const rng = new Rng(spec.seed + 1);

  let lastLoss = Number.NaN;
  for (let step = 0; step < spec.steps; step++) {
    // cosine decay to 10% over the run
    const progress = step / Math.max(1, spec.steps - 1);
    opt.setLr(spec.lr * (0.1 + 0.9 * 0.5 * (1 + Math.cos(Math.PI * progress))));

    const batch = sampleBatch(corpus.train, rng, spec.batch, spec.seqLen);
    model.zeroGrads();
    const cache = model.forward(batch);
    const { nll, count } = model.loss(cache, true);
    lastLoss = nll / count;
    if (!Number.isFinite(lastLoss)) {
      throw new Error(`training diverged at step ${step} (loss ${lastLoss})`);
    }
    opt.step();
    if (step % 50 === 0 || step === spec.steps - 1) {
      log(`step ${step}/${spec.steps} loss ${lastLoss.toFixed(4)} ` +
          `ppl ${Math.exp(lastLoss).toFixed(2)}`);
    }
  }

  // snap to the exported float32 values before every exported measurement
  for (const p of model.params()) roundF32(p.data);

  const evalWindows = sequentialWindows(corpus.heldout, 128, 64);
  const heldoutPpl = heldoutPerplexity(model, evalWindows);
  log(`held-out ppl (f32 weights): ${heldoutPpl.toFixed(3)}`);

  // probe: two fixed windows from the held-out region
  const probeTokens = sequentialWindows(corpus.heldout, 16, 2);
  const probeCache = model.forward(probeTokens);
  const logits: number[][] = [];
  const vocab = spec.model.vocab;
  for (let row = 0; row < probeCache.n; row++) {
    logits.push(Array.from(probeCache.logits.subarray(row * vocab, (row + 1) * vocab)));
  }

  mkdirSync(spec.outDir, { recursive: true });
  writeModel(model, join(spec.outDir, 'trained.hqtm'));
  writeTokenFile(corpus.train, join(spec.outDir, 'train.tok'));
  writeTokenFile(corpus.heldout, join(spec.outDir, 'eval.tok'));
  writeFileSync(join(spec.outDir, 'probe_logits.json'),
                JSON.stringify({ tokens: probeTokens, logits }, null, 1));
  writeFileSync(join(spec.outDir, 'metrics.json'), JSON.stringify({
    steps: spec.steps, batch: spec.batch, seq_len: spec.seqLen, lr: spec.lr,
    seed: spec.seed, final_train_loss: lastLoss, heldout_ppl: heldoutPpl,
    corpus_bytes: corpus.train.length + corpus.heldout.length,
    model: spec.model,
  }, null, 2));
  log(`wrote trained.hqtm, train.tok, eval.tok, probe_logits.json, metrics.json ` +
      `-> ${spec.outDir}`);

  return { model, finalLoss: lastLoss, heldoutPpl,
           probe: { tokens: probeTokens, logits } };
}

function parseArgs(argv: string[]): TrainSpec {
  const spec = defaultSpec();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    const val = argv[i + 1];
    switch (key) {
      case '--steps': spec.steps = Number(val); break;
      case '--batch': spec.batch = Number(val); break;
      case '--seq': spec.seqLen = Number(val); break;
      case '--lr': spec.lr = Number(val); break;
      case '--seed': spec.seed = Number(val); break;
      case '--corpus': spec.corpus = val; break;
      case '--out-dir': spec.outDir = val; break;
      case '--layers': spec.model.nLayers = Number(val); break;
      case '--dim': spec.model.dModel = Number(val); break;
      case '--ffdim': spec.model.dFf = Number(val); break;
      case '--heads': spec.model.nHeads = Number(val); break;
      default: throw new Error(`unknown flag ${key}`);
    }
  }
  return spec;
}

const isMain = process.argv[1] && fileURLToPath(import.meta.url) === process.argv[1];
if (isMain) {
  try {
    trainAndExport(parseArgs(process.argv.slice(2)));
  } catch (err) {
    console.error(err instanceof Error ? err.message : err);
    process.exit(1);
  }
}
