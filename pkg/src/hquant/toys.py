"""Desk-scale experiment models: the seeded toy families the statistical
harnesses run on.

Two families:

varied_model
    Random init where consecutive layers cycle through weight-statistic
    styles (compact Gaussian, heavy-tailed, hot input channels). Layers of
    different character respond differently to the quantization methods,
    which is what layer-wise selection needs to have anything to select.

predictive_model
    A transformer that is analytically near-optimal for a low-rank Markov
    chain: the chain's next-token logits are an exact rank-r factorization
    G @ H, the embedding carries G (unit-RMS rows, so the final RMSNorm is a
    clean passthrough), the LM head carries H, and the decoder layers apply
    moderate seeded transformations on top. Its perplexity sits far below
    the uniform baseline, so quantization damage degrades it the way it
    degrades a trained checkpoint - without needing a training loop. Builds
    are rejection-sampled (deterministically) until a probe perplexity
    confirms the structure survived the random layers.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .evalsuite import CalibrationSet, perplexity
from .model import LayerWeights, TransformerModel

__all__ = [
    "varied_model",
    "low_rank_chain",
    "sample_chain",
    "chain_calibration_pair",
    "predictive_model",
]


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _styled_weight(rng, fan_in: int, fan_out: int, style: int, scale: float) -> np.ndarray:
    std = scale / np.sqrt(fan_in)
    if style == 1:
        # heavy tails: Student-t(3) normalized to the same variance
        a = rng.standard_t(3, size=(fan_in, fan_out)) * std / np.sqrt(3.0)
    elif style == 2:
        # a few hot input channels
        a = rng.normal(0.0, std, size=(fan_in, fan_out))
        hot = rng.choice(fan_in, size=max(1, fan_in // 16), replace=False)
        a[hot] *= 6.0
    else:
        a = rng.normal(0.0, std, size=(fan_in, fan_out))
    return _f32(a)


def _styled_layers(rng, n_layers, d_model, d_ff, scale):
    layers = []
    for l in range(n_layers):
        style = l % 3
        w = lambda fi, fo: _styled_weight(rng, fi, fo, style, scale)  # noqa: E731
        layers.append(LayerWeights(
            w_q=w(d_model, d_model), w_k=w(d_model, d_model),
            w_v=w(d_model, d_model), w_o=w(d_model, d_model),
            w_gate=w(d_model, d_ff), w_up=w(d_model, d_ff),
            w_down=w(d_ff, d_model),
            norm_attn=np.ones(d_model), norm_ffn=np.ones(d_model),
        ))
    return layers


def varied_model(seed: int, d_model: int = 24, d_ff: int = 64, n_heads: int = 3,
                 n_layers: int = 8, vocab: int = 256, max_seq: int = 256,
                 layer_scale: float = 1.0) -> TransformerModel:
    """Random-init toy with per-layer weight-statistic variety."""
    rng = np.random.default_rng(seed)
    layers = _styled_layers(rng, n_layers, d_model, d_ff, layer_scale)
    emb = rng.normal(0.0, 1.0, size=(vocab, d_model))
    hot = rng.choice(d_model, size=max(1, d_model // 8), replace=False)
    emb[:, hot] *= 6.0
    return TransformerModel(
        d_model=d_model, d_ff=d_ff, n_heads=n_heads, n_layers=n_layers,
        vocab=vocab, max_seq=max_seq, rope_base=1e4,
        embedding=_f32(emb), final_norm=np.ones(d_model),
        lm_head=_f32(rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(d_model, vocab))),
        layers=layers,
    )


def low_rank_chain(vocab: int, rank: int, seed: int, sharpness: float = 4.0):
    """Markov chain whose next-token logits are exactly rank-`rank`.

    Returns (transition matrix, G, H) with logits = G @ H, G rows unit-RMS.
    """
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(vocab, rank))
    g /= np.sqrt((g ** 2).mean(axis=1, keepdims=True))
    h = rng.normal(size=(rank, vocab)) * sharpness / np.sqrt(rank)
    logits = g @ h
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p, g, h


def sample_chain(trans: np.ndarray, n_sequences: int, seq_len: int, seed: int,
                 region: str = "full") -> CalibrationSet:
    """Seeded token sequences from a transition matrix."""
    cdf = np.cumsum(trans, axis=1)
    rng = np.random.default_rng(seed)
    vocab = trans.shape[0]
    seqs = []
    for _ in range(n_sequences):
        out = np.empty(seq_len, dtype=np.int64)
        state = int(rng.integers(0, vocab))
        for t in range(seq_len):
            out[t] = state
            state = min(int(np.searchsorted(cdf[state], rng.random())), vocab - 1)
        seqs.append(out)
    return CalibrationSet(sequences=seqs, source="synthetic-chain", seed=seed,
                          n_sequences=n_sequences, seq_len=seq_len, region=region)


def chain_calibration_pair(trans: np.ndarray, n_calib: int, n_eval: int,
                           calib_len: int, eval_len: int, seed: int):
    """Disjointly seeded calibration and eval sets from one chain."""
    calib = sample_chain(trans, n_calib, calib_len, seed, region="calib")
    ev = sample_chain(trans, n_eval, eval_len, seed + 7919, region="eval")
    return calib, ev


def predictive_model(seed: int, vocab: int = 256, d_model: int = 24, d_ff: int = 64,
                     n_heads: int = 3, n_layers: int = 8, rank: int = 16,
                     sharpness: float = 4.0, layer_scale: float = 0.6,
                     max_probe_ppl: float = 150.0) -> Tuple[TransformerModel, np.ndarray]:
    """Analytically predictive toy plus the chain it predicts.

    Occasional layer draws amplify enough to bury the embedded structure;
    those builds are rejected (seed offset by 1000) until a 4-sequence probe
    perplexity clears max_probe_ppl. Fully deterministic per seed.
    """
    if rank > d_model:
        raise ValueError("rank must not exceed d_model")
    chain_seed = seed + 5000
    trans, g, h = low_rank_chain(vocab, rank, chain_seed, sharpness)
    emb = np.zeros((vocab, d_model))
    emb[:, :rank] = g
    head = np.zeros((d_model, vocab))
    head[:rank, :] = h

    model = None
    for attempt in range(8):
        rng = np.random.default_rng(seed + 1000 * attempt)
        layers = _styled_layers(rng, n_layers, d_model, d_ff, layer_scale)
        model = TransformerModel(
            d_model=d_model, d_ff=d_ff, n_heads=n_heads, n_layers=n_layers,
            vocab=vocab, max_seq=256, rope_base=1e4,
            embedding=_f32(emb), final_norm=np.ones(d_model),
            lm_head=_f32(head), layers=layers,
        )
        probe = sample_chain(trans, 4, 64, seed + 77)
        if perplexity(model, probe).ppl <= max_probe_ppl:
            break
    return model, trans
