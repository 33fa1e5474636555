"""Toy decoder-only transformer: pre-RMSNorm attention with rotary position
embeddings and a SwiGLU FFN, byte-level vocabulary.

The forward pass exposes the three capture points the rest of the toolkit
measures: the layer input, the FFN output before the residual add, and the
layer output. All rows are flattened (batch x sequence) token positions.
The exact equations live in docs/forward_math.md, which the companion
trainer implements verbatim; keep the two in sync.

Layers are duck-typed: anything with `norm_attn`, `norm_ffn` and
`apply_projection(name, x)` runs through forward_layer, which is how
quantized layers slot in with zero method-specific branching.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .container import ContainerReader, TensorWriter, read_container, write_container
from .errors import (
    DimensionMismatch,
    HeaderMismatch,
    NonFiniteActivation,
    SequenceTooLong,
    TokenOutOfRange,
)
from .numerics import as_matrix

RMSNORM_EPS = 1e-6

PROJECTION_NAMES = ("w_q", "w_k", "w_v", "w_o", "w_gate", "w_up", "w_down")

# default toy dims: small enough to run in seconds, deep/wide enough for
# per-layer heterogeneity to show up
DEFAULT_DIMS = dict(d_model=64, d_ff=172, n_heads=4, n_layers=8, vocab=256,
                    max_seq=512, rope_base=10000.0)


def _vector(v, name: str) -> np.ndarray:
    out = np.ascontiguousarray(v, dtype=np.float64)
    if out.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D")
    if not np.isfinite(out).all():
        raise ValueError(f"{name} contains non-finite entries")
    return out


@dataclass
class LayerWeights:
    """Full-precision weights of one decoder layer.

    Weight matrices are stored input-dim x output-dim, applied as x @ W.
    Norm gains are finite but not sign-constrained (trained gains may dip
    negative).
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    norm_attn: np.ndarray
    norm_ffn: np.ndarray

    def __post_init__(self):
        for name in PROJECTION_NAMES:
            setattr(self, name, as_matrix(getattr(self, name), name))
        self.norm_attn = _vector(self.norm_attn, "norm_attn")
        self.norm_ffn = _vector(self.norm_ffn, "norm_ffn")
        d = self.w_q.shape[0]
        ff = self.w_gate.shape[1]
        expect = {
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "w_gate": (d, ff), "w_up": (d, ff), "w_down": (ff, d),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionMismatch(f"{name}: expected {shape}, got {got}")
        if self.norm_attn.shape != (d,) or self.norm_ffn.shape != (d,):
            raise DimensionMismatch("norm gain length must equal d_model")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w_gate.shape[1]

    def apply_projection(self, name: str, x: np.ndarray) -> np.ndarray:
        return x @ getattr(self, name)

    def projection(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass
class TransformerModel:
    """L decoder layers plus embedding, final norm and LM head."""

    d_model: int
    d_ff: int
    n_heads: int
    n_layers: int
    vocab: int
    max_seq: int
    rope_base: float
    embedding: np.ndarray
    final_norm: np.ndarray
    lm_head: np.ndarray
    layers: List[LayerWeights] = field(default_factory=list)

    def __post_init__(self):
        if self.n_layers < 1:
            raise DimensionMismatch("n_layers must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise DimensionMismatch("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise DimensionMismatch("head dim must be even for rotary pairs")
        self.embedding = as_matrix(self.embedding, "embedding")
        self.lm_head = as_matrix(self.lm_head, "lm_head")
        self.final_norm = _vector(self.final_norm, "final_norm")
        if self.embedding.shape != (self.vocab, self.d_model):
            raise DimensionMismatch("embedding shape must be (vocab, d_model)")
        if self.lm_head.shape != (self.d_model, self.vocab):
            raise DimensionMismatch("lm_head shape must be (d_model, vocab)")
        if len(self.layers) != self.n_layers:
            raise DimensionMismatch("layer count mismatch")

    def fingerprint(self) -> str:
        """SHA-256 over the float32 tensor payload, matching the on-disk bytes."""
        h = hashlib.sha256()
        for name, arr in iter_model_tensors(self):
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()


@dataclass
class LayerActivations:
    """The three capture points of one layer over n flattened token rows."""

    layer_input: np.ndarray
    ffn_out_preres: np.ndarray
    layer_output: np.ndarray
    ffn_intermediate: Optional[np.ndarray] = None  # (n, d_ff), only when requested

    def at(self, point: str) -> np.ndarray:
        if point == "ffn_pre_res":
            return self.ffn_out_preres
        if point == "layer_output":
            return self.layer_output
        if point == "ffn_intermediate":
            if self.ffn_intermediate is None:
                raise ValueError("ffn_intermediate was not captured")
            return self.ffn_intermediate
        raise ValueError(f"unknown capture point {point!r}")


CKA_POINTS = ("ffn_pre_res", "layer_output", "ffn_intermediate")


def rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMSNORM_EPS)
    return x / rms * gain


def silu(x: np.ndarray) -> np.ndarray:
    out = np.negative(x)
    np.exp(out, out=out)
    out += 1.0
    np.divide(x, out, out=out)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def rope_angles(positions: np.ndarray, head_dim: int, rope_base: float):
    """Per-row (cos, sin) tables of shape (n, head_dim // 2)."""
    half = head_dim // 2
    freqs = rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate adjacent feature pairs (2i, 2i+1) of each head by the row angle."""
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


_MASK_CACHE: dict = {}


def _causal_mask(rows: int, cols: int) -> np.ndarray:
    """Additive mask for query rows [cols-rows, cols) over keys [0, cols):
    -inf wherever the key index exceeds the query's global position."""
    m = _MASK_CACHE.get((rows, cols))
    if m is None:
        q = np.arange(cols - rows, cols)[:, None]
        k = np.arange(cols)[None, :]
        m = np.where(k > q, -np.inf, 0.0)
        _MASK_CACHE[(rows, cols)] = m
    return m


def _softmax_(scores: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """In-place masked softmax over the last axis (scores pre-scaled)."""
    scores += _causal_mask(rows, cols)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


_QUERY_TILES = 4
_TILE_MIN = 64


def _causal_attention(qs: np.ndarray, ks: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Causal attention for one segment, (H, s, hd) operands, q pre-scaled.

    Queries are processed in tiles that only score keys up to the tile's
    last position, skipping most of the masked upper triangle.
    """
    s_len = qs.shape[1]
    n_tiles = _QUERY_TILES if s_len >= _TILE_MIN else 1
    ctx = np.empty_like(qs)
    bounds = [s_len * t // n_tiles for t in range(n_tiles + 1)]
    for r0, r1 in zip(bounds[:-1], bounds[1:]):
        scores = qs[:, r0:r1] @ ks[:, :r1].transpose(0, 2, 1)
        attn = _softmax_(scores, r1 - r0, r1)
        ctx[:, r0:r1] = attn @ vs[:, :r1]
    return ctx


def segment_bounds(positions: np.ndarray) -> list:
    """Sequence segments as (start, end) row ranges.

    A new segment begins wherever the position index fails to increase,
    which covers the standard 0..s-1 per-sequence layout.
    """
    n = positions.shape[0]
    starts = [0]
    for i in range(1, n):
        if positions[i] <= positions[i - 1]:
            starts.append(i)
    starts.append(n)
    return [(starts[i], starts[i + 1]) for i in range(len(starts) - 1)]


def forward_layer(layer, x, positions, *, n_heads: int, rope_base: float,
                  capture_intermediate: bool = False) -> LayerActivations:
    """One decoder layer over flattened token rows.

    positions holds each row's index within its sequence; causal masking is
    applied within each contiguous segment. Quantized layers dequantize on
    the fly through the same code path.
    """
    acts, _ = forward_layer_with_projection_inputs(
        layer, x, positions, n_heads=n_heads, rope_base=rope_base,
        capture_intermediate=capture_intermediate)
    return acts


def forward_layer_with_projection_inputs(layer, x, positions, *, n_heads: int,
                                         rope_base: float,
                                         capture_intermediate: bool = False):
    """forward_layer plus the pre-projection activation of each weight matrix.

    The extra dict maps projection name -> the rows that matrix multiplies
    (before any runtime activation scaling a quantized layer may add); these
    are the calibration inputs quantizer fitting consumes.
    """
    x = as_matrix(x, "layer input")
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (x.shape[0],):
        raise DimensionMismatch("positions length must equal row count")
    d_model = x.shape[1]
    if d_model % n_heads != 0:
        raise DimensionMismatch("d_model must be divisible by n_heads")
    head_dim = d_model // n_heads

    # attention block
    xn = rmsnorm(x, layer.norm_attn)
    q = layer.apply_projection("w_q", xn)
    k = layer.apply_projection("w_k", xn)
    v = layer.apply_projection("w_v", xn)

    cos, sin = rope_angles(positions, head_dim, rope_base)
    n = x.shape[0]
    qh = q.reshape(n, n_heads, head_dim)
    kh = k.reshape(n, n_heads, head_dim)
    vh = v.reshape(n, n_heads, head_dim)
    qh = apply_rope(qh, cos[:, None, :], sin[:, None, :])
    kh = apply_rope(kh, cos[:, None, :], sin[:, None, :])

    qh *= 1.0 / np.sqrt(head_dim)  # fold the attention scale into q once

    # per-segment attention keeps score tensors cache-sized
    ctx = np.empty_like(qh)
    for s, e in segment_bounds(positions):
        qs = np.ascontiguousarray(qh[s:e].transpose(1, 0, 2))   # (H, s, hd)
        ks = np.ascontiguousarray(kh[s:e].transpose(1, 0, 2))
        vs = np.ascontiguousarray(vh[s:e].transpose(1, 0, 2))
        ctx[s:e] = _causal_attention(qs, ks, vs).transpose(1, 0, 2)

    ctx_flat = ctx.reshape(n, d_model)
    attn_out = layer.apply_projection("w_o", ctx_flat)
    h = x + attn_out

    # FFN block (SwiGLU)
    hn = rmsnorm(h, layer.norm_ffn)
    gate = layer.apply_projection("w_gate", hn)
    up = layer.apply_projection("w_up", hn)
    inter = silu(gate)
    inter *= up
    ffn_pre = layer.apply_projection("w_down", inter)
    out = h + ffn_pre

    if not np.isfinite(out).all() or not np.isfinite(ffn_pre).all():
        raise NonFiniteActivation("layer forward produced NaN/Inf")

    acts = LayerActivations(
        layer_input=x,
        ffn_out_preres=ffn_pre,
        layer_output=out,
        ffn_intermediate=inter if capture_intermediate else None,
    )
    proj_inputs = {
        "w_q": xn, "w_k": xn, "w_v": xn,
        "w_o": ctx_flat,
        "w_gate": hn, "w_up": hn,
        "w_down": inter,
    }
    return acts, proj_inputs


def embed_tokens(model, tokens: Sequence[Sequence[int]]):
    """Flatten token sequences into embedding rows plus per-row positions."""
    if len(tokens) == 0:
        raise DimensionMismatch("need at least one token sequence")
    rows = []
    positions = []
    for seq in tokens:
        ids = np.asarray(seq, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise DimensionMismatch("each sequence must be a non-empty 1-D id list")
        if ids.min() < 0 or ids.max() >= model.vocab:
            raise TokenOutOfRange(f"token id outside [0, {model.vocab})")
        if ids.size > model.max_seq:
            raise SequenceTooLong(f"sequence length {ids.size} > max_seq {model.max_seq}")
        rows.append(model.embedding[ids])
        positions.append(np.arange(ids.size, dtype=np.int64))
    return np.concatenate(rows, axis=0), np.concatenate(positions)


def forward_model(model, tokens, *, capture: bool = True,
                  capture_intermediate: bool = False):
    """Full forward pass: returns (logits, per-layer activations list).

    The activations list is empty when capture=False (saves memory on pure
    perplexity runs). Works on TransformerModel and HybridModel alike.
    """
    x, positions = embed_tokens(model, tokens)
    acts: List[LayerActivations] = []
    for layer in model.layers:
        la = forward_layer(layer, x, positions, n_heads=model.n_heads,
                           rope_base=model.rope_base,
                           capture_intermediate=capture_intermediate)
        if capture:
            acts.append(la)
        x = la.layer_output
    logits = rmsnorm(x, model.final_norm) @ model.lm_head
    if not np.isfinite(logits).all():
        raise NonFiniteActivation("logits contain NaN/Inf")
    return logits, acts


# --- serialization -------------------------------------------------------------

def iter_model_tensors(model: TransformerModel):
    """(name, array) pairs in canonical on-disk order."""
    yield "embedding", model.embedding
    yield "final_norm", model.final_norm
    yield "lm_head", model.lm_head
    for i, layer in enumerate(model.layers):
        for name in PROJECTION_NAMES:
            yield f"layers.{i}.{name}", getattr(layer, name)
        yield f"layers.{i}.norm_attn", layer.norm_attn
        yield f"layers.{i}.norm_ffn", layer.norm_ffn


def model_dims_header(model) -> dict:
    return {
        "d_model": model.d_model, "d_ff": model.d_ff, "n_heads": model.n_heads,
        "n_layers": model.n_layers, "vocab": model.vocab, "max_seq": model.max_seq,
        "rope_base": model.rope_base,
    }


def save_model(model: TransformerModel, path):
    """Write the HQTM file; float32 payload, CRC-protected."""
    writer = TensorWriter()
    for name, arr in iter_model_tensors(model):
        writer.add_f32(name, arr)
    write_container(path, {"format": "HQTM", "dims": model_dims_header(model)}, writer)


def load_model(path) -> TransformerModel:
    """Read an HQTM file back into float64 working precision."""
    reader = read_container(path, "HQTM")
    return model_from_reader(reader)


def model_from_reader(reader: ContainerReader) -> TransformerModel:
    dims = reader.header.get("dims", {})
    required = ("d_model", "d_ff", "n_heads", "n_layers", "vocab", "max_seq", "rope_base")
    if any(k not in dims for k in required):
        raise HeaderMismatch("dims header incomplete")
    try:
        layers = []
        for i in range(dims["n_layers"]):
            p = f"layers.{i}."
            layers.append(LayerWeights(
                **{name: reader.f32(p + name) for name in PROJECTION_NAMES},
                norm_attn=reader.f32(p + "norm_attn"),
                norm_ffn=reader.f32(p + "norm_ffn"),
            ))
        return TransformerModel(
            d_model=dims["d_model"], d_ff=dims["d_ff"], n_heads=dims["n_heads"],
            n_layers=dims["n_layers"], vocab=dims["vocab"], max_seq=dims["max_seq"],
            rope_base=float(dims["rope_base"]),
            embedding=reader.f32("embedding"),
            final_norm=reader.f32("final_norm"),
            lm_head=reader.f32("lm_head"),
            layers=layers,
        )
    except (DimensionMismatch, ValueError) as e:
        raise HeaderMismatch(f"model tensors inconsistent with header: {e}") from e


def random_model(seed: int, d_model: int = 64, d_ff: int = 172, n_heads: int = 4,
                 n_layers: int = 8, vocab: int = 256, max_seq: int = 512,
                 rope_base: float = 10000.0) -> TransformerModel:
    """Seeded Gaussian init: weight std 1/sqrt(fan_in), unit norm gains.

    Keeps activations O(1) through depth and logits at O(1) scale, which is
    what the statistical test harnesses assume.
    """
    rng = np.random.default_rng(seed)

    def f32(a):
        # keep generated values float32-representable so HQTM serialization
        # (float32 payload) is lossless for in-memory models too
        return a.astype(np.float32).astype(np.float64)

    def w(fan_in, fan_out):
        return f32(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))

    layers = []
    for _ in range(n_layers):
        layers.append(LayerWeights(
            w_q=w(d_model, d_model), w_k=w(d_model, d_model),
            w_v=w(d_model, d_model), w_o=w(d_model, d_model),
            w_gate=w(d_model, d_ff), w_up=w(d_model, d_ff), w_down=w(d_ff, d_model),
            norm_attn=np.ones(d_model), norm_ffn=np.ones(d_model),
        ))
    return TransformerModel(
        d_model=d_model, d_ff=d_ff, n_heads=n_heads, n_layers=n_layers,
        vocab=vocab, max_seq=max_seq, rope_base=rope_base,
        embedding=f32(rng.normal(0.0, 1.0, size=(vocab, d_model))),
        final_norm=np.ones(d_model),
        lm_head=w(d_model, vocab),
        layers=layers,
    )
