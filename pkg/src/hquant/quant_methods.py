"""The candidate pool: four PTQ methods behind one uniform interface.

Every method consumes (LayerWeights, LayerCalibration, MethodConfig) and
yields a QuantizedLayer that forward_layer can run directly, so the selector
never branches on method identity. Calibration activations come from the
quantized stream of the greedy pass; quantizers fit full-precision weights
against those activations.

Methods:
  rtn          round-to-nearest per projection, the baseline and ablation
               control (excluded from the default pool).
  gptq         sequential input-dim quantization with Hessian-driven error
               compensation onto not-yet-quantized rows.
  awq          activation-magnitude channel scaling with a grid-searched
               exponent, picked by quantized-layer output MSE.
  smoothquant  fixed-exponent scale migration between activations and
               weights; pairs with per-tensor activation fake-quant when
               act_bits is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateActivations,
    DegenerateWeights,
    DimensionMismatch,
    HessianNotPD,
)
from .model import (
    PROJECTION_NAMES,
    LayerWeights,
    forward_layer,
    forward_layer_with_projection_inputs,
)
from .numerics import DAMPING_GROWTH, DAMPING_RETRIES, as_matrix
from .quant_codec import (
    GroupQuantTensor,
    QuantConfig,
    dequantize,
    encode,
    group_params,
    quantize_activations,
    quantize_rtn,
)

METHOD_KINDS = ("rtn", "gptq", "awq", "smoothquant")
DEFAULT_POOL_KINDS = ("gptq", "awq", "smoothquant")

_AWQ_DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(21))  # 0.0 .. 1.0
_SCALE_CLAMP = (1e-4, 1e4)


@dataclass(frozen=True)
class MethodConfig:
    """One pool entry: method kind plus its hyperparameters."""

    kind: str
    qcfg: QuantConfig = field(default_factory=QuantConfig)
    gptq_damping: float = 0.01
    awq_alpha_grid: Tuple[float, ...] = _AWQ_DEFAULT_GRID
    sq_alpha: float = 0.5
    name: Optional[str] = None  # report label override (mixed-bit variants)

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}")
        if not 0.0 <= self.sq_alpha <= 1.0:
            raise ValueError("sq_alpha must be in [0, 1]")
        if len(self.awq_alpha_grid) == 0 or any(not 0.0 <= a <= 1.0 for a in self.awq_alpha_grid):
            raise ValueError("awq_alpha_grid must be non-empty with values in [0, 1]")

    @property
    def label(self) -> str:
        return self.name if self.name is not None else self.kind


@dataclass
class QuantizedLayer:
    """One decoder layer after quantization, runnable by forward_layer.

    projections hold the integer tensors; dense_overrides (restoration or
    rounding-disabled reparameterization) take precedence over them at
    matmul time. act_scales are per-input-channel multipliers applied to the
    projection input at runtime; act_bits triggers per-tensor activation
    fake-quant after that scaling.
    """

    method_tag: str
    projections: Dict[str, GroupQuantTensor]
    norm_attn: np.ndarray
    norm_ffn: np.ndarray
    act_scales: Dict[str, np.ndarray] = field(default_factory=dict)
    dense_overrides: Dict[str, np.ndarray] = field(default_factory=dict)
    act_bits: Optional[int] = None
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for name, s in self.act_scales.items():
            if (np.asarray(s) <= 0).any():
                raise ValueError(f"act_scales[{name}] must be strictly positive")
        self._dense_cache: Dict[str, np.ndarray] = {}

    def effective_matrix(self, name: str) -> np.ndarray:
        if name in self.dense_overrides:
            return self.dense_overrides[name]
        if name not in self._dense_cache:
            self._dense_cache[name] = dequantize(self.projections[name])
        return self._dense_cache[name]

    def set_dense_override(self, name: str, matrix: np.ndarray):
        self.dense_overrides[name] = as_matrix(matrix, name)
        self._dense_cache.pop(name, None)

    def apply_projection(self, name: str, x: np.ndarray) -> np.ndarray:
        s = self.act_scales.get(name)
        if s is not None:
            x = x * s
        if self.act_bits is not None:
            x = quantize_activations(x, self.act_bits)
        return x @ self.effective_matrix(name)


@dataclass
class LayerCalibration:
    """Calibration bundle for one layer, captured on the quantized stream.

    x is the layer input H_in; proj_inputs are the pre-projection
    activations of the FP layer run on x; fp_output is that run's layer
    output (the target for MSE-driven hyperparameter searches).
    """

    x: np.ndarray
    positions: np.ndarray
    n_heads: int
    rope_base: float
    proj_inputs: Dict[str, np.ndarray]
    fp_output: np.ndarray


def capture_layer_calibration(layer: LayerWeights, x, positions, *, n_heads: int,
                              rope_base: float) -> LayerCalibration:
    """Run the FP layer on the quantized-stream input, keeping what fitting needs."""
    acts, proj_inputs = forward_layer_with_projection_inputs(
        layer, x, positions, n_heads=n_heads, rope_base=rope_base)
    return LayerCalibration(
        x=acts.layer_input, positions=np.asarray(positions, dtype=np.int64),
        n_heads=n_heads, rope_base=rope_base,
        proj_inputs=proj_inputs, fp_output=acts.layer_output,
    )


def apply_method(layer: LayerWeights, calib: LayerCalibration,
                 mcfg: MethodConfig) -> QuantizedLayer:
    """Dispatch to the configured method; the only switch in the toolkit."""
    if mcfg.kind == "rtn":
        return apply_rtn(layer, calib, mcfg)
    if mcfg.kind == "gptq":
        return apply_gptq(layer, calib, mcfg)
    if mcfg.kind == "awq":
        return apply_awq(layer, calib, mcfg)
    if mcfg.kind == "smoothquant":
        return apply_smoothquant(layer, calib, mcfg)
    raise ValueError(f"unknown method kind {mcfg.kind!r}")


def _base_layer(layer: LayerWeights, mcfg: MethodConfig, tag: str) -> QuantizedLayer:
    return QuantizedLayer(
        method_tag=tag, projections={},
        norm_attn=layer.norm_attn.copy(), norm_ffn=layer.norm_ffn.copy(),
        act_bits=mcfg.qcfg.act_bits,
    )


# --- RTN ------------------------------------------------------------------------

def apply_rtn(layer: LayerWeights, calib: LayerCalibration,
              mcfg: MethodConfig) -> QuantizedLayer:
    """Each projection independently round-to-nearest quantized; no scaling."""
    out = _base_layer(layer, mcfg, mcfg.label)
    for name in PROJECTION_NAMES:
        out.projections[name] = quantize_rtn(layer.projection(name), mcfg.qcfg)
    return out


# --- GPTQ -----------------------------------------------------------------------

def gptq_quantize_matrix(w, x, cfg: QuantConfig, damping: float = 0.01) -> GroupQuantTensor:
    """Sequential row quantization with Hessian error compensation.

    w is input-dim x output-dim, x is the calibration activation (n rows x
    input-dim). Rows are quantized in natural index order; after each row the
    induced output error is distributed onto not-yet-quantized rows via the
    upper Cholesky factor of (X^T X + damping*mean(diag)*I)^-1. Group scales
    are found when entering each group, from the current updated weights.
    """
    w = as_matrix(w, "w").copy()
    x = as_matrix(x, "x")
    in_dim, out_dim = w.shape
    if x.shape[1] != in_dim:
        raise DimensionMismatch(f"gptq: x cols {x.shape[1]} != w rows {in_dim}")

    h = x.T @ x
    # input dims with no calibration signal carry no information; pin the
    # diagonal and zero the corresponding weights
    dead = np.diag(h) == 0
    if dead.any():
        h[dead, dead] = 1.0
        w[dead, :] = 0.0

    mean_diag = float(np.mean(np.diag(h)))
    lam = damping * max(mean_diag, 1e-12)
    u = None
    for attempt in range(DAMPING_RETRIES + 1):
        try:
            hd = h + lam * np.eye(in_dim)
            cho = scipy.linalg.cho_factor(hd, lower=True, check_finite=False)
            hinv = scipy.linalg.cho_solve(cho, np.eye(in_dim), check_finite=False)
            u = scipy.linalg.cholesky(hinv, lower=False, check_finite=False)
            break
        except scipy.linalg.LinAlgError:
            lam *= DAMPING_GROWTH
    if u is None:
        raise HessianNotPD(f"gptq Hessian not PD after retries (lam={lam:.3e})")

    g = min(cfg.group_size, in_dim)
    n_groups = (in_dim + g - 1) // g
    codes = np.zeros((in_dim, out_dim), dtype=np.int16)
    scales = np.zeros((n_groups, out_dim), dtype=np.float64)
    zps = np.zeros((n_groups, out_dim), dtype=np.float64)

    sc = zp = None
    for i in range(in_dim):
        gi, rem = divmod(i, g)
        if rem == 0:
            sc, zp = group_params(w[i:min(i + g, in_dim)], cfg)
            scales[gi] = sc
            zps[gi] = zp
        row_codes = encode(w[i:i + 1], sc, zp, cfg)
        codes[i] = row_codes[0]
        deq = (row_codes[0].astype(np.float64) + zp) * sc
        err = (w[i] - deq) / u[i, i]
        if i + 1 < in_dim:
            w[i + 1:] -= np.outer(u[i, i + 1:], err)

    return GroupQuantTensor(
        codes=codes, scales=scales, zero_points=zps,
        bits=cfg.bits, group_size=g, symmetric=cfg.symmetric,
        orig_rows=in_dim, orig_cols=out_dim,
    )


def apply_gptq(layer: LayerWeights, calib: LayerCalibration,
               mcfg: MethodConfig) -> QuantizedLayer:
    """GPTQ per projection, Hessians built from that projection's activations."""
    out = _base_layer(layer, mcfg, mcfg.label)
    for name in PROJECTION_NAMES:
        out.projections[name] = gptq_quantize_matrix(
            layer.projection(name), calib.proj_inputs[name], mcfg.qcfg,
            damping=mcfg.gptq_damping)
    return out


# --- scaling helpers (AWQ / SmoothQuant) ----------------------------------------

def _scaled_layer(layer: LayerWeights, scales: Dict[str, np.ndarray],
                  mcfg: MethodConfig, tag: str, skip_rounding: bool) -> QuantizedLayer:
    """Quantize diag(s) @ W per projection, stash 1/s for runtime inputs."""
    out = _base_layer(layer, mcfg, tag)
    for name in PROJECTION_NAMES:
        s = scales[name]
        scaled = layer.projection(name) * s[:, None]
        if skip_rounding:
            out.set_dense_override(name, scaled)
        else:
            out.projections[name] = quantize_rtn(scaled, mcfg.qcfg)
        out.act_scales[name] = 1.0 / s
    return out


def _forward_mse(ql: QuantizedLayer, calib: LayerCalibration):
    acts = forward_layer(ql, calib.x, calib.positions,
                         n_heads=calib.n_heads, rope_base=calib.rope_base)
    diff = acts.layer_output - calib.fp_output
    return float(np.mean(diff * diff)), acts


# --- AWQ ------------------------------------------------------------------------

def awq_channel_scales(x: np.ndarray, alpha: float) -> np.ndarray:
    """s_j = (a_j / geomean(a))^alpha with a_j = mean |x_:,j|, clamped."""
    a = np.mean(np.abs(x), axis=0)
    if (a <= 1e-12).all():
        raise DegenerateActivations("awq: all channel activation magnitudes ~ 0")
    a = np.clip(a, 1e-12, None)
    gm = np.exp(np.mean(np.log(a)))
    s = (a / gm) ** alpha
    return np.clip(s, *_SCALE_CLAMP)


def apply_awq(layer: LayerWeights, calib: LayerCalibration, mcfg: MethodConfig,
              *, skip_rounding: bool = False) -> QuantizedLayer:
    """Grid-search the scaling exponent, pick by quantized-layer output MSE.

    One exponent is shared by all projections of the layer; alpha = 0 is the
    RTN baseline, so the selected candidate never does worse than RTN on the
    calibration inputs.
    """
    best: Optional[QuantizedLayer] = None
    best_mse = np.inf
    best_alpha = None
    best_acts = None
    for alpha in mcfg.awq_alpha_grid:
        scales = {name: awq_channel_scales(calib.proj_inputs[name], alpha)
                  for name in PROJECTION_NAMES}
        cand = _scaled_layer(layer, scales, mcfg, mcfg.label, skip_rounding)
        mse, acts = _forward_mse(cand, calib)
        if mse < best_mse:
            best, best_mse, best_alpha, best_acts = cand, mse, alpha, acts
    best.meta["awq_alpha"] = best_alpha
    best.meta["calib_mse"] = best_mse
    # the winner was already forwarded on this exact calibration input;
    # selection may reuse it instead of recomputing
    best.meta["calib_acts"] = best_acts
    return best


# --- SmoothQuant ----------------------------------------------------------------

def smoothquant_scales(x: np.ndarray, w: np.ndarray, alpha: float) -> np.ndarray:
    """s_j = max|x_:,j|^alpha / max|w_j,:|^(1-alpha), clamped per channel."""
    amax = np.abs(x).max(axis=0)
    wmax = np.abs(w).max(axis=1)
    if (amax <= 0).all():
        raise DegenerateActivations("smoothquant: activations are all zero")
    if (wmax <= 0).all():
        raise DegenerateWeights("smoothquant: weights are all zero")
    amax = np.clip(amax, 1e-12, None)
    wmax = np.clip(wmax, 1e-12, None)
    s = amax ** alpha / wmax ** (1.0 - alpha)
    return np.clip(s, *_SCALE_CLAMP)


def apply_smoothquant(layer: LayerWeights, calib: LayerCalibration,
                      mcfg: MethodConfig, *, skip_rounding: bool = False) -> QuantizedLayer:
    """Fixed-alpha scale migration from activations onto weights, then RTN."""
    scales = {}
    for name in PROJECTION_NAMES:
        scales[name] = smoothquant_scales(
            calib.proj_inputs[name], layer.projection(name), mcfg.sq_alpha)
    out = _scaled_layer(layer, scales, mcfg, mcfg.label, skip_rounding)
    out.meta["sq_alpha"] = mcfg.sq_alpha
    return out


def from_dense(layer: LayerWeights, tag: str = "fp") -> QuantizedLayer:
    """Wrap FP weights as a QuantizedLayer (identity codec); test/diagnostic aid."""
    out = QuantizedLayer(
        method_tag=tag, projections={},
        norm_attn=layer.norm_attn.copy(), norm_ffn=layer.norm_ffn.copy(),
    )
    for name in PROJECTION_NAMES:
        out.set_dense_override(name, layer.projection(name).copy())
    return out
