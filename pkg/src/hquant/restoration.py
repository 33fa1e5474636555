"""Linear restoration of the worst-quantized layer.

Finds the layer with the lowest CKA between a quantized model's stream and
the FP reference, fits a least-squares matrix M aligning the quantized
activations to the FP ones at the capture point, and absorbs M into the
down-projection (the producer of that activation). Absorption breaks the
integer representation: the layer thereafter runs a dense float matrix,
optionally re-quantized with RTN to measure the fidelity cost of staying on
the integer grid.

The fit split carries the hard guarantee (the fitted residual can never
exceed the uncorrected one, since M = I is feasible); held-out CKA and
perplexity deltas are measured and reported, not asserted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .cka import CkaScore, linear_cka
from .errors import ConfigError, DimensionMismatch
from .model import forward_layer, embed_tokens
from .numerics import least_squares
from .quant_codec import QuantConfig, quantize_rtn
from .selector import HybridModel, SelectionSettings


@dataclass
class RestorationResult:
    """Outcome of fitting and absorbing the restoration matrix at one layer."""

    layer: int
    cka_before: CkaScore          # held-out split, pre-absorption
    cka_after: CkaScore           # held-out split, post-absorption
    residual_before: float        # fit split, ||X_fp - X_q||_F
    residual_after: float         # fit split, ||X_fp - X_q M||_F
    m_matrix_norm: float
    rank_deficient: bool
    requantized: bool = False
    requantize_residual: Optional[float] = None
    ppl_before: Optional[float] = None
    ppl_after: Optional[float] = None
    fit_rows: int = 0
    holdout_rows: int = 0
    cka_before_fit: Optional[float] = None
    cka_after_fit: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "cka_before": self.cka_before.value,
            "cka_after": self.cka_after.value,
            "cka_before_fit": self.cka_before_fit,
            "cka_after_fit": self.cka_after_fit,
            "residual_before": self.residual_before,
            "residual_after": self.residual_after,
            "m_matrix_norm": self.m_matrix_norm,
            "rank_deficient": self.rank_deficient,
            "requantized": self.requantized,
            "requantize_residual": self.requantize_residual,
            "ppl_before": self.ppl_before,
            "ppl_after": self.ppl_after,
            "fit_rows": self.fit_rows,
            "holdout_rows": self.holdout_rows,
        }


def _stream_measures(model, tokens, point: str) -> List[np.ndarray]:
    """Capture-point activations per layer, advancing the model's own stream."""
    x, positions = embed_tokens(model, tokens)
    out = []
    capture_inter = point == "ffn_intermediate"
    for layer in model.layers:
        acts = forward_layer(layer, x, positions, n_heads=model.n_heads,
                             rope_base=model.rope_base,
                             capture_intermediate=capture_inter)
        out.append(acts.at(point))
        x = acts.layer_output
    return out


def per_layer_cka(quant_model, fp_model, tokens,
                  settings: Optional[SelectionSettings] = None) -> List[CkaScore]:
    """Evaluation-regime CKA: each model runs its own stream end to end."""
    settings = settings or SelectionSettings()
    if len(quant_model.layers) != len(fp_model.layers):
        raise DimensionMismatch("models disagree on layer count")
    fp_meas = _stream_measures(fp_model, tokens, settings.cka_point)
    q_meas = _stream_measures(quant_model, tokens, settings.cka_point)
    return [linear_cka(f, q) for f, q in zip(fp_meas, q_meas)]


def find_worst_layer(quant_model, fp_model, tokens,
                     settings: Optional[SelectionSettings] = None) -> int:
    """Index of the layer with the lowest evaluation-regime CKA."""
    scores = per_layer_cka(quant_model, fp_model, tokens, settings)
    values = [s.value for s in scores]
    return int(np.argmin(values))


def split_tokens(tokens, fit_fraction: float = 0.8, seed: int = 0):
    """Seeded sequence-level split into (fit, held-out) lists.

    Token sequences stay intact so causal structure survives; at least one
    sequence lands on each side.
    """
    n = len(tokens)
    if n < 2:
        raise ConfigError("restoration needs >= 2 calibration sequences to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_fit = min(max(int(round(n * fit_fraction)), 1), n - 1)
    fit_idx = sorted(perm[:n_fit].tolist())
    hold_idx = sorted(perm[n_fit:].tolist())
    return [tokens[i] for i in fit_idx], [tokens[i] for i in hold_idx]


def fit_and_absorb(fp_model, quant_model: HybridModel, layer: int, tokens,
                   settings: Optional[SelectionSettings] = None,
                   fit_fraction: float = 0.8, seed: int = 0,
                   requantize: bool = False) -> RestorationResult:
    """Fit M at `layer`'s capture point and fold it into the down-projection.

    Mutates quant_model: the layer's w_down becomes a dense float64 matrix
    (deq(W_q) @ M). With requantize=True the dense matrix is RTN-requantized
    afterwards and the extra residual is reported.
    """
    settings = settings or SelectionSettings()
    if settings.cka_point == "ffn_intermediate":
        raise ConfigError("restoration requires a d_model-wide capture point")
    if not 0 <= layer < len(quant_model.layers):
        raise ConfigError(f"layer {layer} out of range")

    fit_tokens, hold_tokens = split_tokens(tokens, fit_fraction, seed)

    def capture(tok):
        fp = _stream_measures(fp_model, tok, settings.cka_point)[layer]
        q = _stream_measures(quant_model, tok, settings.cka_point)[layer]
        return fp, q

    x_fp_fit, x_q_fit = capture(fit_tokens)
    x_fp_hold, x_q_hold = capture(hold_tokens)

    cka_before = linear_cka(x_fp_hold, x_q_hold)
    cka_before_fit = linear_cka(x_fp_fit, x_q_fit).value

    fit = least_squares(x_q_fit, x_fp_fit)
    m = fit.m
    residual_before = float(np.linalg.norm(x_fp_fit - x_q_fit))
    residual_after = float(np.linalg.norm(x_fp_fit - x_q_fit @ m))

    ql = quant_model.layers[layer]
    new_down = ql.effective_matrix("w_down") @ m
    ql.set_dense_override("w_down", new_down)

    requant_residual = None
    if requantize:
        # back onto the integer grid; report what that costs on the fit split
        qcfg_bits = ql.projections["w_down"].bits if "w_down" in ql.projections else 4
        qcfg_group = ql.projections["w_down"].group_size if "w_down" in ql.projections else 128
        qt = quantize_rtn(new_down, QuantConfig(bits=qcfg_bits, group_size=qcfg_group))
        ql.dense_overrides.pop("w_down", None)
        ql.projections["w_down"] = qt
        ql._dense_cache.pop("w_down", None)
        _, x_q_fit_requant = capture(fit_tokens)
        requant_residual = float(np.linalg.norm(x_fp_fit - x_q_fit_requant))

    _, x_q_hold_after = capture(hold_tokens)
    cka_after = linear_cka(x_fp_hold, x_q_hold_after)
    _, x_q_fit_after = capture(fit_tokens)
    cka_after_fit = linear_cka(x_fp_fit, x_q_fit_after).value

    return RestorationResult(
        layer=layer,
        cka_before=cka_before, cka_after=cka_after,
        cka_before_fit=cka_before_fit, cka_after_fit=cka_after_fit,
        residual_before=residual_before, residual_after=residual_after,
        m_matrix_norm=float(np.linalg.norm(m)),
        rank_deficient=fit.rank_deficient,
        requantized=requantize, requantize_residual=requant_residual,
        fit_rows=x_fp_fit.shape[0], holdout_rows=x_fp_hold.shape[0],
    )


def restoration_cka_csv(before: List[CkaScore], after: List[CkaScore]) -> str:
    lines = ["layer,cka_before,cka_after"]
    for i, (b, a) in enumerate(zip(before, after)):
        lines.append(f"{i},{b.value!r},{a.value!r}")
    return "\n".join(lines) + "\n"
