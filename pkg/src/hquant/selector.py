"""Greedy layer-wise method selection and hybrid-model assembly.

The selection pass keeps two activation streams over the calibration tokens:
a full-precision reference stream (X_ref) and a quantized stream (H_in) that
flows through the already-chosen quantized layers. Per layer, every pool
candidate is fitted on the quantized stream, forwarded, and scored with
linear CKA against the FP target at the configured capture point; the argmax
wins, strict-greater so earlier pool entries survive ties. Cost is exactly
L x |pool| candidate evaluations.

Variants: block-shared selection (one method per block of consecutive
layers), exhaustive enumeration as a small-scale oracle, and a bit-
heterogeneous GPTQ baseline under an average bit budget.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .cka import CkaScore, linear_cka, subsample_indices
from .container import TensorWriter, canonical_json, read_container, write_container
from .errors import (
    ConfigError,
    EmptyPool,
    HeaderMismatch,
    HquantError,
    InfeasibleBudget,
    SearchSpaceTooLarge,
)
from .model import (
    CKA_POINTS,
    PROJECTION_NAMES,
    LayerActivations,
    TransformerModel,
    embed_tokens,
    forward_layer,
    model_dims_header,
)
from .quant_codec import (
    GroupQuantTensor,
    QuantConfig,
    pack_codes,
    quantize_rtn,
    unpack_codes,
)
from .quant_methods import (
    LayerCalibration,
    MethodConfig,
    QuantizedLayer,
    apply_method,
    capture_layer_calibration,
)


@dataclass(frozen=True)
class SelectionSettings:
    """Knobs shared by all selection entry points."""

    cka_point: str = "ffn_pre_res"
    threads: int = 1
    cka_max_rows: Optional[int] = None
    cka_seed: int = 0

    def __post_init__(self):
        if self.cka_point not in CKA_POINTS:
            raise ConfigError(f"cka_point must be one of {CKA_POINTS}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class LayerRecord:
    """Per-layer selection outcome."""

    layer: int
    chosen: str
    scores: Dict[str, CkaScore]
    wall_times: Dict[str, float]
    block: Optional[int] = None
    block_scores: Optional[Dict[str, float]] = None  # per-candidate block means
    bits: Optional[int] = None                        # mixed-bit assignments


@dataclass
class SelectionReport:
    """The primary output document of a selection run."""

    mode: str                       # greedy | blockwise | exhaustive | mixed_bit
    records: List[LayerRecord]
    pool: List[dict]                # serialized MethodConfigs, pool order
    cka_point: str
    config: dict
    model_fingerprint: str
    candidate_evaluations: int
    fp_stream_hashes: List[str]
    q_stream_hashes: List[str]
    toolkit_version: str = __version__
    schema_version: int = 1

    def to_dict(self, include_timings: bool = True) -> dict:
        recs = []
        for r in self.records:
            rec = {
                "layer": r.layer,
                "chosen": r.chosen,
                "scores": {k: {"value": v.value, "n_rows": v.n_rows,
                               "degenerate": v.degenerate}
                           for k, v in r.scores.items()},
            }
            if include_timings:
                rec["wall_times"] = {k: float(t) for k, t in r.wall_times.items()}
            if r.block is not None:
                rec["block"] = r.block
            if r.block_scores is not None:
                rec["block_scores"] = r.block_scores
            if r.bits is not None:
                rec["bits"] = r.bits
            recs.append(rec)
        return {
            "schema_version": self.schema_version,
            "toolkit_version": self.toolkit_version,
            "mode": self.mode,
            "cka_point": self.cka_point,
            "pool": self.pool,
            "config": self.config,
            "model_fingerprint": self.model_fingerprint,
            "candidate_evaluations": self.candidate_evaluations,
            "fp_stream_hashes": self.fp_stream_hashes,
            "q_stream_hashes": self.q_stream_hashes,
            "records": recs,
        }

    def content_hash(self) -> str:
        """Hash over the deterministic report content (timings excluded)."""
        return hashlib.sha256(
            canonical_json(self.to_dict(include_timings=False)).encode()).hexdigest()

    def selection_csv(self) -> str:
        labels = [p["label"] for p in self.pool]
        lines = ["layer,method," + ",".join(f"score_{m}" for m in labels)]
        for r in self.records:
            scores = ",".join(repr(r.scores[m].value) if m in r.scores else ""
                              for m in labels)
            lines.append(f"{r.layer},{r.chosen},{scores}")
        return "\n".join(lines) + "\n"

    def cka_layers_csv(self) -> str:
        lines = ["layer,method,cka"]
        for r in self.records:
            for m, s in r.scores.items():
                lines.append(f"{r.layer},{m},{s.value!r}")
        return "\n".join(lines) + "\n"


@dataclass
class HybridModel:
    """Method-heterogeneous quantized model; forwards via the shared pass."""

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
    layers: List[QuantizedLayer]
    report: SelectionReport

    @classmethod
    def from_base(cls, base: TransformerModel, layers: List[QuantizedLayer],
                  report: SelectionReport) -> "HybridModel":
        if len(layers) != base.n_layers:
            raise ConfigError("hybrid layer count mismatch")
        return cls(
            d_model=base.d_model, d_ff=base.d_ff, n_heads=base.n_heads,
            n_layers=base.n_layers, vocab=base.vocab, max_seq=base.max_seq,
            rope_base=base.rope_base, embedding=base.embedding,
            final_norm=base.final_norm, lm_head=base.lm_head,
            layers=layers, report=report,
        )


def method_config_dict(mcfg: MethodConfig, label: str) -> dict:
    return {
        "label": label,
        "kind": mcfg.kind,
        "bits": mcfg.qcfg.bits,
        "group_size": mcfg.qcfg.group_size,
        "symmetric": mcfg.qcfg.symmetric,
        "act_bits": mcfg.qcfg.act_bits,
        "gptq_damping": mcfg.gptq_damping,
        "awq_alpha_grid": list(mcfg.awq_alpha_grid),
        "sq_alpha": mcfg.sq_alpha,
    }


def pool_labels(pool: Sequence[MethodConfig]) -> List[Tuple[str, MethodConfig]]:
    """Stable unique labels, pool order preserved; duplicates get #k suffixes."""
    if len(pool) == 0:
        raise EmptyPool("candidate pool is empty")
    seen: Dict[str, int] = {}
    out = []
    for mcfg in pool:
        base = mcfg.label
        seen[base] = seen.get(base, 0) + 1
        label = base if seen[base] == 1 else f"{base}#{seen[base]}"
        out.append((label, mcfg))
    return out


def _array_hash(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()


def _measure(acts: LayerActivations, point: str) -> np.ndarray:
    return acts.at(point)


def _paired_cka(target: np.ndarray, cand: np.ndarray,
                settings: SelectionSettings) -> CkaScore:
    if settings.cka_max_rows is not None and target.shape[0] > settings.cka_max_rows:
        idx = subsample_indices(target.shape[0], settings.cka_max_rows, settings.cka_seed)
        target = target[idx]
        cand = cand[idx]
    return linear_cka(target, cand)


def _layer_context(err: HquantError, layer: int) -> HquantError:
    err.args = (f"layer {layer}: {err.args[0] if err.args else err}",) + err.args[1:]
    return err


def _apply_and_forward(fp_layer, calib: LayerCalibration, mcfg: MethodConfig,
                       capture_inter: bool):
    """Quantize one candidate and forward it on the quantized stream.

    Methods that already forwarded their winning configuration during
    fitting (AWQ's grid search) hand that result over instead of paying for
    a second identical pass.
    """
    ql = apply_method(fp_layer, calib, mcfg)
    acts = ql.meta.pop("calib_acts", None)
    if acts is None or (capture_inter and acts.ffn_intermediate is None):
        acts = forward_layer(ql, calib.x, calib.positions,
                             n_heads=calib.n_heads, rope_base=calib.rope_base,
                             capture_intermediate=capture_inter)
    return ql, acts


class _CandidateRunner:
    """Evaluates pool candidates for one layer, optionally in parallel."""

    def __init__(self, settings: SelectionSettings):
        self.settings = settings
        self.capture_inter = settings.cka_point == "ffn_intermediate"

    def run(self, fp_layer, labels, calib: LayerCalibration, target_meas: np.ndarray):
        def one(item):
            label, mcfg = item
            t0 = time.perf_counter()
            ql, acts = _apply_and_forward(fp_layer, calib, mcfg, self.capture_inter)
            score = _paired_cka(target_meas, _measure(acts, self.settings.cka_point),
                                self.settings)
            return label, ql, acts, score, time.perf_counter() - t0

        if self.settings.threads > 1 and len(labels) > 1:
            with ThreadPoolExecutor(max_workers=self.settings.threads) as ex:
                return list(ex.map(one, labels))
        return [one(item) for item in labels]


def select_greedy(model: TransformerModel, pool: Sequence[MethodConfig],
                  calib_tokens, settings: Optional[SelectionSettings] = None,
                  config_snapshot: Optional[dict] = None) -> HybridModel:
    """Assemble a hybrid model by per-layer CKA argmax over the pool.

    Both streams start from the shared token embeddings; after each layer the
    FP stream advances through the FP layer and the quantized stream through
    the winning candidate. Exactly L x |pool| candidates are evaluated.
    """
    settings = settings or SelectionSettings()
    labels = pool_labels(pool)
    capture_inter = settings.cka_point == "ffn_intermediate"
    runner = _CandidateRunner(settings)

    x0, positions = embed_tokens(model, calib_tokens)
    x_ref = x0
    h_in = x0
    records: List[LayerRecord] = []
    chosen_layers: List[QuantizedLayer] = []
    fp_hashes: List[str] = []
    q_hashes: List[str] = []
    evaluations = 0

    for l, fp_layer in enumerate(model.layers):
        try:
            target_acts = forward_layer(fp_layer, x_ref, positions,
                                        n_heads=model.n_heads, rope_base=model.rope_base,
                                        capture_intermediate=capture_inter)
            calib = capture_layer_calibration(fp_layer, h_in, positions,
                                              n_heads=model.n_heads,
                                              rope_base=model.rope_base)
            target_meas = _measure(target_acts, settings.cka_point)
            results = runner.run(fp_layer, labels, calib, target_meas)
        except HquantError as e:
            raise _layer_context(e, l)
        evaluations += len(results)

        best = None
        for res in results:
            if best is None or res[3].value > best[3].value:
                best = res
        records.append(LayerRecord(
            layer=l, chosen=best[0],
            scores={r[0]: r[3] for r in results},
            wall_times={r[0]: r[4] for r in results},
        ))
        chosen_layers.append(best[1])
        h_in = best[2].layer_output
        x_ref = target_acts.layer_output
        fp_hashes.append(_array_hash(x_ref))
        q_hashes.append(_array_hash(h_in))

    report = SelectionReport(
        mode="greedy", records=records,
        pool=[method_config_dict(m, lab) for lab, m in labels],
        cka_point=settings.cka_point,
        config=config_snapshot or {},
        model_fingerprint=model.fingerprint(),
        candidate_evaluations=evaluations,
        fp_stream_hashes=fp_hashes, q_stream_hashes=q_hashes,
    )
    return HybridModel.from_base(model, chosen_layers, report)


def uniform_quantize(model: TransformerModel, mcfg: MethodConfig,
                     calib_tokens) -> List[QuantizedLayer]:
    """Apply one method to every layer on the quantized stream, no scoring.

    Independent of select_greedy on purpose: it is the reference the
    single-candidate pool is checked against.
    """
    x, positions = embed_tokens(model, calib_tokens)
    out = []
    for fp_layer in model.layers:
        calib = capture_layer_calibration(fp_layer, x, positions,
                                          n_heads=model.n_heads,
                                          rope_base=model.rope_base)
        ql, acts = _apply_and_forward(fp_layer, calib, mcfg, capture_inter=False)
        out.append(ql)
        x = acts.layer_output
    return out


def select_blockwise(model: TransformerModel, pool: Sequence[MethodConfig],
                     calib_tokens, block_k: int,
                     settings: Optional[SelectionSettings] = None,
                     config_snapshot: Optional[dict] = None) -> HybridModel:
    """One shared method per block of block_k consecutive layers.

    Candidates are applied to the whole block on the quantized stream and
    ranked by the mean CKA across the block's layers; block_k=1 degenerates
    to select_greedy bit-for-bit.
    """
    if block_k < 1:
        raise ConfigError("block_k must be >= 1")
    settings = settings or SelectionSettings()
    labels = pool_labels(pool)
    capture_inter = settings.cka_point == "ffn_intermediate"

    x0, positions = embed_tokens(model, calib_tokens)
    x_ref = x0
    h_in = x0
    records: List[LayerRecord] = []
    chosen_layers: List[QuantizedLayer] = []
    fp_hashes: List[str] = []
    q_hashes: List[str] = []
    evaluations = 0

    blocks = [(s, min(s + block_k, model.n_layers))
              for s in range(0, model.n_layers, block_k)]
    for bi, (bs, be) in enumerate(blocks):
        # FP targets for the whole block
        fp_acts: List[LayerActivations] = []
        xr = x_ref
        for l in range(bs, be):
            try:
                a = forward_layer(model.layers[l], xr, positions,
                                  n_heads=model.n_heads, rope_base=model.rope_base,
                                  capture_intermediate=capture_inter)
            except HquantError as e:
                raise _layer_context(e, l)
            fp_acts.append(a)
            xr = a.layer_output

        candidates = []
        for label, mcfg in labels:
            t0 = time.perf_counter()
            hin = h_in
            qls: List[QuantizedLayer] = []
            scores: List[CkaScore] = []
            out_hashes: List[str] = []
            for off, l in enumerate(range(bs, be)):
                try:
                    calib = capture_layer_calibration(
                        model.layers[l], hin, positions,
                        n_heads=model.n_heads, rope_base=model.rope_base)
                    ql, acts = _apply_and_forward(model.layers[l], calib, mcfg,
                                                  capture_inter)
                except HquantError as e:
                    raise _layer_context(e, l)
                evaluations += 1
                scores.append(_paired_cka(_measure(fp_acts[off], settings.cka_point),
                                          _measure(acts, settings.cka_point), settings))
                qls.append(ql)
                hin = acts.layer_output
                out_hashes.append(_array_hash(hin))
            mean_score = float(np.mean([s.value for s in scores]))
            candidates.append((label, qls, hin, scores, mean_score,
                               time.perf_counter() - t0, out_hashes))

        best = None
        for cand in candidates:
            if best is None or cand[4] > best[4]:
                best = cand
        block_means = {c[0]: c[4] for c in candidates}
        for off, l in enumerate(range(bs, be)):
            records.append(LayerRecord(
                layer=l, chosen=best[0],
                scores={c[0]: c[3][off] for c in candidates},
                wall_times={c[0]: c[5] / (be - bs) for c in candidates},
                block=bi, block_scores=block_means,
            ))
        chosen_layers.extend(best[1])
        h_in = best[2]
        x_ref = xr
        for off in range(be - bs):
            fp_hashes.append(_array_hash(fp_acts[off].layer_output))
        q_hashes.extend(best[6])

    report = SelectionReport(
        mode="blockwise", records=records,
        pool=[method_config_dict(m, lab) for lab, m in labels],
        cka_point=settings.cka_point,
        config=dict(config_snapshot or {}, block_k=block_k),
        model_fingerprint=model.fingerprint(),
        candidate_evaluations=evaluations,
        fp_stream_hashes=fp_hashes, q_stream_hashes=q_hashes,
    )
    return HybridModel.from_base(model, chosen_layers, report)


@dataclass
class ExhaustiveResult:
    """Best full assignment plus the complete score table and greedy's rank."""

    hybrid: HybridModel
    table: List[dict]               # {"assignment": [labels], "total_cka": float}
    best_assignment: List[str]
    best_total: float
    greedy_assignment: List[str]
    greedy_total: float
    greedy_rank: int                # 1 = tied with or equal to the optimum

EXHAUSTIVE_LIMIT = 4096


def select_exhaustive(model: TransformerModel, pool: Sequence[MethodConfig],
                      calib_tokens, settings: Optional[SelectionSettings] = None,
                      config_snapshot: Optional[dict] = None) -> ExhaustiveResult:
    """Enumerate every per-layer assignment; tiny-L oracle for the greedy pass.

    A full assignment is scored by the sum over layers of CKA between its
    quantized-stream outputs and the FP targets (the oracle's objective
    definition, documented here, not anywhere else). Prefix streams are
    shared via depth-first recursion.
    """
    settings = settings or SelectionSettings()
    labels = pool_labels(pool)
    n_assign = len(labels) ** model.n_layers
    if n_assign > EXHAUSTIVE_LIMIT:
        raise SearchSpaceTooLarge(
            f"|pool|^L = {n_assign} exceeds the {EXHAUSTIVE_LIMIT} guard")
    capture_inter = settings.cka_point == "ffn_intermediate"

    x0, positions = embed_tokens(model, calib_tokens)

    # FP targets once
    fp_meas: List[np.ndarray] = []
    xr = x0
    for l, fp_layer in enumerate(model.layers):
        a = forward_layer(fp_layer, xr, positions, n_heads=model.n_heads,
                          rope_base=model.rope_base, capture_intermediate=capture_inter)
        fp_meas.append(_measure(a, settings.cka_point))
        xr = a.layer_output

    table: List[dict] = []
    best: dict = {"total": -np.inf, "assignment": None, "layers": None,
                  "scores": None}
    stack_layers: List[QuantizedLayer] = []
    stack_labels: List[str] = []
    stack_scores: List[CkaScore] = []

    def dfs(l: int, hin: np.ndarray, total: float):
        if l == model.n_layers:
            table.append({"assignment": list(stack_labels), "total_cka": total})
            if total > best["total"]:
                best.update(total=total, assignment=list(stack_labels),
                            layers=list(stack_layers), scores=list(stack_scores))
            return
        fp_layer = model.layers[l]
        for label, mcfg in labels:
            try:
                calib = capture_layer_calibration(fp_layer, hin, positions,
                                                  n_heads=model.n_heads,
                                                  rope_base=model.rope_base)
                ql, acts = _apply_and_forward(fp_layer, calib, mcfg, capture_inter)
            except HquantError as e:
                raise _layer_context(e, l)
            score = _paired_cka(fp_meas[l], _measure(acts, settings.cka_point), settings)
            stack_layers.append(ql)
            stack_labels.append(label)
            stack_scores.append(score)
            dfs(l + 1, acts.layer_output, total + score.value)
            stack_layers.pop()
            stack_labels.pop()
            stack_scores.pop()

    dfs(0, x0, 0.0)

    greedy = select_greedy(model, pool, calib_tokens, settings, config_snapshot)
    greedy_assignment = [r.chosen for r in greedy.report.records]
    greedy_total = None
    for row in table:
        if row["assignment"] == greedy_assignment:
            greedy_total = row["total_cka"]
            break
    if greedy_total is None:  # defensive; greedy's assignment is always enumerated
        raise RuntimeError("greedy assignment missing from exhaustive table")
    greedy_rank = 1 + sum(1 for row in table if row["total_cka"] > greedy_total)

    records = []
    for l, (label, score) in enumerate(zip(best["assignment"], best["scores"])):
        records.append(LayerRecord(layer=l, chosen=label, scores={label: score},
                                   wall_times={label: 0.0}))
    report = SelectionReport(
        mode="exhaustive", records=records,
        pool=[method_config_dict(m, lab) for lab, m in labels],
        cka_point=settings.cka_point,
        config=dict(config_snapshot or {}, assignments=n_assign),
        model_fingerprint=model.fingerprint(),
        candidate_evaluations=sum(len(labels) ** k
                                  for k in range(1, model.n_layers + 1)),
        fp_stream_hashes=[], q_stream_hashes=[],
    )
    hybrid = HybridModel.from_base(model, best["layers"], report)
    return ExhaustiveResult(
        hybrid=hybrid, table=table,
        best_assignment=best["assignment"], best_total=best["total"],
        greedy_assignment=greedy_assignment, greedy_total=greedy_total,
        greedy_rank=greedy_rank,
    )


DEFAULT_BIT_OPTIONS = (2, 4, 8)


def assign_bits_by_sensitivity(sensitivity_rank: Sequence[int],
                               layer_params: Sequence[int],
                               avg_bits: float,
                               bit_options: Sequence[int]) -> List[int]:
    """Greedy bit assignment: protect the most sensitive layers first.

    sensitivity_rank lists layer indices most-sensitive-first. Walking that
    order, each layer gets the largest option that keeps the rest of the
    budget feasible with every remaining layer at the minimum option. The
    result is monotone (more sensitive never gets fewer bits) and meets the
    parameter-weighted mean budget avg_bits + 0.01 exactly or errors.
    """
    options = sorted(set(int(b) for b in bit_options))
    if any(not 2 <= b <= 8 for b in options):
        raise ConfigError("bit options must lie in [2, 8]")
    total_params = float(sum(layer_params))
    budget = (avg_bits + 0.01) * total_params
    if options[0] * total_params > budget:
        raise InfeasibleBudget(
            f"minimum option {options[0]} already exceeds budget {avg_bits}")

    bits = [0] * len(sensitivity_rank)
    remaining = [layer_params[i] for i in sensitivity_rank]
    for pos, layer in enumerate(sensitivity_rank):
        rest = sum(remaining[pos + 1:])
        chosen = None
        for b in reversed(options):
            if b * layer_params[layer] + options[0] * rest <= budget + 1e-9:
                chosen = b
                break
        if chosen is None:
            raise InfeasibleBudget("no option fits the remaining budget")
        bits[layer] = chosen
        budget -= chosen * layer_params[layer]
    return bits


def layer_param_counts(model: TransformerModel) -> List[int]:
    counts = []
    for layer in model.layers:
        counts.append(sum(getattr(layer, n).size for n in PROJECTION_NAMES))
    return counts


def mixed_bit_baseline(model: TransformerModel, calib_tokens, avg_bits: float,
                       bit_options: Sequence[int] = DEFAULT_BIT_OPTIONS,
                       settings: Optional[SelectionSettings] = None,
                       base_mcfg: Optional[MethodConfig] = None,
                       config_snapshot: Optional[dict] = None) -> HybridModel:
    """Bit-heterogeneous GPTQ baseline under an average bit budget.

    Layer sensitivity is probed with a 2-bit RTN pass against the FP stream;
    least sensitive layers (highest probe CKA) get the lowest bit-widths,
    subject to the parameter-weighted mean staying within avg_bits + 0.01.
    GPTQ is then applied everywhere at the assigned widths on the quantized
    stream, mirroring the greedy pass with a single method.
    """
    settings = settings or SelectionSettings()
    base = base_mcfg or MethodConfig(kind="gptq")
    capture_inter = settings.cka_point == "ffn_intermediate"

    x0, positions = embed_tokens(model, calib_tokens)

    # sensitivity probe on the FP stream
    probe_cfg = QuantConfig(bits=2, group_size=base.qcfg.group_size, symmetric=False)
    probe_scores: List[float] = []
    xr = x0
    for l, fp_layer in enumerate(model.layers):
        fp_acts = forward_layer(fp_layer, xr, positions, n_heads=model.n_heads,
                                rope_base=model.rope_base,
                                capture_intermediate=capture_inter)
        probe = QuantizedLayer(
            method_tag="rtn-probe",
            projections={n: quantize_rtn(getattr(fp_layer, n), probe_cfg)
                         for n in PROJECTION_NAMES},
            norm_attn=fp_layer.norm_attn.copy(), norm_ffn=fp_layer.norm_ffn.copy(),
        )
        probe_acts = forward_layer(probe, xr, positions, n_heads=model.n_heads,
                                   rope_base=model.rope_base,
                                   capture_intermediate=capture_inter)
        probe_scores.append(_paired_cka(
            _measure(fp_acts, settings.cka_point),
            _measure(probe_acts, settings.cka_point), settings).value)
        xr = fp_acts.layer_output

    # most sensitive = lowest probe CKA; ties by layer index for determinism
    order = sorted(range(model.n_layers), key=lambda i: (probe_scores[i], i))
    params = layer_param_counts(model)
    bits = assign_bits_by_sensitivity(order, params, avg_bits, bit_options)
    mean_bits = float(np.dot(bits, params) / sum(params))

    per_layer_cfgs = [
        replace(base, qcfg=replace(base.qcfg, bits=b), name=f"{base.kind}@{b}")
        for b in bits
    ]
    pool_dicts = []
    seen = set()
    for b in sorted(set(bits)):
        mc = replace(base, qcfg=replace(base.qcfg, bits=b), name=f"{base.kind}@{b}")
        if mc.label not in seen:
            pool_dicts.append(method_config_dict(mc, mc.label))
            seen.add(mc.label)

    x_ref = x0
    h_in = x0
    records: List[LayerRecord] = []
    chosen: List[QuantizedLayer] = []
    fp_hashes, q_hashes = [], []
    for l, fp_layer in enumerate(model.layers):
        mcfg = per_layer_cfgs[l]
        try:
            target_acts = forward_layer(fp_layer, x_ref, positions,
                                        n_heads=model.n_heads, rope_base=model.rope_base,
                                        capture_intermediate=capture_inter)
            calib = capture_layer_calibration(fp_layer, h_in, positions,
                                              n_heads=model.n_heads,
                                              rope_base=model.rope_base)
            t0 = time.perf_counter()
            ql, acts = _apply_and_forward(fp_layer, calib, mcfg, capture_inter)
        except HquantError as e:
            raise _layer_context(e, l)
        score = _paired_cka(_measure(target_acts, settings.cka_point),
                            _measure(acts, settings.cka_point), settings)
        records.append(LayerRecord(
            layer=l, chosen=mcfg.label, scores={mcfg.label: score},
            wall_times={mcfg.label: time.perf_counter() - t0}, bits=bits[l]))
        chosen.append(ql)
        h_in = acts.layer_output
        x_ref = target_acts.layer_output
        fp_hashes.append(_array_hash(x_ref))
        q_hashes.append(_array_hash(h_in))

    report = SelectionReport(
        mode="mixed_bit", records=records, pool=pool_dicts,
        cka_point=settings.cka_point,
        config=dict(config_snapshot or {}, avg_bits=avg_bits,
                    bit_options=sorted(set(int(b) for b in bit_options)),
                    bit_assignment=bits, mean_bits=mean_bits,
                    probe_cka=probe_scores),
        model_fingerprint=model.fingerprint(),
        candidate_evaluations=model.n_layers,
        fp_stream_hashes=fp_hashes, q_stream_hashes=q_hashes,
    )
    return HybridModel.from_base(model, chosen, report)


def verify_report(model: TransformerModel, hybrid: HybridModel, calib_tokens,
                  settings: Optional[SelectionSettings] = None) -> dict:
    """Post-hoc recomputation oracle for a greedy report.

    Replays both streams from the model, the hybrid's layers and the pool
    spec recorded in the report; recomputes every candidate's CKA score and
    checks the recorded argmax, score values and stream hashes. Returns a
    dict of booleans plus the recomputed scores.
    """
    report = hybrid.report
    if report.mode != "greedy":
        raise ConfigError("verify_report replays greedy reports only")
    settings = settings or SelectionSettings(cka_point=report.cka_point)
    pool = [method_config_from_dict(p) for p in report.pool]
    labels = pool_labels(pool)
    capture_inter = settings.cka_point == "ffn_intermediate"

    x0, positions = embed_tokens(model, calib_tokens)
    x_ref = x0
    h_in = x0
    argmax_ok = True
    scores_ok = True
    streams_ok = True
    recomputed = []
    for l, fp_layer in enumerate(model.layers):
        target_acts = forward_layer(fp_layer, x_ref, positions,
                                    n_heads=model.n_heads, rope_base=model.rope_base,
                                    capture_intermediate=capture_inter)
        calib = capture_layer_calibration(fp_layer, h_in, positions,
                                          n_heads=model.n_heads,
                                          rope_base=model.rope_base)
        target_meas = _measure(target_acts, settings.cka_point)
        layer_scores = {}
        for label, mcfg in labels:
            ql, acts = _apply_and_forward(fp_layer, calib, mcfg, capture_inter)
            layer_scores[label] = _paired_cka(
                target_meas, _measure(acts, settings.cka_point), settings).value
        # strict > comparison in pool order, matching the selection tie-break
        best_label, best_val = None, -1.0
        for label, _ in labels:
            if layer_scores[label] > best_val:
                best_val = layer_scores[label]
                best_label = label
        rec = report.records[l]
        if best_label != rec.chosen:
            argmax_ok = False
        for label, _ in labels:
            if abs(layer_scores[label] - rec.scores[label].value) > 1e-12:
                scores_ok = False
        recomputed.append(layer_scores)

        # advance both streams through the recorded choice
        chosen_acts = forward_layer(hybrid.layers[l], h_in, positions,
                                    n_heads=model.n_heads, rope_base=model.rope_base)
        h_in = chosen_acts.layer_output
        x_ref = target_acts.layer_output
        if _array_hash(x_ref) != report.fp_stream_hashes[l]:
            streams_ok = False
        if _array_hash(h_in) != report.q_stream_hashes[l]:
            streams_ok = False

    return {"argmax_ok": argmax_ok, "scores_ok": scores_ok,
            "streams_ok": streams_ok, "recomputed": recomputed}


def method_config_from_dict(d: dict) -> MethodConfig:
    return MethodConfig(
        kind=d["kind"],
        qcfg=QuantConfig(bits=d["bits"], group_size=d["group_size"],
                         symmetric=d["symmetric"], act_bits=d.get("act_bits")),
        gptq_damping=d.get("gptq_damping", 0.01),
        awq_alpha_grid=tuple(d.get("awq_alpha_grid", (0.5,))),
        sq_alpha=d.get("sq_alpha", 0.5),
        name=d.get("label") if d.get("label") != d["kind"] else None,
    )


# --- HQTM-Q serialization -------------------------------------------------------

def save_hybrid(hybrid: HybridModel, path):
    """Write the HQTM-Q container.

    Codes are bit-packed little-endian, group scales/zero-points float32
    (already snapped at construction, so the round trip is bit-exact);
    runtime activation scales and dense overrides keep full float64
    precision. The embedded report JSON excludes wall times so identical
    seeds produce identical files.
    """
    writer = TensorWriter()
    writer.add_f32("embedding", hybrid.embedding)
    writer.add_f32("final_norm", hybrid.final_norm)
    writer.add_f32("lm_head", hybrid.lm_head)

    layer_headers = []
    for i, ql in enumerate(hybrid.layers):
        p = f"layers.{i}."
        writer.add_f32(p + "norm_attn", ql.norm_attn)
        writer.add_f32(p + "norm_ffn", ql.norm_ffn)
        projections = {}
        for name in PROJECTION_NAMES:
            entry = {"quant": None, "act_scale": None, "dense_override": None}
            if name in ql.projections:
                q = ql.projections[name]
                writer.add_raw(p + name + ".codes", pack_codes(q),
                               [q.orig_rows, q.orig_cols], "u8")
                writer.add_f32(p + name + ".scales", q.scales)
                writer.add_f32(p + name + ".zero_points", q.zero_points)
                entry["quant"] = {
                    "bits": q.bits, "group_size": q.group_size,
                    "symmetric": q.symmetric,
                    "rows": q.orig_rows, "cols": q.orig_cols,
                }
            if name in ql.act_scales:
                writer.add_raw(p + name + ".act_scale",
                               np.ascontiguousarray(ql.act_scales[name], dtype="<f8").tobytes(),
                               [len(ql.act_scales[name])], "f64")
                entry["act_scale"] = True
            if name in ql.dense_overrides:
                d = ql.dense_overrides[name]
                writer.add_raw(p + name + ".dense",
                               np.ascontiguousarray(d, dtype="<f8").tobytes(),
                               list(d.shape), "f64")
                entry["dense_override"] = True
            projections[name] = entry
        layer_headers.append({
            "method": ql.method_tag,
            "act_bits": ql.act_bits,
            "projections": projections,
        })

    header = {
        "format": "HQTM-Q",
        "dims": model_dims_header(hybrid),
        "layers": layer_headers,
        "pool": hybrid.report.pool,
        "report": hybrid.report.to_dict(include_timings=False),
    }
    write_container(path, header, writer)


def _f64(reader, name, shape=None) -> np.ndarray:
    raw = np.frombuffer(reader.raw(name), dtype="<f8")
    return raw.reshape(shape) if shape is not None else raw


def load_hybrid(path, expected_pool: Optional[Sequence[str]] = None) -> HybridModel:
    """Read an HQTM-Q container back; optional pool-label expectation check."""
    reader = read_container(path, "HQTM-Q")
    header = reader.header
    dims = header["dims"]

    if expected_pool is not None:
        found = [p["label"] for p in header.get("pool", [])]
        if list(expected_pool) != found:
            raise HeaderMismatch(
                f"hybrid pool {found} does not match expected {list(expected_pool)}")

    layers = []
    for i, lh in enumerate(header["layers"]):
        p = f"layers.{i}."
        projections = {}
        act_scales = {}
        dense = {}
        for name in PROJECTION_NAMES:
            entry = lh["projections"][name]
            if entry.get("quant"):
                q = entry["quant"]
                codes = unpack_codes(reader.raw(p + name + ".codes"), q["bits"],
                                     q["symmetric"], q["rows"], q["cols"])
                projections[name] = GroupQuantTensor(
                    codes=codes,
                    scales=reader.f32(p + name + ".scales"),
                    zero_points=reader.f32(p + name + ".zero_points"),
                    bits=q["bits"], group_size=q["group_size"],
                    symmetric=q["symmetric"],
                    orig_rows=q["rows"], orig_cols=q["cols"],
                )
            if entry.get("act_scale"):
                act_scales[name] = _f64(reader, p + name + ".act_scale")
            if entry.get("dense_override"):
                dense[name] = _f64(reader, p + name + ".dense",
                                   reader.shape(p + name + ".dense"))
        layers.append(QuantizedLayer(
            method_tag=lh["method"],
            projections=projections,
            norm_attn=reader.f32(p + "norm_attn"),
            norm_ffn=reader.f32(p + "norm_ffn"),
            act_scales=act_scales,
            dense_overrides=dense,
            act_bits=lh.get("act_bits"),
        ))

    report = report_from_dict(header["report"])
    return HybridModel(
        d_model=dims["d_model"], d_ff=dims["d_ff"], n_heads=dims["n_heads"],
        n_layers=dims["n_layers"], vocab=dims["vocab"], max_seq=dims["max_seq"],
        rope_base=float(dims["rope_base"]),
        embedding=reader.f32("embedding"),
        final_norm=reader.f32("final_norm"),
        lm_head=reader.f32("lm_head"),
        layers=layers, report=report,
    )


def report_from_dict(d: dict) -> SelectionReport:
    records = []
    for rec in d["records"]:
        records.append(LayerRecord(
            layer=rec["layer"], chosen=rec["chosen"],
            scores={k: CkaScore(value=v["value"], n_rows=v["n_rows"],
                                degenerate=v["degenerate"])
                    for k, v in rec["scores"].items()},
            wall_times={k: float(t) for k, t in rec.get("wall_times", {}).items()},
            block=rec.get("block"), block_scores=rec.get("block_scores"),
            bits=rec.get("bits"),
        ))
    return SelectionReport(
        mode=d["mode"], records=records, pool=d["pool"], cka_point=d["cka_point"],
        config=d["config"], model_fingerprint=d["model_fingerprint"],
        candidate_evaluations=d["candidate_evaluations"],
        fp_stream_hashes=d["fp_stream_hashes"], q_stream_hashes=d["q_stream_hashes"],
        toolkit_version=d.get("toolkit_version", __version__),
        schema_version=d.get("schema_version", 1),
    )
