"""Calibration ingestion, perplexity evaluation and FP-vs-quantized tables.

Token files are little-endian u32 ids with documents separated by the
reserved id vocab-1; text files map bytes straight onto the byte vocabulary.
Calibration and evaluation windows are sampled from disjoint regions of the
source (front 80% / back 20%) and an explicit overlap check enforces it.

Perplexity is exp of the mean natural-log next-token NLL over every position
except the first of each sequence, teacher-forced, no sliding window. The
protocol is fixed here and not comparable to published numbers measured with
other windowing schemes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, FileTooShort, TokenOutOfRange
from .model import forward_model
from .restoration import per_layer_cka
from .selector import SelectionSettings

SEPARATOR_OFFSET = 1  # separator id = vocab - 1


@dataclass
class CalibrationSet:
    """Token sequences plus the provenance needed to reproduce them."""

    sequences: List[np.ndarray]
    source: str
    seed: int
    n_sequences: int
    seq_len: int
    region: str = "full"  # calib | eval | full

    def __post_init__(self):
        if len(self.sequences) == 0:
            raise ConfigError("calibration set must not be empty")

    def tokens(self) -> List[np.ndarray]:
        return self.sequences

    def describe(self) -> dict:
        return {"source": self.source, "seed": self.seed,
                "n_sequences": self.n_sequences, "seq_len": self.seq_len,
                "region": self.region}


def read_token_file(path, vocab: int) -> np.ndarray:
    ids = np.fromfile(path, dtype="<u4").astype(np.int64)
    if ids.size and ids.max() >= vocab:
        raise TokenOutOfRange(f"{path}: id {int(ids.max())} >= vocab {vocab}")
    return ids


def read_text_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def write_token_file(path, docs: Sequence[Sequence[int]], vocab: int):
    """Concatenate documents with the reserved separator id (vocab-1)."""
    sep = vocab - SEPARATOR_OFFSET
    parts = []
    for i, doc in enumerate(docs):
        if i:
            parts.append(np.array([sep], dtype="<u4"))
        arr = np.asarray(doc, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= vocab):
            raise TokenOutOfRange("document token outside vocabulary")
        parts.append(arr.astype("<u4"))
    np.concatenate(parts).tofile(path)


def _sample_windows(stream: np.ndarray, n_sequences: int, seq_len: int,
                    seed: int, lo: int, hi: int) -> List[np.ndarray]:
    """Seeded contiguous windows with start offsets in [lo, hi)."""
    max_start = hi - seq_len
    if max_start < lo:
        raise FileTooShort(
            f"region of {hi - lo} tokens cannot fit a {seq_len}-token window")
    rng = np.random.default_rng(seed)
    starts = rng.integers(lo, max_start + 1, size=n_sequences)
    return [stream[s:s + seq_len].copy() for s in starts]


def load_calibration(path, vocab: int, n_sequences: int = 32, seq_len: int = 256,
                     seed: int = 0, region: str = "calib") -> CalibrationSet:
    """Sample contiguous windows from a token (.tok) or text file.

    region "calib" draws from the front 80% of the stream, "eval" from the
    back 20%, "full" from everywhere; calib/eval windows therefore cannot
    overlap (assert_disjoint double-checks).
    """
    path = str(path)
    if path.endswith(".tok") or path.endswith(".tokens") or path.endswith(".bin"):
        stream = read_token_file(path, vocab)
    else:
        stream = read_text_file(path)
        if stream.size and stream.max() >= vocab:
            raise TokenOutOfRange("text byte exceeds vocabulary")
    if stream.size < seq_len:
        raise FileTooShort(f"{path}: {stream.size} tokens < seq_len {seq_len}")

    split = int(stream.size * 0.8)
    if region == "calib":
        lo, hi = 0, split
    elif region == "eval":
        lo, hi = split, stream.size
    elif region == "full":
        lo, hi = 0, stream.size
    else:
        raise ConfigError(f"unknown region {region!r}")
    seqs = _sample_windows(stream, n_sequences, seq_len, seed, lo, hi)
    return CalibrationSet(sequences=seqs, source=path, seed=seed,
                          n_sequences=n_sequences, seq_len=seq_len, region=region)


def synth_transition_matrix(vocab: int, seed: int, skew: float) -> np.ndarray:
    """Row-stochastic transition matrix; skew=0 degenerates to uniform."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(1e-6, 1.0, size=(vocab, vocab))
    w = u ** skew if skew > 0 else np.ones_like(u)
    return w / w.sum(axis=1, keepdims=True)


def synth_calibration(vocab: int, n_sequences: int = 32, seq_len: int = 256,
                      seed: int = 0, skew: float = 3.0) -> CalibrationSet:
    """Seeded Markov-chain token generator with a skewed transition matrix.

    Produces non-uniform activation statistics with zero external data. The
    chain serves both calibration and eval roles; use different seeds and
    check disjointness where that matters.
    """
    trans = synth_transition_matrix(vocab, seed=seed * 2 + 1, skew=skew)
    cdf = np.cumsum(trans, axis=1)
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(n_sequences):
        out = np.empty(seq_len, dtype=np.int64)
        state = int(rng.integers(0, vocab))
        for t in range(seq_len):
            out[t] = state
            state = int(np.searchsorted(cdf[state], rng.random(), side="right"))
            state = min(state, vocab - 1)
        seqs.append(out)
    return CalibrationSet(sequences=seqs, source="synthetic", seed=seed,
                          n_sequences=n_sequences, seq_len=seq_len)


def synth_calibration_pair(vocab: int, n_calib: int = 32, n_eval: int = 8,
                           seq_len: int = 256, seed: int = 0, skew: float = 3.0):
    """Calibration and eval sets from the same chain, different seeds."""
    calib = synth_calibration(vocab, n_calib, seq_len, seed=seed, skew=skew)
    ev = synth_calibration(vocab, n_eval, seq_len, seed=seed + 7919, skew=skew)
    ev.region = "eval"
    calib.region = "calib"
    return calib, ev


def assert_disjoint(a: CalibrationSet, b: CalibrationSet):
    """Fail if any sequence appears in both sets (calibration leakage)."""
    seen = {seq.tobytes() for seq in a.sequences}
    for seq in b.sequences:
        if seq.tobytes() in seen:
            raise ConfigError("calibration and eval sets share a window")


@dataclass
class EvalResult:
    """Perplexity plus optional per-layer CKA against an FP reference."""

    ppl: float
    nll_total: float
    token_count: int
    per_layer_cka: Optional[List[float]] = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ppl": self.ppl, "nll_total": self.nll_total,
                "token_count": self.token_count,
                "per_layer_cka": self.per_layer_cka, "config": self.config}


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def perplexity(model, data: CalibrationSet, fp_ref=None,
               settings: Optional[SelectionSettings] = None) -> EvalResult:
    """Teacher-forced natural-log perplexity over non-initial positions.

    With fp_ref supplied, also records the per-layer evaluation-regime CKA
    of `model` against it over the same tokens.
    """
    tokens = data.tokens()
    logits, _ = forward_model(model, tokens, capture=False)
    logp = _log_softmax(logits)

    nll = 0.0
    count = 0
    row = 0
    for seq in tokens:
        s = len(seq)
        ids = np.asarray(seq, dtype=np.int64)
        # predict positions 1..s-1 from rows 0..s-2
        pred_rows = logp[row:row + s - 1]
        nll -= float(pred_rows[np.arange(s - 1), ids[1:]].sum())
        count += s - 1
        row += s
    if count == 0:
        raise ConfigError("perplexity needs sequences of length >= 2")

    cka_vec = None
    if fp_ref is not None:
        cka_vec = [s.value for s in per_layer_cka(model, fp_ref, tokens, settings)]

    return EvalResult(ppl=float(np.exp(nll / count)), nll_total=nll,
                      token_count=count, per_layer_cka=cka_vec,
                      config={"data": data.describe()})


def compare_methods(model, pool, calib: CalibrationSet, eval_set: CalibrationSet,
                    settings: Optional[SelectionSettings] = None,
                    config_snapshot: Optional[dict] = None) -> dict:
    """FP / uniform / hybrid / leave-one-out comparison table.

    Rows carry eval-set PPL, mean per-layer eval CKA vs FP, and (for rows
    with a selection report) the mean selection-time CKA of the chosen
    candidates. With a single-method pool the table collapses to the FP row
    plus that method (the hybrid would be identical by construction).
    """
    from .selector import pool_labels, select_greedy  # avoid cycle at import time

    settings = settings or SelectionSettings()
    assert_disjoint(calib, eval_set)
    labels = pool_labels(pool)
    calib_tokens = calib.tokens()

    rows = []
    fp_eval = perplexity(model, eval_set)
    rows.append({"name": "fp", "ppl": fp_eval.ppl, "mean_eval_cka": 1.0,
                 "mean_selection_cka": None})

    hybrids = {}
    for label, mcfg in labels:
        hybrids[label] = select_greedy(model, [mcfg], calib_tokens, settings,
                                       config_snapshot)
    full_hybrid = None
    if len(labels) > 1:
        full_hybrid = select_greedy(model, pool, calib_tokens, settings,
                                    config_snapshot)

    def add_row(name, hybrid):
        res = perplexity(hybrid, eval_set, fp_ref=model, settings=settings)
        chosen_scores = [r.scores[r.chosen].value for r in hybrid.report.records]
        rows.append({
            "name": name, "ppl": res.ppl,
            "mean_eval_cka": float(np.mean(res.per_layer_cka)),
            "mean_selection_cka": float(np.mean(chosen_scores)),
            "selection": [r.chosen for r in hybrid.report.records],
        })

    for label, _ in labels:
        add_row(f"uniform:{label}", hybrids[label])
    if full_hybrid is not None:
        add_row("hybrid:full", full_hybrid)
        for i, (label, _) in enumerate(labels):
            if len(labels) < 2:
                break
            loo_pool = [m for j, (_, m) in enumerate(labels) if j != i]
            loo_hybrid = select_greedy(model, loo_pool, calib_tokens, settings,
                                       config_snapshot)
            add_row(f"hybrid:wo_{label}", loo_hybrid)

    return {
        "rows": rows,
        "pool": [label for label, _ in labels],
        "calib": calib.describe(),
        "eval": eval_set.describe(),
        "config": config_snapshot or {},
    }


def comparison_csv(table: dict) -> str:
    lines = ["name,ppl,mean_eval_cka,mean_selection_cka,selection"]
    for row in table["rows"]:
        sel = ";".join(row.get("selection", [])) if row.get("selection") else ""
        msc = "" if row["mean_selection_cka"] is None else repr(row["mean_selection_cka"])
        lines.append(f"{row['name']},{row['ppl']!r},{row['mean_eval_cka']!r},{msc},{sel}")
    return "\n".join(lines) + "\n"


def stationary_distribution(trans: np.ndarray, iters: int = 2000) -> np.ndarray:
    """Power-iteration stationary distribution of a row-stochastic matrix."""
    v = np.full(trans.shape[0], 1.0 / trans.shape[0])
    for _ in range(iters):
        nv = v @ trans
        if np.abs(nv - v).sum() < 1e-12:
            return nv
        v = nv
    return v
