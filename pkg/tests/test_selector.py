"""Selection pipeline tests: greedy, blockwise, exhaustive, mixed-bit, HQTM-Q."""

import json

import numpy as np
import pytest

from hquant.cka import linear_cka
from hquant.errors import EmptyPool, HeaderMismatch, InfeasibleBudget, SearchSpaceTooLarge
from hquant.model import PROJECTION_NAMES, forward_model
from hquant.quant_codec import QuantConfig
from hquant.quant_methods import MethodConfig
from hquant.selector import (
    SelectionSettings,
    assign_bits_by_sensitivity,
    load_hybrid,
    mixed_bit_baseline,
    pool_labels,
    save_hybrid,
    select_blockwise,
    select_exhaustive,
    select_greedy,
    uniform_quantize,
    verify_report,
)

from conftest import tiny_model
from hquant.evalsuite import synth_calibration

QCFG = QuantConfig(bits=3, group_size=32)


def small_pool(*kinds):
    return [MethodConfig(kind=k, qcfg=QCFG) for k in kinds]


def tensors_equal(a, b):
    if set(a.projections) != set(b.projections):
        return False
    for name in a.projections:
        qa, qb = a.projections[name], b.projections[name]
        if not (np.array_equal(qa.codes, qb.codes)
                and np.array_equal(qa.scales, qb.scales)
                and np.array_equal(qa.zero_points, qb.zero_points)):
            return False
    if set(a.act_scales) != set(b.act_scales):
        return False
    for name in a.act_scales:
        if not np.array_equal(a.act_scales[name], b.act_scales[name]):
            return False
    return True


@pytest.fixture(scope="module")
def model():
    return tiny_model(seed=7, n_layers=4, d_model=32, d_ff=96, n_heads=4, vocab=64)


@pytest.fixture(scope="module")
def calib(model):
    return synth_calibration(model.vocab, n_sequences=6, seq_len=32, seed=3).tokens()


class TestGreedy:
    def test_single_method_pool_equals_uniform(self, model, calib):
        mcfg = small_pool("gptq")[0]
        hybrid = select_greedy(model, [mcfg], calib)
        uniform = uniform_quantize(model, mcfg, calib)
        for hl, ul in zip(hybrid.layers, uniform):
            assert tensors_equal(hl, ul)

    def test_duplicate_pool_ties_break_to_first(self, model, calib):
        dup = select_greedy(model, small_pool("gptq", "gptq"), calib)
        single = select_greedy(model, small_pool("gptq"), calib)
        assert [r.chosen for r in dup.report.records] == ["gptq"] * model.n_layers
        labels = [p["label"] for p in dup.report.pool]
        assert labels == ["gptq", "gptq#2"]
        for dl, sl in zip(dup.layers, single.layers):
            assert tensors_equal(dl, sl)

    def test_posthoc_recomputation_oracle(self, model, calib):
        pool = small_pool("rtn", "gptq", "smoothquant")
        hybrid = select_greedy(model, pool, calib)
        v = verify_report(model, hybrid, calib)
        assert v["argmax_ok"] and v["scores_ok"] and v["streams_ok"]

    def test_stream_hashes_match_plain_forwards(self, model, calib):
        import hashlib

        def ahash(a):
            return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64)
                                  .tobytes()).hexdigest()

        hybrid = select_greedy(model, small_pool("gptq", "smoothquant"), calib)
        _, fp_acts = forward_model(model, calib)
        assert [ahash(a.layer_output) for a in fp_acts] == hybrid.report.fp_stream_hashes
        _, q_acts = forward_model(hybrid, calib)
        assert [ahash(a.layer_output) for a in q_acts] == hybrid.report.q_stream_hashes

    def test_candidate_evaluation_count(self, model, calib):
        pool = small_pool("rtn", "gptq", "awq")
        hybrid = select_greedy(model, pool, calib)
        assert hybrid.report.candidate_evaluations == model.n_layers * len(pool)

    def test_chosen_score_is_argmax(self, model, calib):
        hybrid = select_greedy(model, small_pool("rtn", "gptq", "smoothquant"), calib)
        for rec in hybrid.report.records:
            best = max(rec.scores.values(), key=lambda s: s.value)
            assert rec.scores[rec.chosen].value == best.value

    def test_determinism(self, model, calib):
        pool = small_pool("gptq", "awq", "smoothquant")
        a = select_greedy(model, pool, calib)
        b = select_greedy(model, pool, calib)
        assert a.report.content_hash() == b.report.content_hash()
        for la, lb in zip(a.layers, b.layers):
            assert tensors_equal(la, lb)

    def test_threads_do_not_change_result(self, model, calib):
        pool = small_pool("rtn", "gptq", "smoothquant")
        a = select_greedy(model, pool, calib, SelectionSettings(threads=1))
        b = select_greedy(model, pool, calib, SelectionSettings(threads=3))
        assert a.report.content_hash() == b.report.content_hash()

    def test_layer_output_point(self, model, calib):
        hybrid = select_greedy(model, small_pool("gptq", "rtn"), calib,
                               SelectionSettings(cka_point="layer_output"))
        assert hybrid.report.cka_point == "layer_output"
        v = verify_report(model, hybrid, calib,
                          SelectionSettings(cka_point="layer_output"))
        assert v["argmax_ok"]

    def test_empty_pool(self, model, calib):
        with pytest.raises(EmptyPool):
            select_greedy(model, [], calib)


class TestBlockwise:
    def test_block1_identical_to_greedy(self, model, calib):
        pool = small_pool("gptq", "smoothquant")
        greedy = select_greedy(model, pool, calib)
        block1 = select_blockwise(model, pool, calib, block_k=1)
        assert ([r.chosen for r in greedy.report.records]
                == [r.chosen for r in block1.report.records])
        for gl, bl in zip(greedy.layers, block1.layers):
            assert tensors_equal(gl, bl)
        for gr, br in zip(greedy.report.records, block1.report.records):
            for k in gr.scores:
                assert gr.scores[k].value == br.scores[k].value

    def test_block_covering_all_layers_is_best_uniform(self, model, calib):
        pool = small_pool("gptq", "smoothquant")
        hybrid = select_blockwise(model, pool, calib, block_k=model.n_layers)
        chosen = hybrid.report.records[0].chosen
        assert all(r.chosen == chosen for r in hybrid.report.records)

        # oracle: evaluate each uniform candidate's mean CKA independently
        _, fp_acts = forward_model(model, calib)
        means = {}
        for label, mcfg in pool_labels(pool):
            qls = uniform_quantize(model, mcfg, calib)
            class H:  # minimal duck-typed forward target
                pass
            h = H()
            for f in ("d_model", "d_ff", "n_heads", "n_layers", "vocab",
                      "max_seq", "rope_base", "embedding", "final_norm", "lm_head"):
                setattr(h, f, getattr(model, f))
            h.layers = qls
            _, q_acts = forward_model(h, calib)
            means[label] = float(np.mean([
                linear_cka(f.ffn_out_preres, q.ffn_out_preres).value
                for f, q in zip(fp_acts, q_acts)]))
        best_label = max(pool_labels(pool), key=lambda kv: means[kv[0]])[0]
        assert chosen == best_label
        assert abs(hybrid.report.records[0].block_scores[chosen] - means[chosen]) < 1e-12

    def test_block2_scores_match_recomputation(self, model, calib):
        pool = small_pool("gptq", "rtn")
        hybrid = select_blockwise(model, pool, calib, block_k=2)
        assert hybrid.report.candidate_evaluations == model.n_layers * len(pool)
        for rec in hybrid.report.records:
            mean_of_layers = {}
            block_recs = [r for r in hybrid.report.records if r.block == rec.block]
            for label in rec.scores:
                mean_of_layers[label] = float(np.mean(
                    [r.scores[label].value for r in block_recs]))
            for label, mean in mean_of_layers.items():
                assert abs(rec.block_scores[label] - mean) < 1e-12


class TestExhaustive:
    def test_single_method_matches_greedy(self, model, calib):
        res = select_exhaustive(model, small_pool("gptq"), calib)
        assert len(res.table) == 1
        assert res.greedy_rank == 1
        assert res.best_assignment == res.greedy_assignment

    def test_enumeration_count_and_membership(self, calib):
        m = tiny_model(seed=9, n_layers=2, d_model=16, d_ff=48, n_heads=2, vocab=64)
        cal = synth_calibration(64, n_sequences=4, seq_len=16, seed=5).tokens()
        res = select_exhaustive(m, small_pool("gptq", "rtn"), cal)
        assert len(res.table) == 4
        assignments = [tuple(r["assignment"]) for r in res.table]
        assert len(set(assignments)) == 4
        assert tuple(res.greedy_assignment) in set(assignments)
        assert res.best_total >= res.greedy_total - 1e-12

    def test_guard(self, model, calib):
        pool = small_pool(*(["gptq"] * 10))
        with pytest.raises(SearchSpaceTooLarge):
            select_exhaustive(tiny_model(seed=1, n_layers=4, vocab=64), pool, calib)


class TestMixedBit:
    def test_uniform_when_single_option(self):
        bits = assign_bits_by_sensitivity([0, 1, 2], [10, 10, 10], 4.0, [4])
        assert bits == [4, 4, 4]

    def test_budget_eight_gives_all_eight(self):
        bits = assign_bits_by_sensitivity([2, 0, 1, 3], [5, 5, 5, 5], 8.0, [2, 4, 8])
        assert bits == [8, 8, 8, 8]

    def test_budget_four_spread_and_monotone(self):
        order = [3, 1, 0, 2, 4, 5, 6, 7]  # most sensitive first
        params = [100] * 8
        bits = assign_bits_by_sensitivity(order, params, 4.0, [2, 4, 8])
        mean = sum(b * p for b, p in zip(bits, params)) / sum(params)
        assert mean <= 4.01
        ranked = [bits[i] for i in order]
        assert all(ranked[i] >= ranked[i + 1] for i in range(len(ranked) - 1))
        assert len(set(bits)) > 1  # heterogeneity under a tight budget

    def test_infeasible_budget(self):
        with pytest.raises(InfeasibleBudget):
            assign_bits_by_sensitivity([0, 1], [10, 10], 1.0, [2, 4])

    def test_end_to_end_accounting(self, model, calib):
        hybrid = mixed_bit_baseline(model, calib, avg_bits=4.0, bit_options=(2, 4, 8),
                                    base_mcfg=MethodConfig(kind="gptq", qcfg=QCFG))
        cfg = hybrid.report.config
        params = [sum(getattr(l, n).size for n in PROJECTION_NAMES)
                  for l in model.layers]
        mean = sum(b * p for b, p in zip(cfg["bit_assignment"], params)) / sum(params)
        assert abs(mean - cfg["mean_bits"]) < 1e-12
        assert mean <= 4.01
        for rec, b in zip(hybrid.report.records, cfg["bit_assignment"]):
            assert rec.bits == b
            assert rec.chosen == f"gptq@{b}"
        logits, _ = forward_model(hybrid, calib, capture=False)
        assert np.isfinite(logits).all()


class TestHybridSerialization:
    def test_roundtrip_forward_bit_exact(self, model, calib, tmp_path):
        hybrid = select_greedy(model, small_pool("gptq", "awq", "smoothquant"), calib)
        p = tmp_path / "h.hqtmq"
        save_hybrid(hybrid, p)
        loaded = load_hybrid(p)
        a, _ = forward_model(hybrid, calib, capture=False)
        b, _ = forward_model(loaded, calib, capture=False)
        assert np.array_equal(a, b)
        assert loaded.report.content_hash() == hybrid.report.content_hash()

    def test_pool_expectation_mismatch(self, model, calib, tmp_path):
        hybrid = select_greedy(model, small_pool("gptq", "smoothquant"), calib)
        p = tmp_path / "h.hqtmq"
        save_hybrid(hybrid, p)
        load_hybrid(p, expected_pool=["gptq", "smoothquant"])  # matches
        with pytest.raises(HeaderMismatch):
            load_hybrid(p, expected_pool=["gptq", "awq", "smoothquant"])

    def test_report_schema_validation(self, model, calib, tmp_path):
        jsonschema = pytest.importorskip("jsonschema")
        from importlib.resources import files

        hybrid = select_greedy(model, small_pool("gptq", "rtn"), calib)
        p = tmp_path / "h.hqtmq"
        save_hybrid(hybrid, p)
        import struct
        raw = p.read_bytes()
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12:12 + hlen])
        schema = json.loads(files("hquant").joinpath(
            "schemas/selection_report.schema.json").read_text())
        jsonschema.validate(header["report"], schema)

    def test_same_seed_identical_bytes(self, model, calib, tmp_path):
        pool = small_pool("gptq", "smoothquant")
        p1, p2 = tmp_path / "a.hqtmq", tmp_path / "b.hqtmq"
        save_hybrid(select_greedy(model, pool, calib), p1)
        save_hybrid(select_greedy(model, pool, calib), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_model_file_rejected_as_hybrid(self, model, tmp_path):
        from hquant.model import save_model
        p = tmp_path / "m.hqtm"
        save_model(model, p)
        with pytest.raises(HeaderMismatch):
            load_hybrid(p)
