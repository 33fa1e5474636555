"""Command-line surface tests: determinism, parity with the library, exit codes."""

import hashlib
import json

import numpy as np
import pytest

from hquant.cli import main
from hquant.evalsuite import synth_calibration, perplexity
from hquant.model import load_model, save_model
from hquant.quant_codec import QuantConfig
from hquant.quant_methods import MethodConfig
from hquant.selector import load_hybrid, uniform_quantize

from conftest import tiny_model


def run(args):
    return main([str(a) for a in args])


def filehash(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


@pytest.fixture()
def model_file(tmp_path):
    p = tmp_path / "m.hqtm"
    assert run(["gen-model", "--layers", 3, "--dim", 32, "--ffdim", 96,
                "--heads", 4, "--vocab", 64, "--seed", 3, "--out", p]) == 0
    return p


QUANT_ARGS = ["--bits", 3, "--group", 32, "--calib", "synthetic",
              "--calib-n", 4, "--calib-len", 32, "--seed", 0]


class TestGenModel:
    def test_deterministic_file_hash(self, tmp_path):
        a, b = tmp_path / "a.hqtm", tmp_path / "b.hqtm"
        for p in (a, b):
            assert run(["gen-model", "--layers", 2, "--dim", 16, "--ffdim", 48,
                        "--heads", 2, "--vocab", 32, "--seed", 11, "--out", p]) == 0
        assert filehash(a) == filehash(b)

    def test_defaults_match_model_module(self, tmp_path):
        p = tmp_path / "d.hqtm"
        assert run(["gen-model", "--out", p]) == 0
        m = load_model(p)
        assert (m.n_layers, m.d_model, m.d_ff, m.n_heads, m.vocab) == (8, 64, 172, 4, 256)

    def test_generated_model_forwards(self, tmp_path, capsys):
        p = tmp_path / "s.hqtm"
        assert run(["gen-model", "--layers", 2, "--dim", 16, "--ffdim", 48,
                    "--heads", 2, "--vocab", 64, "--seed", 0, "--out", p]) == 0
        m = load_model(p)
        cal = synth_calibration(64, n_sequences=2, seq_len=16, seed=0)
        res = perplexity(m, cal)
        assert np.isfinite(res.ppl)


class TestQuantize:
    def test_single_method_pool_reproduces_uniform(self, model_file, tmp_path):
        out = tmp_path / "h.hqtmq"
        assert run(["quantize", "--model", model_file, "--pool", "gptq",
                    *QUANT_ARGS, "--out", out]) == 0
        hybrid = load_hybrid(out)
        model = load_model(model_file)
        cal = synth_calibration(model.vocab, n_sequences=4, seq_len=32, seed=0)
        uniform = uniform_quantize(
            model, MethodConfig(kind="gptq", qcfg=QuantConfig(bits=3, group_size=32)),
            cal.tokens())
        for hl, ul in zip(hybrid.layers, uniform):
            for name in hl.projections:
                assert np.array_equal(hl.projections[name].codes,
                                      ul.projections[name].codes)

    def test_rerun_same_seed_identical(self, model_file, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{tag}.hqtmq"
            rep = tmp_path / f"{tag}.report.json"
            assert run(["quantize", "--model", model_file, "--pool",
                        "gptq,smoothquant", *QUANT_ARGS, "--out", out,
                        "--report", rep]) == 0
            outs.append((out, rep))
        assert filehash(outs[0][0]) == filehash(outs[1][0])
        ha = json.loads(outs[0][1].read_text())["content_hash"]
        hb = json.loads(outs[1][1].read_text())["content_hash"]
        assert ha == hb

    def test_block_k_one_matches_default(self, model_file, tmp_path):
        a, b = tmp_path / "a.hqtmq", tmp_path / "b.hqtmq"
        assert run(["quantize", "--model", model_file, "--pool", "gptq,rtn",
                    *QUANT_ARGS, "--out", a]) == 0
        assert run(["quantize", "--model", model_file, "--pool", "gptq,rtn",
                    *QUANT_ARGS, "--block-k", 1, "--out", b]) == 0
        ha = load_hybrid(a)
        hb = load_hybrid(b)
        for la, lb in zip(ha.layers, hb.layers):
            for name in la.projections:
                assert np.array_equal(la.projections[name].codes,
                                      lb.projections[name].codes)

    def test_csv_outputs_written(self, model_file, tmp_path):
        out = tmp_path / "h.hqtmq"
        rep = tmp_path / "r" / "report.json"
        assert run(["quantize", "--model", model_file, "--pool", "gptq,smoothquant",
                    *QUANT_ARGS, "--out", out, "--report", rep]) == 0
        sel = (tmp_path / "r" / "selection.csv").read_text()
        assert sel.splitlines()[0] == "layer,method,score_gptq,score_smoothquant"
        assert len(sel.strip().splitlines()) == 4  # header + 3 layers
        cka = (tmp_path / "r" / "cka_layers.csv").read_text()
        assert cka.splitlines()[0] == "layer,method,cka"

    def test_unknown_method_exits_2(self, model_file, tmp_path, capsys):
        assert run(["quantize", "--model", model_file, "--pool", "magic",
                    *QUANT_ARGS, "--out", tmp_path / "x.hqtmq"]) == 2

    def test_missing_model_exits_3(self, tmp_path):
        assert run(["quantize", "--model", tmp_path / "none.hqtm", "--pool", "gptq",
                    *QUANT_ARGS, "--out", tmp_path / "x.hqtmq"]) == 3


class TestEval:
    def test_uniform_logit_fixture_gives_vocab_ppl(self, tmp_path, capsys):
        model = tiny_model(seed=3, vocab=64)
        model.lm_head = np.zeros_like(model.lm_head)
        p = tmp_path / "z.hqtm"
        save_model(model, p)
        out = tmp_path / "eval.json"
        assert run(["eval", "--model", p, "--data", "synthetic", "--eval-n", 2,
                    "--eval-len", 16, "--seed", 0, "--out", out]) == 0
        res = json.loads(out.read_text())
        assert abs(res["ppl"] - 64.0) < 1e-9

    def test_fp_self_reference_cka_all_one(self, model_file, tmp_path):
        out = tmp_path / "eval.json"
        assert run(["eval", "--model", model_file, "--fp-ref", model_file,
                    "--data", "synthetic", "--eval-n", 2, "--eval-len", 16,
                    "--seed", 0, "--out", out]) == 0
        res = json.loads(out.read_text())
        assert all(abs(v - 1.0) < 1e-9 for v in res["per_layer_cka"])

    def test_matches_library_perplexity(self, model_file, tmp_path):
        out = tmp_path / "eval.json"
        assert run(["eval", "--model", model_file, "--data", "synthetic",
                    "--eval-n", 3, "--eval-len", 24, "--seed", 5, "--out", out]) == 0
        cli_ppl = json.loads(out.read_text())["ppl"]
        model = load_model(model_file)
        ev = synth_calibration(model.vocab, n_sequences=3, seq_len=24,
                               seed=5 + 7919, skew=3.0)
        assert cli_ppl == perplexity(model, ev).ppl

    def test_requires_exactly_one_target(self, model_file, tmp_path):
        assert run(["eval", "--out", tmp_path / "e.json"]) == 2


class TestCompareRestoreOracleMixedBit:
    def test_compare_single_method_two_rows(self, model_file, tmp_path):
        assert run(["compare", "--model", model_file, "--pool", "gptq", *QUANT_ARGS,
                    "--data", "synthetic", "--eval-n", 2, "--eval-len", 16,
                    "--out-dir", tmp_path]) == 0
        table = json.loads((tmp_path / "comparison.json").read_text())
        assert len(table["rows"]) == 2
        assert (tmp_path / "comparison.csv").exists()

    def test_oracle_guard_exits_2(self, tmp_path):
        p = tmp_path / "deep.hqtm"
        assert run(["gen-model", "--layers", 13, "--dim", 16, "--ffdim", 48,
                    "--heads", 2, "--vocab", 32, "--seed", 0, "--out", p]) == 0
        assert run(["oracle", "--model", p, "--pool", "gptq,rtn", *QUANT_ARGS,
                    "--out-dir", tmp_path]) == 2

    def test_oracle_small_search(self, tmp_path):
        p = tmp_path / "m.hqtm"
        assert run(["gen-model", "--layers", 2, "--dim", 16, "--ffdim", 48,
                    "--heads", 2, "--vocab", 64, "--seed", 1, "--out", p]) == 0
        assert run(["oracle", "--model", p, "--pool", "gptq,rtn", *QUANT_ARGS,
                    "--out-dir", tmp_path]) == 0
        res = json.loads((tmp_path / "oracle.json").read_text())
        assert len(res["table"]) == 4
        assert res["greedy_rank"] >= 1

    def test_restore_planted_corruption(self, tmp_path):
        from hquant.quant_methods import from_dense
        from hquant.selector import save_hybrid
        from test_restoration import manual_hybrid

        model = tiny_model(seed=21, n_layers=3, d_model=32, d_ff=96, n_heads=4,
                           vocab=64)
        mp = tmp_path / "m.hqtm"
        save_model(model, mp)
        rng = np.random.default_rng(0)
        k = rng.normal(size=(32, 32)) / 8 + np.eye(32)
        layers = [from_dense(l) for l in model.layers]
        layers[1].set_dense_override("w_down", model.layers[1].w_down @ np.linalg.inv(k))
        hp = tmp_path / "h.hqtmq"
        save_hybrid(manual_hybrid(model, layers), hp)

        assert run(["restore", "--model", mp, "--hybrid", hp, "--calib", "synthetic",
                    "--calib-n", 8, "--calib-len", 32, "--seed", 0,
                    "--out-dir", tmp_path]) == 0
        res = json.loads((tmp_path / "restoration.json").read_text())
        assert res["layer"] == 1
        assert res["cka_after"] >= 1 - 1e-6
        csv = (tmp_path / "cka_restore.csv").read_text()
        assert csv.splitlines()[0] == "layer,cka_before,cka_after"

    def test_mixed_bit_accounting(self, tmp_path):
        p = tmp_path / "m.hqtm"
        assert run(["gen-model", "--layers", 4, "--dim", 16, "--ffdim", 48,
                    "--heads", 2, "--vocab", 64, "--seed", 2, "--out", p]) == 0
        assert run(["mixed-bit", "--model", p, "--avg-bits", 4, "--bit-options",
                    "2,4,8", "--group", 32, "--calib", "synthetic", "--calib-n", 4,
                    "--calib-len", 16, "--seed", 0, "--out-dir", tmp_path]) == 0
        rep = json.loads((tmp_path / "mixed_bit.json").read_text())["report"]
        assert rep["config"]["mean_bits"] <= 4.01
        assert len(rep["config"]["bit_assignment"]) == 4


class TestHelp:
    def test_help_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for cmd in ("gen-model", "quantize", "eval", "compare", "restore",
                    "oracle", "mixed-bit"):
            assert cmd in out

    def test_quantize_help_documents_flags(self, capsys):
        with pytest.raises(SystemExit):
            main(["quantize", "--help"])
        out = capsys.readouterr().out
        for flag in ("--pool", "--bits", "--group", "--calib", "--block-k",
                     "--cka-point", "--threads", "--act-bits"):
            assert flag in out
