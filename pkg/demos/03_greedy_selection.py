"""The core pipeline: per-layer competitive quantization with CKA scoring.

Builds a toy model whose layers deliberately differ in weight statistics
(compact Gaussian / heavy-tailed / hot-channel), runs the greedy selection
over the GPTQ + AWQ + SmoothQuant pool at 3 bits, and prints the per-layer
score table - the same data `hquant quantize` writes to selection.csv.
No single method wins everywhere, which is the point.
"""

import numpy as np

from hquant import MethodConfig, QuantConfig, SelectionSettings, select_greedy
from hquant.toys import predictive_model, sample_chain

model, chain = predictive_model(seed=2)
calib = sample_chain(chain, n_sequences=12, seq_len=64, seed=2)

pool = [MethodConfig(kind=k, qcfg=QuantConfig(bits=3, group_size=32))
        for k in ("gptq", "awq", "smoothquant")]
hybrid = select_greedy(model, pool, calib.tokens(),
                       SelectionSettings(cka_point="ffn_pre_res"))

labels = [p["label"] for p in hybrid.report.pool]
print(f"{'layer':>5} {'chosen':>12} " + " ".join(f"{m:>12}" for m in labels))
for rec in hybrid.report.records:
    scores = " ".join(f"{rec.scores[m].value:>12.6f}" for m in labels)
    print(f"{rec.layer:>5} {rec.chosen:>12} {scores}")

print(f"\ncandidate evaluations: {hybrid.report.candidate_evaluations} "
      f"(= {model.n_layers} layers x {len(pool)} methods)")
print(f"report content hash:   {hybrid.report.content_hash()[:16]}...")

from hquant.selector import verify_report  # noqa: E402

v = verify_report(model, hybrid, calib.tokens())
print(f"post-hoc recomputation reproduces every argmax: {v['argmax_ok']}")
