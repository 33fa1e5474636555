"""FP vs uniform methods vs the hybrid, with leave-one-out pools.

Reproduces the comparison-table experiment at desk scale: perplexity of the
full-precision model, each method applied uniformly, the full-pool hybrid,
and each leave-one-out hybrid - all on an eval set disjoint from
calibration.
"""

from hquant import MethodConfig, QuantConfig
from hquant.evalsuite import compare_methods, comparison_csv
from hquant.toys import chain_calibration_pair, predictive_model

model, chain = predictive_model(seed=4)
calib, eval_set = chain_calibration_pair(chain, n_calib=12, n_eval=24,
                                         calib_len=64, eval_len=128, seed=4)

pool = [MethodConfig(kind=k, qcfg=QuantConfig(bits=3, group_size=32))
        for k in ("gptq", "awq", "smoothquant")]
table = compare_methods(model, pool, calib, eval_set)

print(f"{'row':<26} {'ppl':>10} {'eval cka':>10} {'sel cka':>10}")
for row in table["rows"]:
    sel = f"{row['mean_selection_cka']:.4f}" if row["mean_selection_cka"] else "     -"
    print(f"{row['name']:<26} {row['ppl']:>10.2f} {row['mean_eval_cka']:>10.4f} {sel:>10}")

print("\nhybrid layer assignment:",
      next(r["selection"] for r in table["rows"] if r["name"] == "hybrid:full"))
print("\nCSV form:\n" + comparison_csv(table))
