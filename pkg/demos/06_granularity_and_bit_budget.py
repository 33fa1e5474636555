"""Two ablations: selection granularity and method- vs bit-heterogeneity.

Part 1 shares one method across blocks of 1/2/4 consecutive layers; finer
granularity should not hurt. Part 2 compares the 4-bit method-heterogeneous
hybrid against a bit-heterogeneous GPTQ baseline holding the same average
4-bit budget (sensitive layers promoted to 8 bits, insensitive demoted to
2). Under a tight budget the 2-bit layers are what break the baseline.
"""

import numpy as np

from hquant import MethodConfig, QuantConfig
from hquant.evalsuite import perplexity
from hquant.selector import mixed_bit_baseline, select_blockwise, select_greedy
from hquant.toys import chain_calibration_pair, predictive_model

model, chain = predictive_model(seed=8)
calib, eval_set = chain_calibration_pair(chain, n_calib=12, n_eval=24,
                                         calib_len=64, eval_len=128, seed=8)


def pool(bits):
    return [MethodConfig(kind=k, qcfg=QuantConfig(bits=bits, group_size=32))
            for k in ("gptq", "awq", "smoothquant")]


print("== granularity (3-bit pool) ==")
for block_k in (1, 2, 4, 8):
    hybrid = select_blockwise(model, pool(3), calib.tokens(), block_k=block_k)
    sel = [r.chosen for r in hybrid.report.records]
    ppl = perplexity(hybrid, eval_set).ppl
    print(f"block-{block_k}: ppl {ppl:>8.2f}  selection {sel}")

print("\n== method- vs bit-heterogeneity at an average 4-bit budget ==")
hybrid4 = select_greedy(model, pool(4), calib.tokens())
mixed = mixed_bit_baseline(
    model, calib.tokens(), avg_bits=4.0, bit_options=(2, 4, 8),
    base_mcfg=MethodConfig(kind="gptq", qcfg=QuantConfig(bits=4, group_size=32)))

cfg = mixed.report.config
print(f"mixed-bit assignment: {cfg['bit_assignment']} "
      f"(mean {cfg['mean_bits']:.3f} bits)")
print(f"method-heterogeneous hybrid (uniform 4-bit): "
      f"ppl {perplexity(hybrid4, eval_set).ppl:.2f}")
print(f"bit-heterogeneous GPTQ baseline:             "
      f"ppl {perplexity(mixed, eval_set).ppl:.2f}")
print(f"full precision:                              "
      f"ppl {perplexity(model, eval_set).ppl:.2f}")
