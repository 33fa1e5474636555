"""hquant: layer-wise heterogeneous post-training quantization toolkit.

Quantizes each decoder layer of a toy Llama-style transformer with a pool of
PTQ methods (RTN, GPTQ, AWQ, SmoothQuant), scores every candidate against
full-precision activations with linear CKA, and assembles the winning layers
into a method-heterogeneous hybrid model. Ships the diagnostics around that
pipeline: restoration-matrix fitting, block-granularity and exhaustive-search
ablations, a bit-heterogeneous baseline, and a perplexity harness.
"""

__version__ = "0.1.0"

from .quant_codec import GroupQuantTensor, QuantConfig, dequantize, quantize_rtn
from .quant_methods import MethodConfig, QuantizedLayer
from .cka import CkaScore, linear_cka
from .model import (
    LayerActivations,
    LayerWeights,
    TransformerModel,
    forward_layer,
    forward_model,
    load_model,
    random_model,
    save_model,
)
from .selector import (
    HybridModel,
    SelectionReport,
    SelectionSettings,
    load_hybrid,
    mixed_bit_baseline,
    save_hybrid,
    select_blockwise,
    select_exhaustive,
    select_greedy,
)

__all__ = [
    "__version__",
    "CkaScore", "GroupQuantTensor", "HybridModel", "LayerActivations",
    "LayerWeights", "MethodConfig", "QuantConfig", "QuantizedLayer",
    "SelectionReport", "SelectionSettings", "TransformerModel",
    "dequantize", "forward_layer", "forward_model", "linear_cka",
    "load_hybrid", "load_model", "mixed_bit_baseline", "quantize_rtn",
    "random_model", "save_hybrid", "save_model", "select_blockwise",
    "select_exhaustive", "select_greedy",
]
