"""Rate-distortion KV-cache compression.

Token and channel distortion weights come from attention statistics; bit-widths
in {0, 2, 4, 8, 16} are chosen by a Lagrangian knapsack under a bit budget and
realized in a packed three-zone layout.
"""

__version__ = "0.1.0"

from .allocator import (
    ContinuousAllocation,
    DiscreteAllocation,
    DualBound,
    SolverConfig,
    dual_bound,
    mckp_bisect,
    mckp_bruteforce,
    objective,
    per_unit_argmin,
    waterfill_continuous,
)
from .cache_model import (
    AttentionMatrix,
    CacheShape,
    KVCache,
    ProbeConfig,
    attention_output,
    attention_probe,
    gen_synthetic_cache,
    load_cache,
    save_cache,
)
from .pipeline import BudgetSpec, HeadAllocation, allocate_head, allocate_model, head_budget
from .quantizer import BitSet, DistortionTable, QuantParams, calibrate_epsilon
from .trizone import TriZoneCache, append_new_token, build_trizone, packed_decode_step
from .weights import WeightVector, channel_weights, token_weights, tv_after_evict

__all__ = [name for name in dir() if not name.startswith("_")]
