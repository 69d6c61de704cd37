"""moefuse: compose expert checkpoints into MoE models and trace their routing.

The package is organized around one flow:

1. ``checkpoint``  -- load/save dense and composed models (two-file format).
2. ``composer``    -- merge expert checkpoints under traditional, btx, or bts.
3. ``model``       -- run the composed model; every routed site emits a
                      RouteDecision.
4. ``stitch``      -- bts execution: frozen hub + experts fused by stitch layers.
5. ``training``    -- losses and analytic gradients for routers/stitch tensors.
6. ``trace``       -- per-token aggregation, utilization, JSON export.
7. ``cli``/``service`` -- command line and HTTP surfaces.
"""

from .checkpoint import ArchInfo, Checkpoint, Manifest, MoeInfo, build_checkpoint, load, save
from .composer import (
    CompositionReport,
    Diagnostic,
    ExpertSpec,
    MoeConfig,
    compose,
    selector_match,
    validate,
)
from .model import MoeModel, ffn_btx, ffn_traditional, forward, gate, generate, random_dense_checkpoint
from .stitch import (
    BtsModel,
    StitchLayer,
    StitchTrace,
    bts_forward,
    stitch_experts_into_hub,
    stitch_hub_into_experts,
    stitch_sites,
)
from .tensor import (
    Tensor,
    add,
    argmax,
    gaussian_init,
    matmul,
    mul,
    rms_norm,
    scale,
    sigmoid,
    silu,
    softmax,
    top_k_indices,
)
from .tokenizer import ByteTokenizer
from .trace import (
    RouteDecision,
    RoutingTrace,
    TokenSummary,
    aggregate,
    expert_utilization,
    export_trace,
)
from .training import (
    LossBreakdown,
    batch_loss,
    load_balance_loss,
    numerical_grads,
    router_grads,
    stitch_grads,
    train,
)

__all__ = [
    "ArchInfo", "Checkpoint", "Manifest", "MoeInfo", "build_checkpoint", "load", "save",
    "CompositionReport", "Diagnostic", "ExpertSpec", "MoeConfig", "compose",
    "selector_match", "validate",
    "MoeModel", "ffn_btx", "ffn_traditional", "forward", "gate", "generate",
    "random_dense_checkpoint",
    "BtsModel", "StitchLayer", "StitchTrace", "bts_forward",
    "stitch_experts_into_hub", "stitch_hub_into_experts", "stitch_sites",
    "Tensor", "add", "argmax", "gaussian_init", "matmul", "mul", "rms_norm",
    "scale", "sigmoid", "silu", "softmax", "top_k_indices",
    "ByteTokenizer",
    "RouteDecision", "RoutingTrace", "TokenSummary", "aggregate",
    "expert_utilization", "export_trace",
    "LossBreakdown", "batch_loss", "load_balance_loss", "numerical_grads",
    "router_grads", "stitch_grads", "train",
]

__version__ = "0.1.0"
