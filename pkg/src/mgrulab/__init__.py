"""Desk-scale lab for update-gated ReLU recurrent cells.

Covers the three cell variants (plain, input-projected, and
input-projected with temporal-splice context), configurable batch-norm
placement on the gate and candidate paths, sequence training with BPTT,
streaming-latency arithmetic, and gate-activation diagnostics.
"""

from .cells import (
    BNConfig,
    CellBNMode,
    GateBNMode,
    MGRUIPParams,
    MGRUParams,
    mgru_backward,
    mgru_step,
    mgruip_backward,
    mgruip_ctx_step,
    mgruip_step,
)
from .context import (
    ContextParseError,
    ContextSpec,
    parse_context_setting,
    parse_plan_string,
    splice,
    splice_future,
    splice_indices,
    splice_indices_future,
)
from .network import (
    ConfigError,
    LatencyModel,
    Model,
    ModelConfig,
    ReceptiveField,
    backward,
    backward_from_logits,
    forward,
    init_model,
    load_checkpoint,
    model_latency_ms,
    named_parameters,
    receptive_field,
    save_checkpoint,
)
from .numerics import (
    BatchSizeError,
    BNState,
    ShapeError,
    batch_norm,
    bn_state,
    matmul,
    relu,
    sigmoid,
    softmax,
)
from .training import (
    Dataset,
    EpochMetrics,
    GradCheckReport,
    NonFiniteError,
    TaskSpec,
    TraceRecord,
    TrainConfig,
    evaluate,
    gen_task,
    grad_check,
    grad_check_cell,
    grad_check_model,
    trace_gate,
    train,
)

__version__ = "0.1.0"
