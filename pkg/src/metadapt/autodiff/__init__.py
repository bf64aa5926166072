from metadapt.autodiff.tensor import (
    DTYPE,
    Function,
    Tape,
    Tensor,
    as_tensor,
    backward,
    concat,
    einsum,
    grad,
    grad_mode,
    is_grad_enabled,
    no_grad,
    ones,
    solve,
    zeros,
)
from metadapt.autodiff.functional import (
    RunningMoments,
    batch_norm,
    clamp_min,
    conv2d,
    cross_entropy,
    global_avg_pool,
    leaky_relu,
    linear,
    log_softmax,
    max_pool_downsample,
    pool2d,
    relu,
    softmax,
)
from metadapt.autodiff.gradcheck import GradCheckResult, grad_check

__all__ = [
    "DTYPE",
    "Function",
    "GradCheckResult",
    "RunningMoments",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "batch_norm",
    "clamp_min",
    "concat",
    "conv2d",
    "einsum",
    "cross_entropy",
    "global_avg_pool",
    "grad",
    "grad_check",
    "grad_mode",
    "is_grad_enabled",
    "leaky_relu",
    "linear",
    "log_softmax",
    "max_pool_downsample",
    "no_grad",
    "ones",
    "pool2d",
    "relu",
    "softmax",
    "solve",
    "zeros",
]
