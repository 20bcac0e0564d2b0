"""Forward and backward passes for every layer primitive."""

from .basic import (
    global_avg_pool,
    global_avg_pool_backward,
    linear,
    linear_backward,
    ordered_matmul,
    relu,
    relu_backward,
)
from .composite import (
    FORWARD_METHODS,
    FbsCache,
    FbsConvLayer,
    GateRecord,
    PlainConvLayer,
    fbs_backward,
    fbs_forward,
    plain_backward,
    plain_forward,
)
from .conv import ConvParams, conv2d_backward, conv2d_dense, conv2d_sparse, conv_output_size
from .gating import (
    Reducer,
    SaliencyParams,
    kept_count,
    saliency_g,
    saliency_g_backward,
    saliency_preactivation,
    subsample_ss,
    subsample_ss_backward,
    wta,
    wta_backward,
    wta_indices,
    wta_mask,
)
from .norm import BnCache, BnParams, batch_norm, batch_norm_backward
