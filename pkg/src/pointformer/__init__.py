"""Differentiable point-cloud transformer operators.

Building blocks: a small numpy autodiff core (`tensor`), geometric
primitives with a compiled fast path (`points`, `kernels`), multi-head
attention with relative positional encoding and a low-rank variant
(`attention`), the local/global/cross blocks with centroid refinement
(`blocks`), and the multi-scale backbone assembly (`backbone`).
"""

from .attention import (
    AttentionParams,
    AttentionRecord,
    LinformerProjection,
    linformer_project,
    multi_head_attention,
    relative_pe,
    transblock,
)
from .backbone import (
    Backbone,
    BackboneConfig,
    FPStageConfig,
    build,
    load_config,
    overfit,
    overfit_config,
    synthetic_scene,
)
from .blocks import (
    BlockConfig,
    BlockOutput,
    global_transformer,
    local_global_transformer,
    local_transformer,
    pointformer_block,
    refine_centroids,
)
from .errors import ConfigError, DimensionError
from .points import (
    NeighborhoodIndex,
    PointCloud,
    ball_query,
    farthest_point_sample,
    feature_propagation,
    group_features,
)
from .tensor import (
    FeedForward,
    LinearLayer,
    ParamStore,
    Tensor,
    backward,
    matmul,
    no_grad,
    softmax_rows,
)

__version__ = "0.1.0"
