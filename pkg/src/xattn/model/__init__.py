from .encoder import (
    SHARED_KEY,
    AttentionWeights,
    ForwardTrace,
    XattnEncoder,
    dual_query_attention,
    is_bias,
    pair_key,
    qcross_name,
)
