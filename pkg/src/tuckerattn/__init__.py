"""Tucker-factored multi-head attention in numpy: reference forwards, variants, conversions and tooling."""

from .accounting import GPT2, ModelDims, account, param_count
from .attention_reference import AttentionTensorPair, MhaWeights, mha_forward, stack_attention_tensors, tensor_mha_forward
from .conversion import mha_to_gqa, mha_to_mla, mha_to_tucker, spectrum, tucker_from_pair
from .grad_training import Adam, ToyConfig, gradient_check, toy_train, tucker_backward
from .rope import RopeConfig, latent_rope_scores, rope_matrix
from .streaming_softmax import naive_attention, streaming_attention
from .tensor_core import fold, hosvd, matricize, mode_product, numerical_rank, svd, truncated_svd
from .tensor_io import load_container, load_weights, save_container, save_weights
from .tucker import KvCache, TuckerAttentionParams, decode_step, materialize, random_params, tucker_forward
from .variants import GqaWeights, MlaWeights, gqa_forward, mla_forward_fused, mla_forward_unfused, mla_fuse

__version__ = "0.1.0"

__all__ = [
    "account",
    "Adam",
    "AttentionTensorPair",
    "decode_step",
    "fold",
    "GPT2",
    "gqa_forward",
    "GqaWeights",
    "gradient_check",
    "hosvd",
    "KvCache",
    "latent_rope_scores",
    "load_container",
    "load_weights",
    "materialize",
    "matricize",
    "mha_forward",
    "mha_to_gqa",
    "mha_to_mla",
    "mha_to_tucker",
    "MhaWeights",
    "mla_forward_fused",
    "mla_forward_unfused",
    "mla_fuse",
    "MlaWeights",
    "mode_product",
    "ModelDims",
    "naive_attention",
    "numerical_rank",
    "param_count",
    "random_params",
    "rope_matrix",
    "RopeConfig",
    "save_container",
    "save_weights",
    "spectrum",
    "stack_attention_tensors",
    "streaming_attention",
    "svd",
    "tensor_mha_forward",
    "toy_train",
    "ToyConfig",
    "truncated_svd",
    "tucker_backward",
    "tucker_forward",
    "tucker_from_pair",
    "TuckerAttentionParams",
]
