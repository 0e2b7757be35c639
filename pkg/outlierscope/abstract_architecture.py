from abc import ABCMeta, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from outlierscope.taps import GATED_MLP
from outlierscope.utils import CheckpointError

LAYERNORM = 'layernorm'
RMSNORM = 'rmsnorm'

# Canonical per-layer parameter names. Every matrix is stored as
# [out_features, in_features] so rows are output channels.
ATTENTION_WEIGHTS = ('q_proj', 'k_proj', 'v_proj', 'o_proj')
GATED_WEIGHTS = ('gate_proj', 'up_proj', 'down_proj')
STANDARD_WEIGHTS = ('fc_in', 'down_proj')
NORMS = ('attn_norm', 'ffn_norm')


@dataclass(frozen=True)
class ArchitectureConfig:
    """Shape and numerics of a decoder-only checkpoint, family-neutral."""

    family: str
    model_type: str
    layer_count: int
    hidden_dim: int
    intermediate_dim: int
    head_count: int
    kv_head_count: int
    head_dim: int
    vocab_size: int
    max_sequence_length: int
    ffn_kind: str
    norm_kind: str
    norm_eps: float
    activation: str
    rope_theta: Optional[float] = None
    rope_scaling: Optional[dict] = field(default=None, compare=False)
    tie_embeddings: bool = False

    def to_dict(self):
        return asdict(self)


class Architecture(metaclass=ABCMeta):
    """Abstract interface for one family of decoder-only checkpoints.

    A family knows how to read its checkpoint configuration, how to rename
    and reshape its tensors into the canonical per-layer parameter map the
    executor runs on, and the few numerical pieces that differ between
    families: normalization, positional encoding and the FFN activation.

    Everything else (the tap-point forward pass itself) lives in the
    executor, so tap semantics are identical for every family.
    """

    family = None

    @classmethod
    @abstractmethod
    def config_from_hf(cls, hf_config):
        """Build an ArchitectureConfig from a `transformers` config object.

        :param transformers.PretrainedConfig hf_config: checkpoint config
        :rtype: ArchitectureConfig
        """
        pass

    @classmethod
    @abstractmethod
    def canonical_parameters(cls, state_dict, config):
        """Rename/reshape checkpoint tensors into the canonical map.

        Keys of the result are ``embed_tokens``, ``final_norm.weight``,
        ``final_norm.bias`` (layernorm only), ``lm_head``, optionally
        ``embed_positions``, and ``layers.{i}.{name}.weight`` /
        ``layers.{i}.{name}.bias`` for the canonical names.

        :param dict state_dict: checkpoint name -> tensor map
        :param ArchitectureConfig config:
        :rtype: dict
        :raises CheckpointError: if a required tensor is missing
        """
        pass

    @classmethod
    def embed(cls, params, tokens, config):
        """Return the residual stream entering layer 0, [tokens, hidden]."""
        return F.embedding(tokens, params['embed_tokens'])

    @classmethod
    def rotate(cls, q, k, positions, config):
        """Apply positional rotation to per-head q/k; identity by default.

        :param torch.Tensor q: [heads, tokens, head_dim]
        :param torch.Tensor k: [kv_heads, tokens, head_dim]
        :param torch.Tensor positions: [tokens] position ids
        """
        return q, k

    @classmethod
    def normalize(cls, x, weight, bias, config):
        """Apply the family's normalization (standardize, then rescale)."""
        if config.norm_kind == LAYERNORM:
            return F.layer_norm(x, (x.shape[-1],), weight, bias,
                                config.norm_eps)
        input_dtype = x.dtype
        hidden = x.to(torch.float32)
        variance = hidden.pow(2).mean(-1, keepdim=True)
        hidden = hidden * torch.rsqrt(variance + config.norm_eps)
        return weight * hidden.to(input_dtype)

    @classmethod
    def activate(cls, x, config):
        """Apply the FFN activation function."""
        if config.activation in ('gelu_new', 'gelu_pytorch_tanh',
                                 'gelu_fast'):
            return F.gelu(x, approximate='tanh')
        if config.activation == 'gelu':
            return F.gelu(x)
        if config.activation == 'relu':
            return F.relu(x)
        return F.silu(x)

    @classmethod
    def ffn_weights(cls, config):
        """Return the canonical FFN matrix names for this config."""
        if config.ffn_kind == GATED_MLP:
            return GATED_WEIGHTS
        return STANDARD_WEIGHTS


def require_tensor(state_dict, key):
    """Fetch a checkpoint tensor or raise CheckpointError naming it."""
    try:
        return state_dict[key]
    except KeyError:
        raise CheckpointError('checkpoint is missing tensor `{0}`'.format(key))


def strip_prefix(state_dict, prefixes):
    """Drop the first matching key prefix (e.g. 'transformer.') everywhere."""
    result = {}
    for key, value in state_dict.items():
        for prefix in prefixes:
            if key.startswith(prefix):
                key = key[len(prefix):]
                break
        result[key] = value
    return result

