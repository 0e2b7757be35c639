import math

import torch

from outlierscope.abstract_architecture import (Architecture,
                                                ArchitectureConfig,
                                                ATTENTION_WEIGHTS,
                                                GATED_WEIGHTS, RMSNORM,
                                                require_tensor, strip_prefix)
from outlierscope.taps import GATED_MLP
from outlierscope.utils import UnsupportedArchitectureError


class LlamaArchitecture(Architecture):
    """LLaMA style decoders: gated MLP, RMSNorm, rotary positions.

    Mistral and Qwen2 checkpoints share the layout; Qwen2 adds biases to
    the q/k/v projections, which are picked up when present. Grouped query
    attention is expressed through `kv_head_count`.
    """

    family = 'llama'

    @classmethod
    def config_from_hf(cls, hf_config):
        hidden = hf_config.hidden_size
        heads = hf_config.num_attention_heads
        kv_heads = getattr(hf_config, 'num_key_value_heads', None) or heads
        head_dim = getattr(hf_config, 'head_dim', None) or hidden // heads

        rope_scaling = getattr(hf_config, 'rope_scaling', None)
        if rope_scaling:
            rope_type = rope_scaling.get('rope_type',
                                         rope_scaling.get('type'))
            if rope_type not in ('default', 'linear', 'llama3'):
                raise UnsupportedArchitectureError(
                    'rope scaling type `{0}` is not supported'.format(
                        rope_type))
            rope_scaling = dict(rope_scaling, rope_type=rope_type)

        return ArchitectureConfig(
            family=cls.family,
            model_type=hf_config.model_type,
            layer_count=hf_config.num_hidden_layers,
            hidden_dim=hidden,
            intermediate_dim=hf_config.intermediate_size,
            head_count=heads,
            kv_head_count=kv_heads,
            head_dim=head_dim,
            vocab_size=hf_config.vocab_size,
            max_sequence_length=hf_config.max_position_embeddings,
            ffn_kind=GATED_MLP,
            norm_kind=RMSNORM,
            norm_eps=hf_config.rms_norm_eps,
            activation=getattr(hf_config, 'hidden_act', 'silu'),
            rope_theta=float(getattr(hf_config, 'rope_theta', 10000.0)),
            rope_scaling=rope_scaling,
            tie_embeddings=bool(getattr(hf_config, 'tie_word_embeddings',
                                        False)))

    @classmethod
    def canonical_parameters(cls, state_dict, config):
        sd = strip_prefix(state_dict, ('model.',))

        params = {
            'embed_tokens': require_tensor(sd, 'embed_tokens.weight'),
            'final_norm.weight': require_tensor(sd, 'norm.weight'),
        }
        if 'lm_head.weight' in sd:
            params['lm_head'] = sd['lm_head.weight']
        elif config.tie_embeddings:
            params['lm_head'] = params['embed_tokens']
        else:
            params['lm_head'] = require_tensor(sd, 'lm_head.weight')

        for i in range(config.layer_count):
            src = 'layers.{0}.'.format(i)
            dst = 'layers.{0}.'.format(i)

            params[dst + 'attn_norm.weight'] = require_tensor(
                sd, src + 'input_layernorm.weight')
            params[dst + 'ffn_norm.weight'] = require_tensor(
                sd, src + 'post_attention_layernorm.weight')

            for name in ATTENTION_WEIGHTS:
                key = src + 'self_attn.' + name
                params[dst + name + '.weight'] = require_tensor(
                    sd, key + '.weight')
                if key + '.bias' in sd:
                    params[dst + name + '.bias'] = sd[key + '.bias']

            for name in GATED_WEIGHTS:
                params[dst + name + '.weight'] = require_tensor(
                    sd, src + 'mlp.' + name + '.weight')

        return params

    @classmethod
    def rotate(cls, q, k, positions, config):
        inv_freq = rope_inverse_frequencies(config).to(q.device)
        freqs = positions.to(torch.float32)[:, None] * inv_freq[None, :]
        emb = torch.cat((freqs, freqs), dim=-1)
        cos = emb.cos().to(q.dtype)
        sin = emb.sin().to(q.dtype)
        return (q * cos + rotate_half(q) * sin,
                k * cos + rotate_half(k) * sin)


def rotate_half(x):
    """Rotate half the hidden dims of the input."""
    half = x.shape[-1] // 2
    return torch.cat((-x[..., half:], x[..., :half]), dim=-1)


def rope_inverse_frequencies(config):
    """Return the rotary inverse frequencies, [head_dim / 2], float32.

    Linear scaling divides every frequency by `factor`. The llama3 scheme
    leaves high frequencies alone, divides low ones by `factor` and
    interpolates smoothly in between.
    """
    dim = config.head_dim
    inv_freq = 1.0 / (config.rope_theta ** (
        torch.arange(0, dim, 2, dtype=torch.int64).to(torch.float32) / dim))

    scaling = config.rope_scaling
    if not scaling or scaling['rope_type'] == 'default':
        return inv_freq

    factor = float(scaling['factor'])
    if scaling['rope_type'] == 'linear':
        return inv_freq / factor

    low_freq_factor = float(scaling['low_freq_factor'])
    high_freq_factor = float(scaling['high_freq_factor'])
    old_context = float(scaling['original_max_position_embeddings'])

    low_freq_wavelen = old_context / low_freq_factor
    high_freq_wavelen = old_context / high_freq_factor
    wavelen = 2 * math.pi / inv_freq

    scaled = torch.where(wavelen > low_freq_wavelen, inv_freq / factor,
                         inv_freq)
    smooth = ((old_context / wavelen - low_freq_factor) /
              (high_freq_factor - low_freq_factor))
    smoothed = (1 - smooth) * scaled / factor + smooth * scaled
    is_medium = ((wavelen >= high_freq_wavelen) &
                 (wavelen <= low_freq_wavelen))
    return torch.where(is_medium, smoothed, scaled)
