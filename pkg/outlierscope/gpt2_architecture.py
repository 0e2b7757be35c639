import torch
import torch.nn.functional as F

from outlierscope.abstract_architecture import (Architecture,
                                                ArchitectureConfig,
                                                LAYERNORM, require_tensor,
                                                strip_prefix)
from outlierscope.taps import STANDARD_MLP


class GPT2Architecture(Architecture):
    """GPT-2 style decoders: standard MLP, LayerNorm, learned positions.

    GPT-2 checkpoints store their projections as Conv1D weights of shape
    [in, out] and fuse q, k and v into one `c_attn` matrix. They are split
    and transposed here so every canonical matrix is [out, in].
    """

    family = 'gpt2'

    @classmethod
    def config_from_hf(cls, hf_config):
        hidden = hf_config.n_embd
        heads = hf_config.n_head
        return ArchitectureConfig(
            family=cls.family,
            model_type=hf_config.model_type,
            layer_count=hf_config.n_layer,
            hidden_dim=hidden,
            intermediate_dim=hf_config.n_inner or 4 * hidden,
            head_count=heads,
            kv_head_count=heads,
            head_dim=hidden // heads,
            vocab_size=hf_config.vocab_size,
            max_sequence_length=hf_config.n_positions,
            ffn_kind=STANDARD_MLP,
            norm_kind=LAYERNORM,
            norm_eps=hf_config.layer_norm_epsilon,
            activation=hf_config.activation_function,
            tie_embeddings=True)

    @classmethod
    def canonical_parameters(cls, state_dict, config):
        sd = strip_prefix(state_dict, ('transformer.',))
        hidden = config.hidden_dim

        params = {
            'embed_tokens': require_tensor(sd, 'wte.weight'),
            'embed_positions': require_tensor(sd, 'wpe.weight'),
            'final_norm.weight': require_tensor(sd, 'ln_f.weight'),
            'final_norm.bias': require_tensor(sd, 'ln_f.bias'),
        }
        params['lm_head'] = sd.get('lm_head.weight', params['embed_tokens'])

        for i in range(config.layer_count):
            src = 'h.{0}.'.format(i)
            dst = 'layers.{0}.'.format(i)

            def get(name):
                return require_tensor(sd, src + name)

            params[dst + 'attn_norm.weight'] = get('ln_1.weight')
            params[dst + 'attn_norm.bias'] = get('ln_1.bias')
            params[dst + 'ffn_norm.weight'] = get('ln_2.weight')
            params[dst + 'ffn_norm.bias'] = get('ln_2.bias')

            c_attn_w = get('attn.c_attn.weight')
            c_attn_b = get('attn.c_attn.bias')
            for j, name in enumerate(('q_proj', 'k_proj', 'v_proj')):
                cols = slice(j * hidden, (j + 1) * hidden)
                params[dst + name + '.weight'] = \
                    c_attn_w[:, cols].t().contiguous()
                params[dst + name + '.bias'] = c_attn_b[cols].contiguous()

            params[dst + 'o_proj.weight'] = \
                get('attn.c_proj.weight').t().contiguous()
            params[dst + 'o_proj.bias'] = get('attn.c_proj.bias')
            params[dst + 'fc_in.weight'] = \
                get('mlp.c_fc.weight').t().contiguous()
            params[dst + 'fc_in.bias'] = get('mlp.c_fc.bias')
            params[dst + 'down_proj.weight'] = \
                get('mlp.c_proj.weight').t().contiguous()
            params[dst + 'down_proj.bias'] = get('mlp.c_proj.bias')

        return params

    @classmethod
    def embed(cls, params, tokens, config):
        positions = torch.arange(tokens.shape[0], device=tokens.device)
        return (F.embedding(tokens, params['embed_tokens']) +
                F.embedding(positions, params['embed_positions']))
