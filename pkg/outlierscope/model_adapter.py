"""Decoder-only checkpoints behind a uniform tap-point map.

A `DecoderModel` holds a checkpoint's tensors in canonical form (see
`abstract_architecture`) and runs single-sequence forward passes itself,
so every tap slot sits at an explicit point of the computation instead of
at a module boundary some hook has to guess. Interventions on activations
are applied at the tap, after the producing op and before the consumer;
recorded snapshots reflect the edited flow.
"""
import json
import logging
import math
import os
import time
import uuid
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from safetensors.torch import load_file

from outlierscope import CACHE_DIR, SUPPORTED_MODEL_TYPES
from outlierscope.abstract_architecture import (ArchitectureConfig,
                                                LAYERNORM, RMSNORM)
from outlierscope.dict_logging import secs_since
from outlierscope.gpt2_architecture import GPT2Architecture
from outlierscope.llama_architecture import LlamaArchitecture
from outlierscope.taps import (FFN, GATED_MLP, SELF_ATTENTION,
                               UNDEFINED_SLOTS, TapPoint)
from outlierscope.utils import (CheckpointError, TapResolutionError,
                                UnsupportedArchitectureError, check_finite,
                                tokens_digest)

logger = logging.getLogger(__name__)

ARCHITECTURES = {
    GPT2Architecture.family: GPT2Architecture,
    LlamaArchitecture.family: LlamaArchitecture,
}

# Slots whose tensors are [heads, tokens, tokens] during the pass and are
# viewed as tokens x (heads * tokens) at the tap.
_SCORE_SLOTS = ('x6', 'x7')


@dataclass(frozen=True)
class ModelDescriptor:
    """Shape summary of a loaded model, enough to resolve every tap."""

    model_id: str
    layer_count: int
    hidden_dim: int
    intermediate_dim: int
    head_count: int
    kv_head_count: int
    head_dim: int
    ffn_kind: str
    norm_kind: str
    vocab_size: int
    max_sequence_length: int

    @classmethod
    def from_config(cls, model_id, config):
        return cls(model_id=model_id,
                   layer_count=config.layer_count,
                   hidden_dim=config.hidden_dim,
                   intermediate_dim=config.intermediate_dim,
                   head_count=config.head_count,
                   kv_head_count=config.kv_head_count,
                   head_dim=config.head_dim,
                   ffn_kind=config.ffn_kind,
                   norm_kind=config.norm_kind,
                   vocab_size=config.vocab_size,
                   max_sequence_length=config.max_sequence_length)

    def resolve(self, tap):
        """Check that a tap exists on this model.

        :param TapPoint tap: the tap to check
        :raises TapResolutionError: if the layer or slot does not exist
        """
        if tap.layer_index >= self.layer_count:
            raise TapResolutionError(
                'tap {0}: model has {1} layers'.format(tap.name,
                                                       self.layer_count))
        note = UNDEFINED_SLOTS[self.ffn_kind].get(tap.slot)
        if note:
            raise TapResolutionError('tap {0}: {1}'.format(tap.name, note))
        return tap

    def tap_width(self, slot, token_count=None):
        """Return the channel count of a tap's tensor.

        x6 and x7 are (heads * tokens) wide, so they need `token_count`.
        """
        if slot in ('x1', 'x2', 'x9', 'y1', 'y2', 'y7'):
            return self.hidden_dim
        if slot in ('x3', 'x8'):
            return self.head_count * self.head_dim
        if slot in ('x4', 'x5'):
            return self.kv_head_count * self.head_dim
        if slot in _SCORE_SLOTS:
            if token_count is None:
                return None
            return self.head_count * token_count
        return self.intermediate_dim

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class ActivationSnapshot:
    """One recorded tensor at one tap for one forward pass.

    `values` is a float32 CPU tensor of shape [tokens, channels]. It is a
    private clone: editing it never affects the model or other snapshots.
    """

    tap: TapPoint
    values: torch.Tensor = field(compare=False)
    pass_id: str
    input_digest: str

    @property
    def shape(self):
        return tuple(self.values.shape)


class DecoderModel(object):
    """A resident decoder checkpoint that runs tap-instrumented passes.

    Forward passes are not re-entrant: parameter-level plans swap tensors
    in `params` for the duration of a pass.
    """

    def __init__(self, model_id, architecture, config, params,
                 tokenizer=None, dtype=torch.float32):
        self.model_id = model_id
        self.architecture = architecture
        self.config = config
        self.params = params
        self.tokenizer = tokenizer
        self.dtype = dtype
        self.descriptor = ModelDescriptor.from_config(model_id, config)

    def __repr__(self):
        return 'DecoderModel({0!r}, family={1}, layers={2})'.format(
            self.model_id, self.architecture.family, self.config.layer_count)

    def parameter(self, name):
        """Return a canonical parameter, or raise CheckpointError."""
        try:
            return self.params[name]
        except KeyError:
            raise CheckpointError(
                '{0} has no parameter `{1}`'.format(self.model_id, name))

    def replace_parameter(self, name, tensor):
        """Swap a canonical parameter for `tensor`, returning the old one."""
        old = self.parameter(name)
        if tuple(tensor.shape) != tuple(old.shape):
            raise CheckpointError(
                'shape {0} does not match `{1}` {2}'.format(
                    list(tensor.shape), name, list(old.shape)))
        self.params[name] = tensor
        return old

    def encode(self, text):
        """Tokenize text with the checkpoint's tokenizer."""
        if self.tokenizer is None:
            raise CheckpointError(
                '{0} has no tokenizer'.format(self.model_id))
        return self.tokenizer(text, add_special_tokens=False)['input_ids']

    def resolve_taps(self, taps):
        """Validate taps and return them de-duplicated in forward order."""
        resolved = {self.descriptor.resolve(t) for t in taps}
        return sorted(resolved, key=lambda t: t.sort_key)

    def _check_disabled(self, disabled):
        checked = set()
        for layer_index, block_kind in disabled:
            if block_kind not in (SELF_ATTENTION, FFN):
                raise TapResolutionError(
                    'unknown block kind `{0}`'.format(block_kind))
            if not 0 <= layer_index < self.config.layer_count:
                raise TapResolutionError(
                    'no residual add at layer {0}'.format(layer_index))
            checked.add((layer_index, block_kind))
        return checked

    @torch.no_grad()
    def run(self, tokens, taps=(), plans=(), disabled=(), sink=None,
            pass_id=None):
        """Run one sequence through the model.

        :param tokens: token ids, a sequence of int or a 1-D tensor
        :param taps: TapPoints to record
        :param plans: InterventionPlans to apply during the pass
        :param disabled: (layer_index, block_kind) residual adds to skip
        :param sink: optional callable receiving each ActivationSnapshot as
                     it is recorded; snapshots are then not accumulated
        :param str pass_id: optional identifier; a fresh one by default
        :returns: (logits [tokens, vocab] float32, list of snapshots)
        :raises TapResolutionError: if a tap or residual site does not exist
        :raises PlanError: if a plan does not fit the model or input
        :raises NonFiniteActivationError: if a recorded tensor is not finite
        """
        tokens = torch.as_tensor(tokens, dtype=torch.long).reshape(-1)
        token_count = tokens.shape[0]
        if token_count < 1:
            raise TapResolutionError('cannot run an empty token sequence')
        if token_count > self.config.max_sequence_length:
            raise TapResolutionError(
                'sequence of {0} tokens exceeds the model maximum {1}'.format(
                    token_count, self.config.max_sequence_length))

        wanted = {(t.layer_index, t.slot): t for t in self.resolve_taps(taps)}
        disabled = self._check_disabled(disabled)
        plans = list(plans or ())
        for plan in plans:
            plan.validate(self.descriptor, token_count)

        tap_plans = [p for p in plans if p.is_tap_plan]
        param_plans = [p for p in plans if not p.is_tap_plan]

        pass_id = pass_id or uuid.uuid4().hex[:16]
        input_digest = tokens_digest(tokens.tolist())
        snapshots = []

        def visit(layer_index, slot, values):
            for plan in tap_plans:
                if plan.touches(layer_index, slot):
                    values = plan.edit_activation(values, layer_index)
            tap = wanted.get((layer_index, slot))
            if tap is not None:
                recorded = values.detach().to(torch.float32).cpu().clone()
                check_finite(recorded, 'recording {0}'.format(tap.name),
                             'run')
                snapshot = ActivationSnapshot(tap, recorded, pass_id,
                                              input_digest)
                if sink is not None:
                    sink(snapshot)
                else:
                    snapshots.append(snapshot)
            return values

        saved = []
        try:
            for plan in param_plans:
                saved.append((plan, plan.apply(self)))
            logits = self._forward(tokens, visit, disabled)
        finally:
            for plan, originals in reversed(saved):
                plan.revert(self, originals)

        return logits, snapshots

    def _forward(self, tokens, visit, disabled):
        arch = self.architecture
        cfg = self.config
        p = self.params
        dtype = self.dtype

        token_count = tokens.shape[0]
        heads = cfg.head_count
        kv_heads = cfg.kv_head_count
        head_dim = cfg.head_dim
        positions = torch.arange(token_count)
        causal = torch.ones(token_count, token_count,
                            dtype=torch.bool).triu(diagonal=1)

        def linear(x, name):
            return F.linear(x, p[name + '.weight'], p.get(name + '.bias'))

        def norm(x, name):
            return arch.normalize(x, p[name + '.weight'],
                                  p.get(name + '.bias'), cfg)

        def visit_scores(layer_index, slot, scores):
            # [heads, tokens, tokens] <-> tokens x (heads * tokens)
            flat = scores.permute(1, 0, 2).reshape(token_count, -1)
            flat = visit(layer_index, slot, flat)
            return flat.reshape(token_count, heads, token_count).permute(
                1, 0, 2)

        h = arch.embed(p, tokens, cfg).to(dtype)

        for i in range(cfg.layer_count):
            pre = 'layers.{0}.'.format(i)

            x1 = visit(i, 'x1', h)
            x2 = visit(i, 'x2', norm(x1, pre + 'attn_norm'))
            x3 = visit(i, 'x3', linear(x2, pre + 'q_proj'))
            x4 = visit(i, 'x4', linear(x2, pre + 'k_proj'))
            x5 = visit(i, 'x5', linear(x2, pre + 'v_proj'))

            q = x3.view(token_count, heads, head_dim).transpose(0, 1)
            k = x4.view(token_count, kv_heads, head_dim).transpose(0, 1)
            v = x5.view(token_count, kv_heads, head_dim).transpose(0, 1)
            q, k = arch.rotate(q, k, positions, cfg)
            if kv_heads != heads:
                k = k.repeat_interleave(heads // kv_heads, dim=0)
                v = v.repeat_interleave(heads // kv_heads, dim=0)

            scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(
                head_dim)
            scores = visit_scores(i, 'x6', scores)
            masked = scores.masked_fill(causal, torch.finfo(scores.dtype).min)
            probs = F.softmax(masked, dim=-1, dtype=torch.float32).to(dtype)
            probs = visit_scores(i, 'x7', probs)

            context = torch.matmul(probs, v).transpose(0, 1).reshape(
                token_count, heads * head_dim)
            x8 = visit(i, 'x8', context)
            x9 = visit(i, 'x9', linear(x8, pre + 'o_proj'))
            h = x9 if (i, SELF_ATTENTION) in disabled else x1 + x9

            y1 = visit(i, 'y1', h)
            y2 = visit(i, 'y2', norm(y1, pre + 'ffn_norm'))
            if cfg.ffn_kind == GATED_MLP:
                y3 = visit(i, 'y3', linear(y2, pre + 'gate_proj'))
                y4 = visit(i, 'y4', arch.activate(y3, cfg))
                y5 = visit(i, 'y5', linear(y2, pre + 'up_proj'))
                y6 = visit(i, 'y6', y4 * y5)
            else:
                y3 = visit(i, 'y3', linear(y2, pre + 'fc_in'))
                y4 = visit(i, 'y4', arch.activate(y3, cfg))
                # y6 aliases y4 on standard MLPs
                y6 = visit(i, 'y6', y4)
            y7 = visit(i, 'y7', linear(y6, pre + 'down_proj'))
            h = y7 if (i, FFN) in disabled else y1 + y7

        h = norm(h, 'final_norm')
        return F.linear(h, p['lm_head']).to(torch.float32)


def run_with_taps(model, input_tokens, taps, plan=None):
    """Run a pass recording `taps`, optionally applying one or more plans.

    :returns: (logits, list of ActivationSnapshot)
    """
    plans = _as_plans(plan)
    return model.run(input_tokens, taps=taps, plans=plans)


def run_without_residuals(model, input_tokens, disabled, taps):
    """Run a pass with the named residual adds skipped.

    :param disabled: (layer_index, block_kind) pairs
    :returns: list of ActivationSnapshot
    """
    _, snapshots = model.run(input_tokens, taps=taps, disabled=disabled)
    return snapshots


def all_residuals(descriptor):
    """Every (layer_index, block_kind) residual site of a model."""
    return {(i, kind) for i in range(descriptor.layer_count)
            for kind in (SELF_ATTENTION, FFN)}


def _as_plans(plan):
    if plan is None:
        return ()
    if isinstance(plan, (list, tuple)):
        return tuple(plan)
    return (plan,)


def read_checkpoint(location):
    """Read a name -> tensor map from a checkpoint directory.

    safetensors files (single or sharded) are preferred; pickled
    `pytorch_model*.bin` files are read with `weights_only`.

    :param str location: checkpoint directory
    :rtype: dict
    :raises CheckpointError: if no supported weight file is present
    """
    for index_name, loader in (('model.safetensors.index.json', load_file),
                               ('pytorch_model.bin.index.json', _load_bin)):
        index_path = os.path.join(location, index_name)
        if os.path.exists(index_path):
            with open(index_path) as f:
                shards = sorted(set(json.load(f)['weight_map'].values()))
            state_dict = {}
            for shard in shards:
                state_dict.update(loader(os.path.join(location, shard)))
            return state_dict

    for name, loader in (('model.safetensors', load_file),
                         ('pytorch_model.bin', _load_bin)):
        path = os.path.join(location, name)
        if os.path.exists(path):
            return loader(path)

    raise CheckpointError('no supported weight files in {0}'.format(location))


def _load_bin(path):
    return torch.load(path, map_location='cpu', weights_only=True)


def _download(model_id):
    from huggingface_hub import snapshot_download

    logger.info({'msg': 'downloading checkpoint', 'model_id': model_id})
    try:
        return snapshot_download(
            repo_id=model_id, cache_dir=CACHE_DIR,
            allow_patterns=['*.json', '*.safetensors', '*.bin', '*.model',
                            '*.txt', '*.tiktoken'])
    except Exception as err:
        raise CheckpointError(
            'cannot fetch checkpoint `{0}`: {1}'.format(model_id, err))


def load_model(model_id, weights_location=None, dtype=torch.float32,
               with_tokenizer=True):
    """Load a decoder-only checkpoint and hold it resident.

    `weights_location` defaults to `model_id` when that is a directory; any
    other id is fetched from the Hugging Face hub into the cache.

    :param str model_id: checkpoint identifier recorded in reports
    :param str weights_location: local checkpoint directory
    :param torch.dtype dtype: compute precision for forward passes
    :param bool with_tokenizer: also load the checkpoint's tokenizer
    :rtype: DecoderModel
    :raises UnsupportedArchitectureError: for encoder-decoder or unknown
                                          model types
    :raises CheckpointError: if weights are missing or incomplete
    """
    from transformers import AutoConfig

    start_time = time.time()
    location = weights_location or model_id
    if not os.path.isdir(location):
        if weights_location:
            raise CheckpointError(
                'weights location {0} is not a directory'.format(location))
        location = _download(model_id)

    try:
        hf_config = AutoConfig.from_pretrained(location)
    except (OSError, ValueError) as err:
        raise CheckpointError(
            'cannot read checkpoint config in {0}: {1}'.format(location, err))

    if getattr(hf_config, 'is_encoder_decoder', False):
        raise UnsupportedArchitectureError(
            '{0} is an encoder-decoder model; only decoder-only causal LMs '
            'are supported'.format(model_id))
    family = SUPPORTED_MODEL_TYPES.get(hf_config.model_type)
    if family is None:
        raise UnsupportedArchitectureError(
            'model type `{0}` is not supported (supported: {1})'.format(
                hf_config.model_type,
                ', '.join(sorted(SUPPORTED_MODEL_TYPES))))

    architecture = ARCHITECTURES[family]
    config = architecture.config_from_hf(hf_config)
    params = architecture.canonical_parameters(read_checkpoint(location),
                                               config)
    params = {name: t.to(dtype) for name, t in params.items()}

    tokenizer = None
    if with_tokenizer:
        tokenizer = _load_tokenizer(location)

    model = DecoderModel(model_id, architecture, config, params,
                         tokenizer=tokenizer, dtype=dtype)
    logger.info({'msg': 'loaded model', 'model_id': model_id,
                 'family': family, 'layers': config.layer_count,
                 'ffn_kind': config.ffn_kind, 'norm_kind': config.norm_kind,
                 'elapsed': secs_since(start_time)})
    return model


def _load_tokenizer(location):
    from transformers import AutoTokenizer

    try:
        return AutoTokenizer.from_pretrained(location)
    except Exception as err:
        logger.warning({'msg': 'no tokenizer loaded', 'location': location,
                        'err': err})
        return None


def build_toy_model(ffn_kind=GATED_MLP, norm_kind=None, layer_count=2,
                    hidden_dim=16, intermediate_dim=32, head_count=4,
                    kv_head_count=None, vocab_size=64,
                    max_sequence_length=64, seed=0, zero=False,
                    scale=0.3):
    """Build a small random-weight decoder for tests and dry runs.

    Gated models use the LLaMA family math (rotary positions, SiLU);
    standard models use the GPT-2 family math (learned positions, tanh
    GELU). Norm kind defaults to RMSNorm for gated and LayerNorm for
    standard models.

    :param bool zero: make every weight (norm scales included) zero
    :param float scale: standard deviation of the random weights
    :rtype: DecoderModel
    """
    if norm_kind is None:
        norm_kind = RMSNORM if ffn_kind == GATED_MLP else LAYERNORM
    kv_head_count = kv_head_count or head_count
    head_dim = hidden_dim // head_count

    if ffn_kind == GATED_MLP:
        architecture = LlamaArchitecture
        activation = 'silu'
        model_type = 'llama'
    else:
        architecture = GPT2Architecture
        activation = 'gelu_new'
        model_type = 'gpt2'

    config = ArchitectureConfig(
        family=architecture.family, model_type=model_type,
        layer_count=layer_count, hidden_dim=hidden_dim,
        intermediate_dim=intermediate_dim, head_count=head_count,
        kv_head_count=kv_head_count, head_dim=head_dim,
        vocab_size=vocab_size, max_sequence_length=max_sequence_length,
        ffn_kind=ffn_kind, norm_kind=norm_kind, norm_eps=1e-5,
        activation=activation,
        rope_theta=10000.0 if ffn_kind == GATED_MLP else None)

    generator = torch.Generator().manual_seed(seed)

    def weight(*shape):
        if zero:
            return torch.zeros(*shape)
        return torch.randn(*shape, generator=generator) * scale

    def gamma():
        if zero:
            return torch.zeros(hidden_dim)
        return 1.0 + torch.randn(hidden_dim, generator=generator) * 0.1

    q_width = head_count * head_dim
    kv_width = kv_head_count * head_dim
    shapes = {'q_proj': (q_width, hidden_dim),
              'k_proj': (kv_width, hidden_dim),
              'v_proj': (kv_width, hidden_dim),
              'o_proj': (hidden_dim, q_width)}
    if ffn_kind == GATED_MLP:
        shapes.update({'gate_proj': (intermediate_dim, hidden_dim),
                       'up_proj': (intermediate_dim, hidden_dim),
                       'down_proj': (hidden_dim, intermediate_dim)})
    else:
        shapes.update({'fc_in': (intermediate_dim, hidden_dim),
                       'down_proj': (hidden_dim, intermediate_dim)})

    params = {'embed_tokens': weight(vocab_size, hidden_dim),
              'final_norm.weight': gamma()}
    if ffn_kind != GATED_MLP:
        params['embed_positions'] = weight(max_sequence_length, hidden_dim)
    if norm_kind == LAYERNORM:
        params['final_norm.bias'] = torch.zeros(hidden_dim)
    params['lm_head'] = weight(vocab_size, hidden_dim)

    for i in range(layer_count):
        pre = 'layers.{0}.'.format(i)
        for name in ('attn_norm', 'ffn_norm'):
            params[pre + name + '.weight'] = gamma()
            if norm_kind == LAYERNORM:
                params[pre + name + '.bias'] = torch.zeros(hidden_dim)
        for name, shape in shapes.items():
            params[pre + name + '.weight'] = weight(*shape)
            if ffn_kind != GATED_MLP:
                params[pre + name + '.bias'] = torch.zeros(shape[0])

    model_id = 'toy-{0}-{1}'.format(ffn_kind, norm_kind)
    return DecoderModel(model_id, architecture, config, params)
