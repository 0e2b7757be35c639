"""Declarative, reversible edits of activations and parameters.

An `InterventionPlan` names a target, the indices to replace there and the
replacement policy:

    tap     activations at one slot, during forward passes. Indices are
            (layer, token, channel) triples; a rematerialized plan carries
            none and replaces the MAs detected at the slot on every pass.
    gamma   entries of a norm scale vector (attn_norm or ffn_norm).
    weight  rows (output channels) of a projection matrix.

Gamma and weight plans swap the edited tensors into the model for the
duration of a pass and put the originals back afterwards, so reverting is
exact. Plans are plain values and serialize to JSON for reruns.
"""
import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from outlierscope import WEIGHT_FAMILIES
from outlierscope.abstract_architecture import NORMS
from outlierscope.co_analysis import weight_channel_statistics
from outlierscope.ma_analysis import ma_mask
from outlierscope.taps import (FFN, GATED_MLP, SELF_ATTENTION, UNDEFINED_SLOTS,
                               block_kind_of)
from outlierscope.utils import OutlierScopeError, PlanError, digest

logger = logging.getLogger(__name__)

TAP = 'tap'
GAMMA = 'gamma'
WEIGHT = 'weight'

REPLACE_WITH_MEAN = 'replace_with_mean'
REPLACE_WITH_ZERO = 'replace_with_zero'
POLICY_ALIASES = {'mean': REPLACE_WITH_MEAN, 'zero': REPLACE_WITH_ZERO,
                  REPLACE_WITH_MEAN: REPLACE_WITH_MEAN,
                  REPLACE_WITH_ZERO: REPLACE_WITH_ZERO}

WHOLE_TENSOR = 'whole_tensor'
PER_CHANNEL = 'per_channel'

TMA_SITES = ('y6', 'y7')

NORM_OF_BLOCK = {SELF_ATTENTION: 'attn_norm', FFN: 'ffn_norm'}

PLAN_FORMAT = 1

BASELINE = 'baseline'


def normalize_policy(policy):
    try:
        return POLICY_ALIASES[policy]
    except KeyError:
        raise PlanError('unknown replacement policy `{0}`'.format(policy))


def weight_rows(descriptor, weight_name):
    """Row count of a canonical per-layer matrix, None if the model lacks it.
    """
    q_width = descriptor.head_count * descriptor.head_dim
    kv_width = descriptor.kv_head_count * descriptor.head_dim
    rows = {'q_proj': q_width, 'k_proj': kv_width, 'v_proj': kv_width,
            'o_proj': descriptor.hidden_dim,
            'down_proj': descriptor.hidden_dim}
    if descriptor.ffn_kind == GATED_MLP:
        rows.update(gate_proj=descriptor.intermediate_dim,
                    up_proj=descriptor.intermediate_dim)
    else:
        rows.update(fc_in=descriptor.intermediate_dim)
    for norm in NORMS:
        rows[norm] = descriptor.hidden_dim
    return rows.get(weight_name)


@dataclass(frozen=True)
class InterventionPlan:
    target_kind: str
    policy: str
    indices: tuple = ()
    slot: str = None
    block_kind: str = None
    weight_name: str = None
    layers: tuple = None
    mean_scope: str = WHOLE_TENSOR
    rematerialize: bool = False
    exclude_from_mean: bool = False
    seed: int = None
    label: str = field(default='', compare=False)

    def __post_init__(self):
        if self.target_kind not in (TAP, GAMMA, WEIGHT):
            raise PlanError(
                'unknown plan target `{0}`'.format(self.target_kind))
        if self.policy not in (REPLACE_WITH_MEAN, REPLACE_WITH_ZERO):
            raise PlanError('unknown replacement policy `{0}`'.format(
                self.policy))
        if self.mean_scope not in (WHOLE_TENSOR, PER_CHANNEL):
            raise PlanError('unknown mean scope `{0}`'.format(
                self.mean_scope))
        if len(set(self.indices)) != len(self.indices):
            raise PlanError('plan indices must not repeat')
        if self.target_kind == TAP:
            try:
                block_kind_of(self.slot)
            except OutlierScopeError as err:
                raise PlanError(str(err))
            if any(not isinstance(i, tuple) or len(i) != 3
                   for i in self.indices):
                raise PlanError('tap plan indices are (layer, token, '
                                'channel) triples')
            if self.rematerialize and self.indices:
                raise PlanError('a rematerialized plan carries no indices')
        else:
            if self.rematerialize:
                raise PlanError('only tap plans are rematerialized')
            if any(not isinstance(i, int) for i in self.indices):
                raise PlanError('channel indices must be integers')
        if self.target_kind == GAMMA and self.block_kind not in NORM_OF_BLOCK:
            raise PlanError('gamma plans need a block kind, got `{0}`'.format(
                self.block_kind))
        if self.target_kind == WEIGHT and not self.weight_name:
            raise PlanError('weight plans need a weight name')
        flat = [i for idx in self.indices
                for i in (idx if isinstance(idx, tuple) else (idx,))]
        if any(i < 0 for i in flat):
            raise PlanError('plan indices must be non-negative')

    @property
    def is_tap_plan(self):
        return self.target_kind == TAP

    @property
    def is_empty(self):
        return not self.indices and not self.rematerialize

    def describe(self):
        if self.label:
            return self.label
        if self.target_kind == TAP:
            target = self.slot
        elif self.target_kind == GAMMA:
            target = NORM_OF_BLOCK[self.block_kind]
        else:
            target = self.weight_name
        return '{0}:{1}:{2}'.format(self.target_kind, target, self.policy)

    def layer_scope(self, layer_count):
        if self.layers is None:
            return tuple(range(layer_count))
        return self.layers

    def touches(self, layer_index, slot):
        if not self.is_tap_plan or slot != self.slot or self.is_empty:
            return False
        return self.layers is None or layer_index in self.layers

    def parameter_names(self, layer_count):
        if self.target_kind == GAMMA:
            name = NORM_OF_BLOCK[self.block_kind]
        else:
            name = self.weight_name
        return ['layers.{0}.{1}.weight'.format(i, name)
                for i in self.layer_scope(layer_count)]

    def validate(self, descriptor, token_count=None):
        """Check every index against the model before anything runs.

        :raises PlanError: on any index or layer outside its target
        """
        layer_count = descriptor.layer_count
        for layer_index in self.layer_scope(layer_count):
            if not 0 <= layer_index < layer_count:
                raise PlanError('plan layer {0} outside 0..{1}'.format(
                    layer_index, layer_count - 1))

        if self.target_kind == TAP:
            if self.slot in UNDEFINED_SLOTS[descriptor.ffn_kind]:
                raise PlanError('slot {0} does not exist on {1}'.format(
                    self.slot, descriptor.model_id))
            width = descriptor.tap_width(self.slot, token_count)
            for layer_index, token, channel in self.indices:
                if (self.layers is not None and
                        layer_index not in self.layers):
                    raise PlanError(
                        'index layer {0} outside the plan scope'.format(
                            layer_index))
                if layer_index >= layer_count:
                    raise PlanError('index layer {0} outside 0..{1}'.format(
                        layer_index, layer_count - 1))
                if token_count is not None and token >= token_count:
                    raise PlanError(
                        'token {0} outside a {1}-token input'.format(
                            token, token_count))
                if width is not None and channel >= width:
                    raise PlanError('channel {0} outside {1} width {2}'.format(
                        channel, self.slot, width))
            return

        if self.target_kind == GAMMA:
            rows = descriptor.hidden_dim
        else:
            rows = weight_rows(descriptor, self.weight_name)
            if rows is None:
                raise PlanError('{0} has no weight `{1}`'.format(
                    descriptor.model_id, self.weight_name))
        for index in self.indices:
            if index >= rows:
                raise PlanError('channel {0} outside {1} rows of {2}'.format(
                    index, rows, self.describe()))

    def edit_activation(self, values, layer_index):
        """Return `values` with this plan's positions replaced.

        Entries outside the plan's positions are left bit-identical.
        """
        if self.rematerialize:
            mask = ma_mask(values.detach().to(torch.float64))
            tokens, channels = np.nonzero(mask)
            tokens = torch.as_tensor(tokens, dtype=torch.long)
            channels = torch.as_tensor(channels, dtype=torch.long)
        else:
            pairs = [(t, c) for layer, t, c in self.indices
                     if layer == layer_index]
            tokens = torch.tensor([t for t, _ in pairs], dtype=torch.long)
            channels = torch.tensor([c for _, c in pairs], dtype=torch.long)
        if tokens.numel() == 0:
            return values

        replacement = self._replacement(values, tokens, channels)
        edited = values.clone()
        edited[tokens, channels] = replacement.to(values.dtype)
        return edited

    def _replacement(self, values, tokens, channels):
        count = tokens.numel()
        if self.policy == REPLACE_WITH_ZERO:
            return torch.zeros(count, dtype=torch.float64)

        source = values.detach().to(torch.float64)
        keep = torch.ones_like(source, dtype=torch.bool)
        if self.exclude_from_mean:
            keep[tokens, channels] = False

        if self.mean_scope == WHOLE_TENSOR:
            if not bool(keep.any()):
                raise PlanError('no entries left to take the mean of')
            mean = source[keep].mean()
            return mean.expand(count)

        sums = (source * keep).sum(dim=0)
        kept = keep.sum(dim=0)
        if bool((kept[channels] == 0).any()):
            raise PlanError('no entries left to take a channel mean of')
        return (sums / kept.clamp(min=1))[channels]

    def apply(self, model):
        """Swap edited parameters into `model`; returns the originals."""
        originals = {}
        if self.is_empty:
            return originals
        rows = torch.tensor(self.indices, dtype=torch.long)
        for name in self.parameter_names(model.config.layer_count):
            original = model.parameter(name)
            edited = original.clone()
            edited[rows] = self._parameter_replacement(original, rows).to(
                original.dtype)
            originals[name] = model.replace_parameter(name, edited)
        return originals

    def _parameter_replacement(self, original, rows):
        source = original.detach().to(torch.float64)
        if self.policy == REPLACE_WITH_ZERO:
            return torch.zeros_like(source[rows])

        if self.mean_scope == PER_CHANNEL and source.dim() == 2:
            means = source[rows].mean(dim=1, keepdim=True)
            return means.expand(-1, source.shape[1])

        if self.exclude_from_mean:
            keep = torch.ones(source.shape[0], dtype=torch.bool)
            keep[rows] = False
            if not bool(keep.any()):
                raise PlanError('no channels left to take the mean of')
            mean = source[keep].mean()
        else:
            mean = source.mean()
        return mean.expand_as(source[rows])

    def revert(self, model, originals):
        for name, original in originals.items():
            model.replace_parameter(name, original)

    def to_dict(self):
        data = asdict(self)
        data['indices'] = [list(i) if isinstance(i, tuple) else i
                           for i in self.indices]
        if self.layers is not None:
            data['layers'] = list(self.layers)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['indices'] = tuple(tuple(i) if isinstance(i, list) else i
                                for i in data.get('indices', ()))
        if data.get('layers') is not None:
            data['layers'] = tuple(data['layers'])
        try:
            return cls(**data)
        except TypeError as err:
            raise PlanError('malformed plan: {0}'.format(err))

    def digest(self):
        return digest(self.to_dict())


def plans_digest(plans):
    """Digest identifying a list of plans; 'baseline' when there are none."""
    plans = [p for p in plans if not p.is_empty]
    if not plans:
        return BASELINE
    return digest([p.to_dict() for p in plans])


def plan_tma_removal(site, policy, ma_events=None, exclude_from_mean=False):
    """Plan the replacement of MAs at y6 or y7.

    With `ma_events` the plan replaces exactly those positions; without,
    it detects the MAs at the site afresh on every forward pass.

    :param str site: 'y6' or 'y7'
    :param str policy: 'mean' or 'zero' (or the long policy names)
    :param ma_events: MassiveActivationEvents recorded at the site
    :rtype: InterventionPlan
    :raises PlanError: if the site is not a TMA site or an event is not
                       from it
    """
    if site not in TMA_SITES:
        raise PlanError('TMA removal site must be one of {0}, got {1}'.format(
            ', '.join(TMA_SITES), site))
    policy = normalize_policy(policy)
    if ma_events is None:
        return InterventionPlan(TAP, policy, slot=site, rematerialize=True,
                                exclude_from_mean=exclude_from_mean,
                                label='tma-{0}-{1}'.format(site, policy))

    triples = set()
    for event in ma_events:
        if event.tap.slot != site:
            raise PlanError('event at {0} is not from site {1}'.format(
                event.tap.name, site))
        triples.add((event.tap.layer_index, event.token_index,
                     event.channel_index))
    return InterventionPlan(TAP, policy, indices=tuple(sorted(triples)),
                            slot=site, exclude_from_mean=exclude_from_mean,
                            label='tma-{0}-{1}'.format(site, policy))


def _channel_indices(indices):
    indices = tuple(sorted(int(i) for i in indices))
    if len(set(indices)) != len(indices):
        raise PlanError('channel indices must not repeat')
    return indices


def plan_gamma_edit(layer, block_kind, indices, policy, width=None):
    """Plan the replacement of norm scale entries.

    The mean policy uses the mean of the full gamma vector.

    :param layer: layer index, or None for every layer
    :param str block_kind: 'self_attention' (attn_norm) or 'ffn' (ffn_norm)
    :param indices: gamma entries to replace
    :param str policy: 'mean' or 'zero'
    :param int width: gamma length, to reject indices eagerly
    :rtype: InterventionPlan
    """
    indices = _channel_indices(indices)
    if width is not None and indices and indices[-1] >= width:
        raise PlanError('gamma index {0} outside length {1}'.format(
            indices[-1], width))
    layers = None if layer is None else (layer,)
    return InterventionPlan(GAMMA, normalize_policy(policy), indices=indices,
                            block_kind=block_kind, layers=layers)


def plan_weight_ablation(weight_name, indices, policy,
                         mean_scope=PER_CHANNEL, layer=None, width=None):
    """Plan the replacement of projection weight rows.

    `weight_name` is a canonical name ('q_proj') or a layer-qualified one
    ('layers.3.q_proj'). Without a layer the plan covers every layer.

    :rtype: InterventionPlan
    """
    parts = weight_name.split('.')
    if len(parts) == 3 and parts[0] == 'layers':
        layer = int(parts[1])
        weight_name = parts[2]
    indices = _channel_indices(indices)
    if width is not None and indices and indices[-1] >= width:
        raise PlanError('row {0} outside {1} rows'.format(indices[-1], width))
    layers = None if layer is None else (layer,)
    return InterventionPlan(WEIGHT, normalize_policy(policy),
                            indices=indices, weight_name=weight_name,
                            layers=layers, mean_scope=mean_scope)


def sample_random_channels(total, count, seed, exclude=()):
    """Sample `count` distinct channels of `total`, none from `exclude`.

    :rtype: list(int)
    :raises PlanError: if fewer than `count` channels are available
    """
    if count < 0:
        raise ValueError('count must be non-negative, got {0}'.format(count))
    excluded = set(int(i) for i in exclude)
    candidates = np.array([i for i in range(total) if i not in excluded],
                          dtype=np.int64)
    if count > len(candidates):
        err = PlanError('cannot sample {0} channels from {1} available'.format(
            count, len(candidates)))
        logger.error({'msg': 'exiting sample_random_channels', 'err': err})
        raise err
    rng = np.random.default_rng(seed)
    chosen = rng.choice(candidates, size=count, replace=False)
    return sorted(int(i) for i in chosen)


def random_baseline(plan, total, seed):
    """Return a plan like `plan` on as many random, disjoint channels."""
    if plan.is_tap_plan:
        raise PlanError('random baselines are built for parameter plans')
    indices = sample_random_channels(total, len(plan.indices), seed,
                                     exclude=plan.indices)
    return replace(plan, indices=tuple(indices), seed=seed,
                   label='random:{0}'.format(plan.describe()))


@dataclass(frozen=True)
class AblationPair:
    """Outlier plans of one family and threshold, with matched baselines."""

    family: str
    sd_threshold: float
    outlier_plans: tuple
    random_plans: tuple

    @property
    def channel_count(self):
        return sum(len(p.indices) for p in self.outlier_plans)


def channel_ablation_plans(model, family, sd_threshold, policy='mean',
                           seed=0, statistic='mean_abs'):
    """Build outlier-channel ablation plans for a weight family.

    Every matrix of the family in every layer gets its own plan over the
    rows flagged by `weight_channel_statistics`; each is shadowed by a
    random plan of the same size that avoids the flagged rows.

    :param DecoderModel model:
    :param str family: a key of WEIGHT_FAMILIES
    :param float sd_threshold: cutoff in cross-channel SDs
    :rtype: AblationPair
    """
    try:
        names = WEIGHT_FAMILIES[family]
    except KeyError:
        raise PlanError('unknown weight family `{0}`'.format(family))

    descriptor = model.descriptor
    outliers = []
    randoms = []
    plan_seed = seed
    for layer_index in range(descriptor.layer_count):
        for name in names:
            rows = weight_rows(descriptor, name)
            if rows is None:
                continue
            tensor = model.parameter(
                'layers.{0}.{1}.weight'.format(layer_index, name))
            flagged = weight_channel_statistics(tensor, sd_threshold,
                                                statistic)
            if not flagged:
                continue
            if name in NORMS:
                block_kind = (SELF_ATTENTION if name == 'attn_norm'
                              else FFN)
                plan = plan_gamma_edit(layer_index, block_kind, flagged,
                                       policy)
            else:
                plan = plan_weight_ablation(name, flagged, policy,
                                            layer=layer_index)
            outliers.append(plan)
            randoms.append(random_baseline(plan, rows, plan_seed))
            plan_seed += 1

    pair = AblationPair(family, sd_threshold, tuple(outliers), tuple(randoms))
    logger.info({'msg': 'built channel ablation plans', 'family': family,
                 'sd': sd_threshold, 'plans': len(outliers),
                 'channels': pair.channel_count})
    return pair


def otc_plans(otc_sets, policy='mean', seed=0):
    """Ablation plans for OTC sets plus matched random baselines.

    :param dict otc_sets: weight name -> OtcSet
    :returns: (otc plans, random plans)
    """
    outliers = []
    randoms = []
    for offset, name in enumerate(sorted(otc_sets)):
        otcs = otc_sets[name]
        if not otcs.row_indices:
            continue
        plan = plan_weight_ablation(name, otcs.row_indices, policy)
        outliers.append(plan)
        randoms.append(random_baseline(plan, otcs.total_rows,
                                       seed + offset))
    return tuple(outliers), tuple(randoms)


def apply_plan(model, plan):
    """Apply a gamma or weight plan; returns what `revert_plan` needs."""
    if plan.is_tap_plan:
        raise PlanError('tap plans are applied during forward passes')
    plan.validate(model.descriptor)
    return plan.apply(model)


def revert_plan(model, plan, originals):
    plan.revert(model, originals)


@contextmanager
def apply_plans(model, plans):
    """Apply parameter plans for the duration of a with-block.

    Parameters are restored on exit, also when the block raises.
    """
    applied = []
    try:
        for plan in plans:
            applied.append((plan, apply_plan(model, plan)))
        yield model
    finally:
        for plan, originals in reversed(applied):
            revert_plan(model, plan, originals)


def plan_to_json(plans):
    """Serialize one plan or a list of plans."""
    if isinstance(plans, InterventionPlan):
        plans = [plans]
    return json.dumps({'format': PLAN_FORMAT,
                       'plans': [p.to_dict() for p in plans]},
                      indent=2, sort_keys=True)


def plan_from_json(text):
    """Read plans written by `plan_to_json`; returns a list."""
    try:
        data = json.loads(text)
    except ValueError as err:
        raise PlanError('plan file is not JSON: {0}'.format(err))
    if data.get('format') != PLAN_FORMAT:
        raise PlanError('unsupported plan format {0!r}'.format(
            data.get('format')))
    return [InterventionPlan.from_dict(p) for p in data['plans']]

