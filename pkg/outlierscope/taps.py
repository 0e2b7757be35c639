"""Named tap sites inside a decoder block.

Self-attention slots (block kind ``self_attention``):

    x1  block input, before normalization (residual stream)
    x2  normalization output
    x3  query projection output (before rotary embedding)
    x4  key projection output (before rotary embedding)
    x5  value projection output
    x6  scaled attention scores, before the causal mask and softmax
    x7  softmax output
    x8  attention-weighted values, heads merged
    x9  output projection result, before the residual add

Feed-forward slots (block kind ``ffn``):

    y1  block input (residual stream)
    y2  normalization output
    y3  gate projection (gated) or first fully connected layer (standard)
    y4  activation function output
    y5  up projection output (gated only)
    y6  y4 * y5 (gated); alias of y4 (standard)
    y7  down projection output, before the residual add

x6 and x7 are flattened to tokens x (heads * tokens).
"""
import re
from dataclasses import dataclass

from outlierscope.utils import TapResolutionError

SELF_ATTENTION = 'self_attention'
FFN = 'ffn'

GATED_MLP = 'gated_mlp'
STANDARD_MLP = 'standard_mlp'

ATTENTION_SLOTS = ('x1', 'x2', 'x3', 'x4', 'x5', 'x6', 'x7', 'x8', 'x9')
FFN_SLOTS = ('y1', 'y2', 'y3', 'y4', 'y5', 'y6', 'y7')

# Slots that are not defined, or only alias another slot, per FFN kind.
UNDEFINED_SLOTS = {
    GATED_MLP: {},
    STANDARD_MLP: {'y5': 'no up projection in a standard MLP'},
}
ALIASED_SLOTS = {
    GATED_MLP: {},
    STANDARD_MLP: {'y6': 'y4'},
}


def block_kind_of(slot):
    """Return the block kind a slot name belongs to.

    :param str slot: slot name, e.g. 'x3' or 'y6'
    :rtype: str
    :raises TapResolutionError: if the slot name is unknown
    """
    if slot in ATTENTION_SLOTS:
        return SELF_ATTENTION
    if slot in FFN_SLOTS:
        return FFN
    raise TapResolutionError('unknown tap slot `{0}`'.format(slot))


@dataclass(frozen=True)
class TapPoint:
    """A tap site: one slot of one block in one layer."""

    layer_index: int
    block_kind: str
    slot: str

    def __post_init__(self):
        if self.layer_index < 0:
            raise TapResolutionError(
                'negative layer index {0}'.format(self.layer_index))
        if block_kind_of(self.slot) != self.block_kind:
            raise TapResolutionError(
                'slot {0} is not part of a {1} block'.format(
                    self.slot, self.block_kind))

    @classmethod
    def of(cls, slot, layer_index):
        return cls(layer_index, block_kind_of(slot), slot)

    @property
    def sort_key(self):
        """Forward-execution order: layer first, then slot position."""
        return (self.layer_index,
                (ATTENTION_SLOTS + FFN_SLOTS).index(self.slot))

    @property
    def name(self):
        return '{0}@{1}'.format(self.slot, self.layer_index)

    def to_dict(self):
        return {'layer_index': self.layer_index,
                'block_kind': self.block_kind,
                'slot': self.slot}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data['layer_index']), data['block_kind'],
                   data['slot'])

    def __str__(self):
        return self.name


def canonical_slots(ffn_kind, include_aliases=False):
    """Return slot names in forward order for an FFN kind.

    Undefined slots are always skipped; aliased slots only when
    `include_aliases` is false.

    :param str ffn_kind: GATED_MLP or STANDARD_MLP
    :param bool include_aliases: keep alias slots (y6 on standard MLPs)
    :rtype: tuple(str)
    """
    skipped = set(UNDEFINED_SLOTS[ffn_kind])
    if not include_aliases:
        skipped.update(ALIASED_SLOTS[ffn_kind])
    return tuple(s for s in ATTENTION_SLOTS + FFN_SLOTS if s not in skipped)


_TAP_RE = re.compile(r'^(?P<slot>[xy]\d)(@(?P<lo>\d+)(-(?P<hi>\d+))?)?$')


def parse_taps(spec, layer_count):
    """Parse a comma-separated tap spec into TapPoints.

    Each item is ``slot`` (every layer), ``slot@L`` (layer L) or
    ``slot@L1-L2`` (layers L1..L2 inclusive), e.g. ``x1,y6@0,x3@2-5``.

    :param str spec: the tap spec
    :param int layer_count: number of layers in the model
    :returns: sorted, de-duplicated taps
    :rtype: list(TapPoint)
    :raises TapResolutionError: on malformed items or out-of-range layers
    """
    taps = set()
    for item in [s.strip() for s in spec.split(',') if s.strip()]:
        match = _TAP_RE.match(item)
        if not match:
            raise TapResolutionError('malformed tap `{0}`'.format(item))
        slot = match.group('slot')
        if match.group('lo') is None:
            layers = range(layer_count)
        else:
            lo = int(match.group('lo'))
            hi = int(match.group('hi')) if match.group('hi') else lo
            if hi < lo or hi >= layer_count:
                raise TapResolutionError(
                    'layer range in `{0}` outside 0..{1}'.format(
                        item, layer_count - 1))
            layers = range(lo, hi + 1)
        for layer in layers:
            taps.add(TapPoint.of(slot, layer))
    return sorted(taps, key=lambda t: t.sort_key)
