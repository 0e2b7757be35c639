"""Massive activation detection, classification and trend statistics.

An entry of a snapshot is a massive activation (MA) when its magnitude
exceeds MA_ABS_THRESHOLD and is at least MA_MEDIAN_RATIO times the median
magnitude of the whole snapshot. MAs that survive with every residual add
disabled are true MAs (generated in place); the others are fake MAs
carried forward by the residual stream.
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from outlierscope import (DEFAULT_TOP_K, FINAL_LAYER_COUNT,
                          INITIAL_LAYER_FRACTION, MA_ABS_THRESHOLD,
                          MA_MEDIAN_RATIO, SUBLAYER_TOP_K)
from outlierscope.dict_logging import secs_since
from outlierscope.model_adapter import all_residuals, run_without_residuals
from outlierscope.taps import (ALIASED_SLOTS, UNDEFINED_SLOTS, TapPoint,
                               canonical_slots)
from outlierscope.utils import (ProvenanceError, check_finite,
                                check_non_empty)

logger = logging.getLogger(__name__)

UNCLASSIFIED = 'unclassified'
TRUE_MA = 'true_ma'
FAKE_MA = 'fake_ma'

NOT_AVAILABLE = 'N/A'


@dataclass(frozen=True)
class MassiveActivationEvent:
    tap: TapPoint
    token_index: int
    channel_index: int
    value: float
    kind: str = UNCLASSIFIED

    @property
    def position(self):
        return (self.token_index, self.channel_index)

    def with_kind(self, kind):
        return replace(self, kind=kind)

    def to_dict(self):
        return {'layer': self.tap.layer_index, 'slot': self.tap.slot,
                'token_index': self.token_index,
                'channel_index': self.channel_index, 'value': self.value,
                'kind': self.kind}


def ma_mask(values, abs_threshold=MA_ABS_THRESHOLD,
            median_ratio=MA_MEDIAN_RATIO):
    """Return a boolean array marking the MA entries of `values`.

    The median is taken over every entry of the tensor, in float64, and
    averages the two middle magnitudes for an even entry count.

    :param values: array-like or tensor of any shape
    :rtype: numpy.ndarray
    """
    if hasattr(values, 'detach'):
        values = values.detach().cpu().numpy()
    magnitudes = np.abs(np.asarray(values, dtype=np.float64))
    median = np.median(magnitudes)
    return (magnitudes > abs_threshold) & (magnitudes >= median_ratio * median)


def detect_mas(snapshot, abs_threshold=MA_ABS_THRESHOLD,
               median_ratio=MA_MEDIAN_RATIO):
    """Return every massive activation in a snapshot.

    :param ActivationSnapshot snapshot: the snapshot to scan
    :returns: unclassified events in (token, channel) order
    :rtype: list(MassiveActivationEvent)
    :raises EmptyTensorError: if the snapshot has no entries
    :raises NonFiniteActivationError: if the snapshot holds NaN or Inf
    """
    values = snapshot.values
    check_non_empty(values, 'detecting MAs at {0}'.format(snapshot.tap),
                    'detect_mas')
    check_finite(values, 'detecting MAs at {0}'.format(snapshot.tap),
                 'detect_mas')

    array = values.numpy()
    tokens, channels = np.nonzero(ma_mask(array, abs_threshold, median_ratio))
    return [MassiveActivationEvent(snapshot.tap, int(t), int(c),
                                   float(array[t, c]))
            for t, c in zip(tokens, channels)]


@dataclass(frozen=True)
class TopEntry:
    value: float
    token_index: int
    channel_index: int


def top_k_entries(snapshot, k):
    """Return the k largest-magnitude entries of a snapshot, signs kept.

    Ties keep row-major order.

    :rtype: list(TopEntry)
    """
    if k < 1:
        raise ValueError('k must be at least 1, got {0}'.format(k))
    array = snapshot.values.numpy()
    flat = np.abs(array.reshape(-1).astype(np.float64))
    order = np.argsort(-flat, kind='stable')[:k]
    channels = array.shape[1]
    return [TopEntry(float(array.reshape(-1)[i]), int(i // channels),
                     int(i % channels)) for i in order]


@dataclass(frozen=True)
class MaProfile:
    """MAs of one slot across the layers of one forward pass.

    `layers` maps a layer index to its top-k events, sorted by descending
    magnitude; `detected` keeps every event of the layer in the same order
    and is what classification and trends match positions against.
    """

    slot: str
    pass_id: str
    input_digest: str
    k: int
    layers: dict = field(compare=False)
    detected: dict = field(compare=False, repr=False)

    @property
    def layer_indices(self):
        return tuple(sorted(self.detected))

    def positions(self, layer_index):
        return frozenset(e.position for e in
                         self.detected.get(layer_index, ()))

    def events(self):
        """Top-k events of every layer, in layer order."""
        return [e for i in self.layer_indices for e in self.layers[i]]

    def counts(self):
        """Number of events of each kind over every detected event."""
        counts = {UNCLASSIFIED: 0, TRUE_MA: 0, FAKE_MA: 0}
        for events in self.detected.values():
            for event in events:
                counts[event.kind] += 1
        return counts

    def to_dict(self):
        return {'slot': self.slot, 'pass_id': self.pass_id,
                'input_digest': self.input_digest, 'k': self.k,
                'layers': {str(i): [e.to_dict() for e in self.layers[i]]
                           for i in self.layer_indices},
                'counts': self.counts()}


def _by_magnitude(events):
    return tuple(sorted(events, key=lambda e: -abs(e.value)))


def build_ma_profile(snapshots, k=DEFAULT_TOP_K):
    """Detect MAs in per-layer snapshots of one slot and one pass.

    :param snapshots: ActivationSnapshots, at most one per layer
    :param int k: number of events kept per layer in `layers`
    :rtype: MaProfile
    :raises ProvenanceError: if snapshots mix passes or slots
    """
    if k < 1:
        raise ValueError('k must be at least 1, got {0}'.format(k))
    snapshots = list(snapshots)
    if not snapshots:
        raise ProvenanceError('cannot build a profile from no snapshots')
    first = snapshots[0]
    detected = {}
    for snapshot in snapshots:
        if (snapshot.pass_id != first.pass_id or
                snapshot.tap.slot != first.tap.slot):
            raise ProvenanceError(
                'profile snapshots mix {0}/{1} with {2}/{3}'.format(
                    first.pass_id, first.tap.slot, snapshot.pass_id,
                    snapshot.tap.slot))
        detected[snapshot.tap.layer_index] = _by_magnitude(
            detect_mas(snapshot))

    layers = {i: events[:k] for i, events in detected.items()}
    logger.debug({'msg': 'built MA profile', 'slot': first.tap.slot,
                  'pass_id': first.pass_id,
                  'count': sum(len(e) for e in detected.values())})
    return MaProfile(first.tap.slot, first.pass_id, first.input_digest, k,
                     layers, detected)


def classify_tma_fma(baseline, no_residual):
    """Label every baseline MA as a true or a fake MA.

    An event is a true MA when an event at the same (layer, token, channel)
    persists in the profile recorded with residual adds disabled.

    :param MaProfile baseline: profile of the unmodified pass
    :param MaProfile no_residual: profile of the same input without residuals
    :rtype: MaProfile
    :raises ProvenanceError: if the profiles do not share input and slot
    """
    if (baseline.input_digest != no_residual.input_digest or
            baseline.slot != no_residual.slot):
        err = ProvenanceError(
            'cannot classify {0} of input {1} against {2} of input {3}'
            .format(baseline.slot, baseline.input_digest, no_residual.slot,
                    no_residual.input_digest))
        logger.error({'msg': 'exiting classify_tma_fma', 'err': err})
        raise err

    def label(layer_index, events):
        persisting = no_residual.positions(layer_index)
        return tuple(e.with_kind(TRUE_MA if e.position in persisting
                                 else FAKE_MA) for e in events)

    detected = {i: label(i, events)
                for i, events in baseline.detected.items()}
    layers = {i: events[:baseline.k] for i, events in detected.items()}
    classified = MaProfile(baseline.slot, baseline.pass_id,
                           baseline.input_digest, baseline.k, layers,
                           detected)
    logger.info(dict({'msg': 'classified massive activations',
                      'slot': baseline.slot}, **classified.counts()))
    return classified


def profile_pass(model, tokens, slot='x1', k=DEFAULT_TOP_K,
                 no_residual=False):
    """Record `slot` in every layer for one input and profile it."""
    taps = [TapPoint.of(slot, i) for i in range(model.config.layer_count)]
    if no_residual:
        snapshots = run_without_residuals(model, tokens,
                                          all_residuals(model.descriptor),
                                          taps)
    else:
        _, snapshots = model.run(tokens, taps=taps)
    return build_ma_profile(snapshots, k)


def classify_pass(model, tokens, slot='x1', k=DEFAULT_TOP_K):
    """Profile one input with and without residuals and classify it."""
    baseline = profile_pass(model, tokens, slot, k)
    stripped = profile_pass(model, tokens, slot, k, no_residual=True)
    return classify_tma_fma(baseline, stripped)


@dataclass(frozen=True)
class TrendConfig:
    initial_fraction: float = INITIAL_LAYER_FRACTION
    final_count: int = FINAL_LAYER_COUNT

    def __post_init__(self):
        if not 0 < self.initial_fraction <= 1:
            raise ValueError('initial_fraction must be in (0, 1]')
        if self.final_count < 1:
            raise ValueError('final_count must be at least 1')

    def windows(self, layer_count):
        """Return (initial layers, final layers); final never overlaps."""
        initial_count = max(1, int(math.ceil(self.initial_fraction *
                                             layer_count)))
        initial = tuple(range(min(initial_count, layer_count)))
        final = tuple(i for i in range(max(0, layer_count - self.final_count),
                                       layer_count)
                      if i not in initial)
        return initial, final


@dataclass(frozen=True)
class TrendRecord:
    channel_index: int
    token_index: int
    initial_layer: int
    initial_value: float
    final_layer: int
    final_value: float

    @property
    def sign_flipped(self):
        return self.initial_value * self.final_value < 0

    def to_dict(self):
        return {'channel_index': self.channel_index,
                'token_index': self.token_index,
                'initial_layer': self.initial_layer,
                'initial_value': self.initial_value,
                'final_layer': self.final_layer,
                'final_value': self.final_value,
                'sign_flipped': self.sign_flipped}


@dataclass(frozen=True)
class TrendReport:
    initial_layers: tuple
    final_layers: tuple
    records: tuple

    @property
    def flipped_count(self):
        return sum(1 for r in self.records if r.sign_flipped)

    def to_dict(self):
        return {'initial_layers': list(self.initial_layers),
                'final_layers': list(self.final_layers),
                'records': [r.to_dict() for r in self.records],
                'flipped_count': self.flipped_count}


def _true_events(profile, layer_index):
    return [e for e in profile.detected.get(layer_index, ())
            if e.kind != FAKE_MA]


def trend_analysis(profile, config=None):
    """Pair initial-layer TMAs with final-layer TMAs at the same position.

    For every (token, channel) hosting a TMA in the initial layers, the
    largest initial event is paired with the TMA at that position in each
    final layer that has one. Fake MAs are ignored; unclassified events
    are taken as TMAs.

    :param MaProfile profile: one pass, covering every layer of the model
    :param TrendConfig config: layer windows
    :rtype: TrendReport
    """
    config = config or TrendConfig()
    layer_count = len(profile.layer_indices)
    if profile.layer_indices != tuple(range(layer_count)):
        raise ProvenanceError(
            'trend analysis needs every layer, profile has {0}'.format(
                list(profile.layer_indices)))
    initial, final = config.windows(layer_count)

    origins = {}
    for layer_index in initial:
        for event in _true_events(profile, layer_index):
            best = origins.get(event.position)
            if best is None or abs(event.value) > abs(best.value):
                origins[event.position] = event

    records = []
    for position in sorted(origins):
        origin = origins[position]
        for layer_index in final:
            for event in _true_events(profile, layer_index):
                if event.position == position:
                    records.append(TrendRecord(
                        channel_index=position[1], token_index=position[0],
                        initial_layer=origin.tap.layer_index,
                        initial_value=origin.value, final_layer=layer_index,
                        final_value=event.value))

    report = TrendReport(initial, final, tuple(records))
    logger.info({'msg': 'finished trend analysis', 'pairs': len(records),
                 'flipped': report.flipped_count})
    return report


def extreme_layer_rows(profile, config=None, top=2):
    """Summarize TMAs in initial, second-to-last and last layers.

    Rows are ``initial_top1``, ``initial_top2``, ``last2_top1``, ...,
    ``last1_top2``. A row with no TMA (or no such layer) reports N/A.

    :rtype: list(dict)
    """
    config = config or TrendConfig()
    layer_count = len(profile.layer_indices)
    initial, _ = config.windows(layer_count)

    groups = [('initial', initial)]
    for name, offset in (('last2', 2), ('last1', 1)):
        layer_index = layer_count - offset
        if layer_index < 0 or layer_index in initial:
            groups.append((name, ()))
        else:
            groups.append((name, (layer_index,)))

    rows = []
    for name, layer_indices in groups:
        events = _by_magnitude(e for i in layer_indices
                               for e in _true_events(profile, i))
        for rank in range(top):
            row = {'row': '{0}_top{1}'.format(name, rank + 1)}
            if rank < len(events):
                event = events[rank]
                row.update(layer=event.tap.layer_index, value=event.value,
                           token_index=event.token_index,
                           channel_index=event.channel_index)
            else:
                row.update(layer=NOT_AVAILABLE, value=NOT_AVAILABLE,
                           token_index=NOT_AVAILABLE,
                           channel_index=NOT_AVAILABLE)
            rows.append(row)
    return rows


@dataclass(frozen=True)
class SublayerTable:
    """Top-k signed values of every defined slot of one layer."""

    layer_index: int
    k: int
    rows: tuple
    notes: dict = field(compare=False)

    def values(self, slot):
        for row_slot, entries in self.rows:
            if row_slot == slot:
                return tuple(e.value for e in entries)
        raise KeyError(slot)

    def to_records(self):
        records = []
        for slot, entries in self.rows:
            record = {'layer': self.layer_index, 'slot': slot, 'note': ''}
            for rank, entry in enumerate(entries):
                record['top{0}'.format(rank + 1)] = entry.value
            records.append(record)
        for slot, note in sorted(self.notes.items()):
            records.append({'layer': self.layer_index, 'slot': slot,
                            'note': note})
        return records


def profile_sublayers(model, tokens, layer_index, k=SUBLAYER_TOP_K,
                      plan=None):
    """Report the k largest-magnitude entries at every slot of a layer.

    Slots a standard MLP does not have (y5) or only aliases (y6) are
    omitted and listed in `notes` instead.

    :param DecoderModel model:
    :param tokens: one input sequence
    :param int layer_index: layer to profile
    :param int k: entries per slot
    :param plan: optional plan (or plans) applied during the pass
    :rtype: SublayerTable
    """
    if k < 1:
        raise ValueError('k must be at least 1, got {0}'.format(k))
    ffn_kind = model.descriptor.ffn_kind
    taps = [TapPoint.of(slot, layer_index)
            for slot in canonical_slots(ffn_kind)]
    plans = () if plan is None else (
        plan if isinstance(plan, (list, tuple)) else (plan,))
    _, snapshots = model.run(tokens, taps=taps, plans=plans)

    rows = tuple((s.tap.slot, tuple(top_k_entries(s, k))) for s in snapshots)
    notes = dict(UNDEFINED_SLOTS[ffn_kind])
    notes.update({slot: 'alias of {0}'.format(target)
                  for slot, target in ALIASED_SLOTS[ffn_kind].items()})
    return SublayerTable(layer_index, k, rows, notes)


@dataclass(frozen=True)
class Birthplace:
    layer_index: int
    slot: str
    event: MassiveActivationEvent


def find_birthplace(model, tokens, plan=None):
    """Find the earliest (layer, slot) of a pass that holds any MA.

    Slots are scanned in forward order, aliases skipped.

    :returns: the first Birthplace, or None when the pass has no MA
    """
    start_time = time.time()
    ffn_kind = model.descriptor.ffn_kind
    taps = [TapPoint.of(slot, i) for i in range(model.config.layer_count)
            for slot in canonical_slots(ffn_kind)]
    found = []

    def sink(snapshot):
        if found:
            return
        events = _by_magnitude(detect_mas(snapshot))
        if events:
            found.append(Birthplace(snapshot.tap.layer_index,
                                    snapshot.tap.slot, events[0]))

    plans = () if plan is None else (plan,)
    model.run(tokens, taps=taps, plans=plans, sink=sink)

    birthplace = found[0] if found else None
    logger.info({'msg': 'searched for MA birthplace',
                 'layer': birthplace.layer_index if birthplace else None,
                 'slot': birthplace.slot if birthplace else None,
                 'elapsed': secs_since(start_time)})
    return birthplace
