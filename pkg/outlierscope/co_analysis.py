"""Channel-wise outlier (CO) detection and attribution.

A channel j of a tokens x channels tensor A is a CO when its mean lies more
than m * std(A) away from mean(A) while the channel's own std stays below
beta_std. Upper outliers sit above the tensor mean and lower outliers
below; both are reported, with their polarity. All standard deviations are
population (ddof 0) statistics computed in float64.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from outlierscope import CO_BETA_STD, CO_M, CO_M_SWEEP
from outlierscope.abstract_architecture import LAYERNORM, RMSNORM
from outlierscope.ma_analysis import ma_mask
from outlierscope.taps import FFN, SELF_ATTENTION, TapPoint
from outlierscope.utils import (DegenerateTensorError, ShapeMismatchError,
                                check_finite)

logger = logging.getLogger(__name__)

UPPER = 'upper'
LOWER = 'lower'

INPUT = 'input'
STRIPPED = 'stripped'
STANDARDIZED = 'standardized'
RESCALED = 'rescaled'

WEIGHT_STATISTICS = ('mean_abs', 'l2')


@dataclass(frozen=True)
class CoCriteria:
    m: float = CO_M
    beta_std: float = CO_BETA_STD

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError('m must be positive, got {0}'.format(self.m))
        if not self.beta_std > 0:
            raise ValueError(
                'beta_std must be positive, got {0}'.format(self.beta_std))

    def to_dict(self):
        return {'m': self.m, 'beta_std': self.beta_std}


@dataclass(frozen=True)
class OutlierChannelSet:
    """Channels flagged by the CO criterion, with the statistics used.

    `per_channel_mean` and `per_channel_std` cover every channel, flagged
    or not. `polarity` maps each flagged channel to 'upper' or 'lower'.
    """

    tap: TapPoint
    stage: str
    criteria: CoCriteria
    channel_indices: tuple
    polarity: dict = field(compare=False)
    per_channel_mean: np.ndarray = field(compare=False, repr=False)
    per_channel_std: np.ndarray = field(compare=False, repr=False)
    tensor_mean: float = 0.0
    tensor_std: float = 0.0

    def __len__(self):
        return len(self.channel_indices)

    @property
    def upper_indices(self):
        return tuple(j for j in self.channel_indices
                     if self.polarity[j] == UPPER)

    @property
    def lower_indices(self):
        return tuple(j for j in self.channel_indices
                     if self.polarity[j] == LOWER)

    def to_dict(self):
        return {'tap': self.tap.name if self.tap else None,
                'stage': self.stage, 'm': self.criteria.m,
                'beta_std': self.criteria.beta_std,
                'channel_indices': list(self.channel_indices),
                'polarity': [self.polarity[j] for j in self.channel_indices],
                'tensor_mean': self.tensor_mean,
                'tensor_std': self.tensor_std}


def flag_channels(values, criteria=None, tap=None, stage=INPUT):
    """Run the CO criterion on a tokens x channels array.

    :param values: 2-D array-like
    :param CoCriteria criteria: thresholds, defaults apply when None
    :param TapPoint tap: tap the values were recorded at, if any
    :param str stage: label carried into the result
    :rtype: OutlierChannelSet
    :raises DegenerateTensorError: for fewer than two tokens
    """
    criteria = criteria or CoCriteria()
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeMismatchError(
            'expected a tokens x channels matrix, got shape {0}'.format(
                list(array.shape)))
    if array.shape[0] < 2:
        err = DegenerateTensorError(
            'channel std needs at least two tokens, got {0}'.format(
                array.shape[0]))
        logger.error({'msg': 'exiting flag_channels', 'err': err})
        raise err

    tensor_mean = float(array.mean())
    tensor_std = float(array.std())
    means = array.mean(axis=0)
    stds = array.std(axis=0)

    calm = stds < criteria.beta_std
    upper = calm & (means > tensor_mean + criteria.m * tensor_std)
    lower = calm & (means < tensor_mean - criteria.m * tensor_std)

    polarity = {int(j): UPPER for j in np.nonzero(upper)[0]}
    polarity.update({int(j): LOWER for j in np.nonzero(lower)[0]})
    return OutlierChannelSet(tap=tap, stage=stage, criteria=criteria,
                             channel_indices=tuple(sorted(polarity)),
                             polarity=polarity, per_channel_mean=means,
                             per_channel_std=stds, tensor_mean=tensor_mean,
                             tensor_std=tensor_std)


def strip_massive_activations(values):
    """Replace MA entries with the mean of the unstripped tensor."""
    array = np.asarray(values, dtype=np.float64)
    return np.where(ma_mask(array), array.mean(), array)


def detect_outlier_channels(snapshot, criteria=None, strip_mas=False):
    """Flag the channel-wise outliers of a snapshot.

    :param ActivationSnapshot snapshot: the tensor to scan
    :param CoCriteria criteria: thresholds
    :param bool strip_mas: replace MAs by the tensor mean first
    :rtype: OutlierChannelSet
    :raises DegenerateTensorError: if the snapshot has a single token
    """
    check_finite(snapshot.values, 'detecting COs at {0}'.format(snapshot.tap),
                 'detect_outlier_channels')
    values = snapshot.values.numpy()
    stage = INPUT
    if strip_mas:
        values = strip_massive_activations(values)
        stage = STRIPPED
    flagged = flag_channels(values, criteria, snapshot.tap, stage)
    logger.debug({'msg': 'detected outlier channels',
                  'tap': snapshot.tap.name, 'stage': stage,
                  'count': len(flagged)})
    return flagged


def m_sweep(snapshot, ms=CO_M_SWEEP, beta_std=CO_BETA_STD, strip_mas=False):
    """Detect COs at several m values; returns {m: OutlierChannelSet}."""
    return {m: detect_outlier_channels(snapshot, CoCriteria(m, beta_std),
                                       strip_mas)
            for m in ms}


def check_nested(sets_by_m):
    """Return True when flagged sets grow as m shrinks.

    :param dict sets_by_m: m -> OutlierChannelSet (or set of indices)
    """
    ordered = [set(getattr(s, 'channel_indices', s))
               for _, s in sorted(sets_by_m.items(), reverse=True)]
    return all(a <= b for a, b in zip(ordered, ordered[1:]))


def normalization_stages(values, gamma, beta_shift=None, norm_kind=RMSNORM,
                         eps=1e-5):
    """Split a normalization into its standardized and rescaled outputs.

    LayerNorm standardizes each token by its mean and std, RMSNorm divides
    each token by its root mean square; rescaling multiplies by gamma and
    adds beta_shift when there is one.

    :returns: (standardized, rescaled) float64 arrays
    :raises ShapeMismatchError: if gamma or beta_shift do not fit
    :raises DegenerateTensorError: if a token has zero std (or zero RMS)
    """
    array = np.asarray(values, dtype=np.float64)
    gamma = _as_array(gamma).reshape(-1)
    if gamma.shape[0] != array.shape[-1]:
        raise ShapeMismatchError(
            'gamma has {0} entries for {1} channels'.format(
                gamma.shape[0], array.shape[-1]))
    if norm_kind == LAYERNORM and beta_shift is None:
        raise ValueError('layernorm decomposition needs beta_shift')
    if norm_kind == RMSNORM and beta_shift is not None:
        raise ValueError('rmsnorm has no beta_shift')

    if norm_kind == LAYERNORM:
        centered = array - array.mean(axis=-1, keepdims=True)
        spread = np.sqrt((centered ** 2).mean(axis=-1, keepdims=True))
        scale = np.sqrt(spread ** 2 + eps)
    else:
        centered = array
        spread = np.sqrt((array ** 2).mean(axis=-1, keepdims=True))
        scale = np.sqrt(spread ** 2 + eps)

    if np.any(spread == 0):
        token = int(np.nonzero(spread.reshape(-1) == 0)[0][0])
        err = DegenerateTensorError(
            'token {0} has zero {1}'.format(
                token, 'std' if norm_kind == LAYERNORM else 'RMS'))
        logger.error({'msg': 'exiting normalization_stages', 'err': err})
        raise err

    standardized = centered / scale
    rescaled = standardized * gamma
    if beta_shift is not None:
        beta_shift = _as_array(beta_shift).reshape(-1)
        if beta_shift.shape != gamma.shape:
            raise ShapeMismatchError(
                'beta_shift has {0} entries for {1} channels'.format(
                    beta_shift.shape[0], gamma.shape[0]))
        rescaled = rescaled + beta_shift
    return standardized, rescaled


def decompose_normalization(input_snapshot, gamma, beta_shift=None,
                            norm_kind=RMSNORM, criteria=None, eps=1e-5,
                            strip_mas=False):
    """Attribute COs to the standardization or the rescaling step.

    :param ActivationSnapshot input_snapshot: the normalization input (x1/y1)
    :param gamma: the normalization scale vector
    :param beta_shift: the LayerNorm shift, None for RMSNorm
    :param str norm_kind: 'layernorm' or 'rmsnorm'
    :param CoCriteria criteria: thresholds
    :param bool strip_mas: remove MAs from the input first
    :returns: (standardized, rescaled) OutlierChannelSets
    """
    values = input_snapshot.values.numpy()
    if strip_mas:
        values = strip_massive_activations(values)
    standardized, rescaled = normalization_stages(values, gamma, beta_shift,
                                                  norm_kind, eps)
    tap = input_snapshot.tap
    before = flag_channels(standardized, criteria, tap, STANDARDIZED)
    after = flag_channels(rescaled, criteria, tap, RESCALED)
    logger.info({'msg': 'decomposed normalization', 'tap': tap.name,
                 'standardized': len(before), 'rescaled': len(after)})
    return before, after


@dataclass(frozen=True)
class OtcSet:
    """Rows of a projection weight that trigger output channel outliers."""

    weight_name: str
    row_indices: tuple
    total_rows: int

    @property
    def fraction(self):
        return len(self.row_indices) / self.total_rows

    def to_dict(self):
        return {'weight_name': self.weight_name,
                'row_indices': list(self.row_indices),
                'total_rows': self.total_rows, 'fraction': self.fraction}


def identify_otcs(weight, input_snapshot, output_snapshot, criteria=None,
                  bias=None, weight_name=''):
    """Find the weight rows whose output COs do not come from input COs.

    A row is an OTC when its output channel is a CO of the projection
    output and stays a CO after the input's CO channels are replaced by
    the input tensor mean and the projection is recomputed.

    :param weight: [rows, in] projection weight
    :param ActivationSnapshot input_snapshot: projection input (x2)
    :param ActivationSnapshot output_snapshot: projection output (x3)
    :param CoCriteria criteria: thresholds
    :param bias: optional projection bias
    :param str weight_name: name carried into the result
    :rtype: OtcSet
    :raises ShapeMismatchError: if the three shapes do not line up
    """
    matrix = _as_array(weight)
    inputs = input_snapshot.values.numpy().astype(np.float64)
    outputs = output_snapshot.values.numpy()
    rows, width = matrix.shape
    if (inputs.shape[1] != width or outputs.shape[1] != rows or
            inputs.shape[0] != outputs.shape[0]):
        raise ShapeMismatchError(
            'weight {0} does not map input {1} to output {2}'.format(
                list(matrix.shape), list(inputs.shape), list(outputs.shape)))

    output_cos = flag_channels(outputs, criteria, output_snapshot.tap)
    input_cos = flag_channels(inputs, criteria, input_snapshot.tap)

    neutral = inputs.copy()
    neutral[:, list(input_cos.channel_indices)] = inputs.mean()
    recomputed = neutral @ matrix.T
    if bias is not None:
        recomputed = recomputed + _as_array(bias).reshape(-1)
    recheck = flag_channels(recomputed, criteria, output_snapshot.tap,
                            'recomputed')

    otcs = OtcSet(weight_name, tuple(sorted(
        set(output_cos.channel_indices) & set(recheck.channel_indices))),
        rows)
    logger.info({'msg': 'identified outlier triggering channels',
                 'weight': weight_name, 'count': len(otcs.row_indices),
                 'fraction': otcs.fraction})
    return otcs


# Projection name -> tap holding its output.
_PROJECTION_OUTPUTS = {'q': ('q_proj', 'x3'), 'k': ('k_proj', 'x4'),
                       'v': ('v_proj', 'x5')}


def identify_layer_otcs(model, tokens, criteria=None,
                        projections=('q', 'k', 'v')):
    """Identify OTCs of q/k/v projections in every layer from one pass.

    :returns: {'layers.{i}.{q,k,v}_proj': OtcSet}
    """
    layer_count = model.config.layer_count
    slots = ['x2'] + [_PROJECTION_OUTPUTS[p][1] for p in projections]
    taps = [TapPoint.of(slot, i) for i in range(layer_count)
            for slot in slots]
    _, snapshots = model.run(tokens, taps=taps)
    recorded = {(s.tap.layer_index, s.tap.slot): s for s in snapshots}

    result = {}
    for i in range(layer_count):
        for projection in projections:
            name, slot = _PROJECTION_OUTPUTS[projection]
            weight_name = 'layers.{0}.{1}'.format(i, name)
            result[weight_name] = identify_otcs(
                model.parameter(weight_name + '.weight'),
                recorded[(i, 'x2')], recorded[(i, slot)], criteria,
                bias=model.params.get(weight_name + '.bias'),
                weight_name=weight_name)
    return result


def _as_array(tensor):
    if isinstance(tensor, torch.Tensor):
        tensor = tensor.detach().cpu().double().numpy()
    return np.asarray(tensor, dtype=np.float64)


def weight_channel_statistics(weight, sd_threshold, statistic='mean_abs'):
    """Flag weight rows whose statistic is more than sd_threshold SDs out.

    Each row (output channel) is summarized by the mean of its absolute
    values ('mean_abs') or its L2 norm ('l2'); the statistic is z-scored
    across rows. A 1-D vector (e.g. a norm scale) is read as n rows of one.

    :param weight: [rows, in] matrix or 1-D vector
    :param float sd_threshold: cutoff in cross-row standard deviations
    :param str statistic: 'mean_abs' or 'l2'
    :returns: sorted row indices
    :rtype: list(int)
    :raises DegenerateTensorError: if there is a single row
    """
    if not sd_threshold > 0:
        raise ValueError(
            'sd_threshold must be positive, got {0}'.format(sd_threshold))
    if statistic not in WEIGHT_STATISTICS:
        raise ValueError('unknown statistic `{0}`'.format(statistic))

    matrix = _as_array(weight)
    if matrix.ndim == 1:
        matrix = matrix.reshape(-1, 1)
    if matrix.shape[0] < 2:
        raise DegenerateTensorError(
            'channel statistics need at least two rows, got {0}'.format(
                matrix.shape[0]))

    if statistic == 'mean_abs':
        stats = np.abs(matrix).mean(axis=1)
    else:
        stats = np.sqrt((matrix ** 2).sum(axis=1))
    spread = stats.std()
    if spread == 0:
        return []
    z_scores = (stats - stats.mean()) / spread
    return [int(j) for j in np.nonzero(np.abs(z_scores) > sd_threshold)[0]]


@dataclass(frozen=True)
class GammaEditSeries:
    """Per-layer CO counts at x2 and y2 before and after gamma edits."""

    criteria: CoCriteria
    rows: tuple

    def reduced_fraction(self, policy='mean'):
        """Share of (layer, site) rows whose count dropped below baseline
        among rows that had any baseline CO."""
        key = 'gamma_{0}'.format(policy)
        eligible = [r for r in self.rows if r['baseline'] > 0]
        if not eligible:
            return None
        return (sum(1 for r in eligible if r[key] < r['baseline']) /
                len(eligible))

    def to_records(self):
        return [dict(r) for r in self.rows]


_NORM_SITES = (('x2', SELF_ATTENTION), ('y2', FFN))


def gamma_edit_series(model, tokens, criteria=None,
                      policies=('mean', 'zero')):
    """Count COs at every norm output, then again with flagged gammas edited.

    The gamma indices of each norm are the COs flagged at its output in the
    unedited pass; every edit is applied at once for the edited passes.

    :rtype: GammaEditSeries
    """
    from outlierscope.interventions import plan_gamma_edit

    criteria = criteria or CoCriteria()
    layer_count = model.config.layer_count
    taps = [TapPoint.of(slot, i) for i in range(layer_count)
            for slot, _ in _NORM_SITES]

    def counts(plans):
        _, snapshots = model.run(tokens, taps=taps, plans=plans)
        return {(s.tap.layer_index, s.tap.slot):
                detect_outlier_channels(s, criteria) for s in snapshots}

    baseline = counts(())
    edited = {}
    for policy in policies:
        plans = [plan_gamma_edit(i, block_kind,
                                 baseline[(i, slot)].channel_indices, policy)
                 for i in range(layer_count)
                 for slot, block_kind in _NORM_SITES]
        edited[policy] = counts(plans)

    rows = []
    for i in range(layer_count):
        for slot, _ in _NORM_SITES:
            row = {'layer': i, 'site': slot,
                   'baseline': len(baseline[(i, slot)])}
            for policy in policies:
                row['gamma_{0}'.format(policy)] = len(
                    edited[policy][(i, slot)])
            rows.append(row)
    series = GammaEditSeries(criteria, tuple(rows))
    logger.info({'msg': 'finished gamma edit series',
                 'reduced_fraction': series.reduced_fraction('mean')})
    return series
