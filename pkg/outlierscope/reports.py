"""Command runners behind the CLI, and the report files they write.

Every runner takes the plain parameter dict a command was invoked with
(the same dict the run ledger stores, so `replay` can call the runner
again) and returns an `Outcome`. Tables are written as CSV through pandas,
structured results as JSON, and figures (with ``plots``) are rendered from
the CSV files just written, never from a second computation.
"""
import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import pandas as pd
import torch

from outlierscope import DEFAULT_TOP_K, SUBLAYER_TOP_K, WEIGHT_FAMILIES
from outlierscope.abstract_architecture import NORMS
from outlierscope.activation_dump import read_dump, write_dump
from outlierscope.co_analysis import (CoCriteria, RESCALED, STANDARDIZED,
                                      check_nested, decompose_normalization,
                                      detect_outlier_channels,
                                      gamma_edit_series, identify_layer_otcs,
                                      m_sweep)
from outlierscope.dict_logging import secs_since
from outlierscope.eval_harness import (EvalConfig, LOCAL_TEXT, evaluate_ppl,
                                       sample_corpus, samples_digest)
from outlierscope.interventions import (channel_ablation_plans, otc_plans,
                                        plan_from_json, plan_gamma_edit,
                                        plan_to_json, plan_tma_removal,
                                        plan_weight_ablation, plans_digest,
                                        sample_random_channels, weight_rows)
from outlierscope.ledger import DIVERGED, OK
from outlierscope.ma_analysis import (build_ma_profile, classify_pass,
                                      extreme_layer_rows, find_birthplace,
                                      profile_sublayers, top_k_entries,
                                      trend_analysis)
from outlierscope.model_adapter import all_residuals, load_model
from outlierscope.taps import FFN, SELF_ATTENTION, TapPoint, parse_taps
from outlierscope.utils import (PlanError, TapResolutionError, digest,
                                json_default)

logger = logging.getLogger(__name__)

DTYPES = {'float32': torch.float32, 'bfloat16': torch.bfloat16,
          'float16': torch.float16}

DATASET_NAMES = {'wikitext': 'wikitext', 'c4': 'c4', 'local': LOCAL_TEXT}


@dataclass
class Outcome:
    result: dict
    artifacts: list = field(default_factory=list)
    model_id: str = None
    plan_digest: str = None
    status: str = OK


class ArtifactWriter(object):
    """Writes report files into one directory and remembers them.

    `cleanup` removes everything written so far; `artifact_writer` calls
    it when a runner fails part way.
    """

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.paths = []
        self.created_dir = not os.path.isdir(out_dir)
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        path = os.path.join(self.out_dir, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def track(self, path):
        self.paths.append(path)
        return path

    def csv(self, name, records, columns=None):
        path = self.path(name)
        pd.DataFrame.from_records(records, columns=columns).to_csv(
            path, index=False)
        return self.track(path)

    def json(self, name, obj):
        path = self.path(name)
        with open(path, 'w') as f:
            json.dump(obj, f, indent=2, sort_keys=True,
                      default=json_default)
        return self.track(path)

    def text(self, name, text):
        path = self.path(name)
        with open(path, 'w') as f:
            f.write(text)
        return self.track(path)

    def cleanup(self):
        for path in reversed(self.paths):
            if os.path.exists(path):
                os.remove(path)
        self.paths = []
        if self.created_dir:
            shutil.rmtree(self.out_dir, ignore_errors=True)


@contextmanager
def artifact_writer(out_dir):
    writer = ArtifactWriter(out_dir)
    try:
        yield writer
    except BaseException as err:
        logger.error({'msg': 'removing partial output', 'out': out_dir,
                      'files': len(writer.paths), 'err': err})
        writer.cleanup()
        raise


def _load(params):
    return load_model(params['model'], params.get('weights_location'),
                      dtype=DTYPES[params.get('dtype') or 'float32'])


def _samples(model, params):
    config = EvalConfig(dataset=DATASET_NAMES[params['dataset']],
                        sample_count=params['samples'],
                        seed=params['seed'],
                        sequence_length=params['seq_len'])
    config.check_model(model.descriptor)
    encode = model.encode if model.tokenizer is not None else None
    samples = sample_corpus(config, params.get('corpus'), encode=encode)
    return config, samples


def _criteria(params):
    return CoCriteria(params['m'], params['beta_std'])


def run_profile(params):
    """Profile MAs at the requested taps of every sample.

    Writes ``ma_profile.csv`` (every detected MA), ``topk_series.csv``
    (the per-layer top-k magnitudes, MA or not), ``profile.json`` and,
    for each layer in ``sublayers``, ``sublayers.csv`` of the first sample.
    """
    start_time = time.time()
    model = _load(params)
    _, samples = _samples(model, params)
    taps = parse_taps(params.get('taps') or 'x1', model.config.layer_count)
    k = params.get('top_k') or DEFAULT_TOP_K
    disabled = (all_residuals(model.descriptor)
                if params.get('no_residual') else ())

    ma_rows = []
    series_rows = []
    profiles = []
    for index, tokens in enumerate(samples):
        _, snapshots = model.run(tokens, taps=taps, disabled=disabled)
        by_slot = {}
        for snapshot in snapshots:
            by_slot.setdefault(snapshot.tap.slot, []).append(snapshot)
            record = {'sample': index, 'slot': snapshot.tap.slot,
                      'layer': snapshot.tap.layer_index}
            for rank, entry in enumerate(top_k_entries(snapshot, k), 1):
                record['top{0}'.format(rank)] = abs(entry.value)
                record['top{0}_signed'.format(rank)] = entry.value
            series_rows.append(record)
        for slot in sorted(by_slot):
            profile = build_ma_profile(by_slot[slot], k)
            profiles.append(dict(profile.to_dict(), sample=index))
            for layer_index in profile.layer_indices:
                for event in profile.detected[layer_index]:
                    ma_rows.append(dict(event.to_dict(), sample=index))

    sublayer_rows = []
    for layer_index in params.get('sublayers') or ():
        table = profile_sublayers(model, samples[0], layer_index,
                                  SUBLAYER_TOP_K)
        sublayer_rows.extend(table.to_records())

    with artifact_writer(params['out']) as out:
        artifacts = [
            out.csv('ma_profile.csv', ma_rows,
                    columns=['sample', 'layer', 'slot', 'token_index',
                             'channel_index', 'value', 'kind']),
            out.csv('topk_series.csv', series_rows),
            out.json('profile.json', profiles),
        ]
        if sublayer_rows:
            artifacts.append(out.csv('sublayers.csv', sublayer_rows))
        if params.get('plots'):
            artifacts.extend(plot_topk_series(out, artifacts[1]))

    layers_with_ma = sorted({(r['slot'], r['layer']) for r in ma_rows})
    result = {'samples': len(samples), 'taps': [t.name for t in taps],
              'ma_count': len(ma_rows),
              'layers_with_ma': ['{0}@{1}'.format(s, i)
                                 for s, i in layers_with_ma],
              'no_residual': bool(params.get('no_residual')),
              'series': series_rows}
    logger.info({'msg': 'finished profile', 'ma_count': len(ma_rows),
                 'elapsed': secs_since(start_time)})
    return Outcome(result, artifacts, model.model_id)


def run_classify(params):
    """Classify x1 MAs of every sample and pair initial/final-layer TMAs.

    Writes ``classification.csv``, ``trends.csv``, ``extreme_layers.csv`` and
    ``classify.json``.
    """
    start_time = time.time()
    model = _load(params)
    _, samples = _samples(model, params)
    k = params.get('top_k') or DEFAULT_TOP_K

    event_rows = []
    trend_rows = []
    table_rows = []
    counts = {'true_ma': 0, 'fake_ma': 0}
    birthplaces = []
    for index, tokens in enumerate(samples):
        profile = classify_pass(model, tokens, 'x1', k)
        for layer_index in profile.layer_indices:
            for event in profile.detected[layer_index]:
                event_rows.append(dict(event.to_dict(), sample=index))
                counts[event.kind] += 1
        report = trend_analysis(profile)
        trend_rows.extend(dict(r.to_dict(), sample=index)
                          for r in report.records)
        table_rows.extend(dict(r, sample=index)
                          for r in extreme_layer_rows(profile))
        if params.get('birthplace'):
            birthplace = find_birthplace(model, tokens)
            birthplaces.append(None if birthplace is None else
                               {'sample': index,
                                'layer': birthplace.layer_index,
                                'slot': birthplace.slot,
                                'value': birthplace.event.value})

    result = {'samples': len(samples), 'counts': counts,
              'trend_pairs': len(trend_rows),
              'sign_flipped': sum(1 for r in trend_rows
                                  if r['sign_flipped']),
              'extreme_layers': [r for r in table_rows if r['sample'] == 0],
              'birthplaces': birthplaces}

    with artifact_writer(params['out']) as out:
        artifacts = [
            out.csv('classification.csv', event_rows,
                    columns=['sample', 'layer', 'slot', 'token_index',
                             'channel_index', 'value', 'kind']),
            out.csv('trends.csv', trend_rows,
                    columns=['sample', 'token_index', 'channel_index',
                             'initial_layer', 'initial_value',
                             'final_layer', 'final_value', 'sign_flipped']),
            out.csv('extreme_layers.csv', table_rows),
            out.json('classify.json', result),
        ]
    logger.info({'msg': 'finished classify', 'true_ma': counts['true_ma'],
                 'fake_ma': counts['fake_ma'],
                 'elapsed': secs_since(start_time)})
    return Outcome(result, artifacts, model.model_id)


def build_arms(model, samples, params):
    """Return [(arm name, plans)] for the intervene parameters."""
    policy = params.get('policy') or 'mean'
    seed = params['seed']
    arms = []

    if params.get('site'):
        arms.append(('tma-{0}-{1}'.format(params['site'], policy),
                     [plan_tma_removal(params['site'], policy)]))

    family = params.get('weights')
    if family:
        for sd in params.get('sd') or ():
            pair = channel_ablation_plans(model, family, sd, policy, seed)
            arms.append(('{0}-outliers-{1:g}sd'.format(family, sd),
                         list(pair.outlier_plans)))
            if params.get('random'):
                arms.append(('{0}-random-{1:g}sd'.format(family, sd),
                             list(pair.random_plans)))
        if params.get('random') and params.get('count'):
            arms.append(('{0}-random-{1}'.format(family, params['count']),
                         _random_family_plans(model, family, policy,
                                              params['count'], seed)))

    for projection in params.get('otc') or ():
        otc_sets = identify_layer_otcs(model, samples[0], _criteria(params),
                                       projections=(projection,))
        outliers, randoms = otc_plans(otc_sets, policy, seed)
        arms.append(('otc-{0}'.format(projection), list(outliers)))
        if params.get('random'):
            arms.append(('otc-{0}-random'.format(projection), list(randoms)))

    if params.get('gamma'):
        arms.append(('gamma-{0}'.format(policy),
                     _gamma_plans(model, samples[0], params, policy)))

    if params.get('plan'):
        with open(params['plan']) as f:
            arms.append(('plan-file', plan_from_json(f.read())))

    return arms


def _random_family_plans(model, family, policy, count, seed):
    if family not in WEIGHT_FAMILIES:
        raise PlanError('unknown weight family `{0}`'.format(family))
    plans = []
    for layer_index in range(model.config.layer_count):
        for name in WEIGHT_FAMILIES[family]:
            rows = weight_rows(model.descriptor, name)
            if rows is None:
                continue
            indices = sample_random_channels(rows, count, seed)
            seed += 1
            if name in NORMS:
                block_kind = SELF_ATTENTION if name == 'attn_norm' else FFN
                plans.append(plan_gamma_edit(layer_index, block_kind,
                                             indices, policy))
            else:
                plans.append(plan_weight_ablation(name, indices, policy,
                                                  layer=layer_index))
    return plans


def _gamma_plans(model, tokens, params, policy):
    criteria = _criteria(params)
    taps = [TapPoint.of(slot, i) for i in range(model.config.layer_count)
            for slot in ('x2', 'y2')]
    _, snapshots = model.run(tokens, taps=taps)
    plans = []
    for snapshot in snapshots:
        flagged = detect_outlier_channels(snapshot, criteria)
        block_kind = SELF_ATTENTION if snapshot.tap.slot == 'x2' else FFN
        plans.append(plan_gamma_edit(snapshot.tap.layer_index, block_kind,
                                     flagged.channel_indices, policy))
    return plans


def run_intervene(params):
    """Evaluate perplexity at baseline and under every requested arm.

    Writes ``intervene.csv``, ``intervene.json`` and one plan file per arm
    under ``plans/``, which ``intervene --plan`` accepts for reruns.
    """
    start_time = time.time()
    model = _load(params)
    config, samples = _samples(model, params)
    workers = params.get('workers') or 1
    progress = bool(params.get('progress'))

    arms = build_arms(model, samples, params)
    baseline = evaluate_ppl(model, samples, None, workers, progress, config)

    rows = [{'arm': 'baseline', 'perplexity': baseline.perplexity,
             'delta': 0.0, 'relative_delta': 0.0,
             'diverged': baseline.diverged, 'plans': 0, 'channels': 0,
             'plan_digest': baseline.plan_digest}]
    for name, plans in arms:
        ppl = evaluate_ppl(model, samples, plans, workers, progress, config)
        delta = ppl.perplexity - baseline.perplexity
        rows.append({'arm': name, 'perplexity': ppl.perplexity,
                     'delta': delta,
                     'relative_delta': delta / baseline.perplexity,
                     'diverged': ppl.diverged, 'plans': len(plans),
                     'channels': sum(len(p.indices) for p in plans),
                     'plan_digest': ppl.plan_digest})

    diverged = any(r['diverged'] for r in rows)
    result = {'config': config.to_dict(),
              'samples_digest': samples_digest(samples),
              'baseline': baseline.perplexity,
              'arms': {r['arm']: {k: r[k] for k in
                                  ('perplexity', 'delta', 'diverged',
                                   'channels', 'plan_digest')}
                       for r in rows[1:]},
              'diverged': diverged}

    with artifact_writer(params['out']) as out:
        artifacts = [out.csv('intervene.csv', rows),
                     out.json('intervene.json', result)]
        for name, plans in arms:
            artifacts.append(out.text(os.path.join('plans', name + '.json'),
                                      plan_to_json(plans)))

    all_plans = [p for _, plans in arms for p in plans]
    logger.info({'msg': 'finished intervene', 'arms': len(arms),
                 'baseline': baseline.perplexity, 'diverged': diverged,
                 'elapsed': secs_since(start_time)})
    return Outcome(result, artifacts, model.model_id,
                   plan_digest=plans_digest(all_plans),
                   status=DIVERGED if diverged else OK)


def _scatter_records(flagged):
    return [{'channel': j, 'mean': float(flagged.per_channel_mean[j]),
             'std': float(flagged.per_channel_std[j]),
             'flagged': j in flagged.polarity,
             'polarity': flagged.polarity.get(j, '')}
            for j in range(len(flagged.per_channel_mean))]


def run_co_report(params):
    """Channel outlier figures data for the first sample.

    Scatter files for the layer's input (x1), MA-stripped input,
    standardized and rescaled tensors and the m sweep of x2; the nesting
    check over every x1/x2/y1/y2 snapshot; the per-layer gamma edit series.
    """
    start_time = time.time()
    model = _load(params)
    _, samples = _samples(model, params)
    tokens = samples[0]
    criteria = _criteria(params)
    layer = params.get('layer') or 0
    layer_count = model.config.layer_count
    if not 0 <= layer < layer_count:
        raise TapResolutionError('{0} has no layer {1}'.format(
            model.model_id, layer))

    taps = [TapPoint.of(slot, i) for i in range(layer_count)
            for slot in ('x1', 'x2', 'y1', 'y2')]
    _, snapshots = model.run(tokens, taps=taps)
    recorded = {(s.tap.layer_index, s.tap.slot): s for s in snapshots}
    x1 = recorded[(layer, 'x1')]

    stages = {'x1': detect_outlier_channels(x1, criteria),
              'x1_stripped': detect_outlier_channels(x1, criteria,
                                                     strip_mas=True)}
    norm = 'layers.{0}.attn_norm'.format(layer)
    standardized, rescaled = decompose_normalization(
        x1, model.parameter(norm + '.weight'),
        model.params.get(norm + '.bias'), model.config.norm_kind, criteria,
        eps=model.config.norm_eps, strip_mas=bool(params.get('strip_mas')))
    stages[STANDARDIZED] = standardized
    stages[RESCALED] = rescaled

    sweep = m_sweep(recorded[(layer, 'x2')], beta_std=criteria.beta_std,
                    strip_mas=bool(params.get('strip_mas')))

    nesting_rows = []
    for (layer_index, slot), snapshot in sorted(recorded.items()):
        sets = m_sweep(snapshot, beta_std=criteria.beta_std)
        row = {'layer': layer_index, 'slot': slot,
               'nested': check_nested(sets)}
        row.update({'m{0:g}'.format(m): len(s) for m, s in sets.items()})
        if not row['nested']:
            logger.warning({'msg': 'outlier sets do not nest across m',
                            'layer': layer_index, 'slot': slot})
        nesting_rows.append(row)

    series = gamma_edit_series(model, tokens, criteria)

    result = {'layer': layer, 'criteria': criteria.to_dict(),
              'stage_counts': {k: len(v) for k, v in stages.items()},
              'stage_channels': {k: list(v.channel_indices)
                                 for k, v in stages.items()},
              'sweep_counts': {'{0:g}'.format(m): len(s)
                               for m, s in sweep.items()},
              'all_nested': all(r['nested'] for r in nesting_rows),
              'gamma_series': series.to_records(),
              'gamma_mean_reduced_fraction': series.reduced_fraction('mean')}

    with artifact_writer(params['out']) as out:
        artifacts = []
        for name, flagged in stages.items():
            artifacts.append(out.csv('co_scatter_{0}.csv'.format(name),
                                     _scatter_records(flagged)))
        for m, flagged in sweep.items():
            artifacts.append(out.csv('co_sweep_m{0:g}.csv'.format(m),
                                     _scatter_records(flagged)))
        artifacts.append(out.csv('co_nesting.csv', nesting_rows))
        artifacts.append(out.csv('gamma_edit_series.csv',
                                 series.to_records()))
        if params.get('plots'):
            artifacts.extend(plot_co_report(out, artifacts))
        artifacts.append(out.json('co_report.json', result))
    logger.info({'msg': 'finished co-report',
                 'all_nested': result['all_nested'],
                 'elapsed': secs_since(start_time)})
    return Outcome(result, artifacts, model.model_id)


def run_dump(params):
    """Write one activation dump per sample for the requested taps."""
    model = _load(params)
    _, samples = _samples(model, params)
    taps = parse_taps(params.get('taps') or 'x1', model.config.layer_count)

    files = []
    with artifact_writer(params['out']) as out:
        for index, tokens in enumerate(samples):
            pass_id = 'sample-{0}'.format(index)
            _, snapshots = model.run(tokens, taps=taps, pass_id=pass_id)
            path = out.path(os.path.join('dumps', pass_id + '.osd'))
            out.track(write_dump(path, model.model_id, pass_id, snapshots))
            files.append(path)
        artifacts = list(files)
        index_rows = [{'pass_id': 'sample-{0}'.format(i), 'path': p}
                      for i, p in enumerate(files)]
        artifacts.append(out.json('dump_index.json', index_rows))

    result = {'samples': len(samples), 'taps': [t.name for t in taps],
              'files': len(files),
              'digest': digest([_dump_digest(p) for p in files])}
    return Outcome(result, artifacts, model.model_id)


def _dump_digest(path):
    md5 = hashlib.md5()
    for snapshot in read_dump(path).snapshots:
        md5.update(snapshot.tap.name.encode('utf-8'))
        md5.update(snapshot.values.numpy().tobytes())
    return md5.hexdigest()


def profile_from_dump(path, k=DEFAULT_TOP_K):
    """Rebuild per-slot MA profiles from a dump: {slot: MaProfile}."""
    dump = read_dump(path)
    by_slot = {}
    for snapshot in dump.snapshots:
        by_slot.setdefault(snapshot.tap.slot, []).append(snapshot)
    return {slot: build_ma_profile(snaps, k)
            for slot, snaps in by_slot.items()}


def _pyplot():
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    return plt


def plot_topk_series(out, series_csv):
    """Per-layer top-k magnitude lines of the first sample, per slot."""
    plt = _pyplot()
    frame = pd.read_csv(series_csv)
    frame = frame[frame['sample'] == 0]
    paths = []
    for slot, rows in frame.groupby('slot'):
        fig, ax = plt.subplots(figsize=(6, 4))
        for column in [c for c in rows.columns
                       if c.startswith('top') and not c.endswith('_signed')]:
            ax.plot(rows['layer'], rows[column], marker='o', label=column)
        ax.set_xlabel('layer')
        ax.set_ylabel('|activation|')
        ax.set_title(slot)
        ax.legend()
        path = out.path('topk_series_{0}.png'.format(slot))
        fig.savefig(path, dpi=120, bbox_inches='tight')
        plt.close(fig)
        paths.append(out.track(path))
    return paths


def plot_co_report(out, csv_paths):
    """Channel-mean scatter plots and the gamma edit series."""
    plt = _pyplot()
    paths = []
    for csv_path in csv_paths:
        name = os.path.splitext(os.path.basename(csv_path))[0]
        frame = pd.read_csv(csv_path)
        fig, ax = plt.subplots(figsize=(6, 4))
        if name.startswith('co_'):
            if 'channel' not in frame.columns:
                plt.close(fig)
                continue
            calm = frame[~frame['flagged']]
            flagged = frame[frame['flagged']]
            ax.scatter(calm['channel'], calm['mean'], s=4, color='gray')
            ax.scatter(flagged['channel'], flagged['mean'], s=8, color='red')
            ax.set_xlabel('channel')
            ax.set_ylabel('channel mean')
        else:
            for column, color in (('baseline', 'blue'),
                                  ('gamma_mean', 'red'),
                                  ('gamma_zero', 'green')):
                for site, rows in frame.groupby('site'):
                    ax.plot(rows['layer'], rows[column], color=color,
                            linestyle='-' if site == 'x2' else '--',
                            label='{0} {1}'.format(column, site))
            ax.set_xlabel('layer')
            ax.set_ylabel('outlier channels')
            ax.legend(fontsize='small')
        ax.set_title(name)
        path = out.path(name + '.png')
        fig.savefig(path, dpi=120, bbox_inches='tight')
        plt.close(fig)
        paths.append(out.track(path))
    return paths


RUNNERS = {
    'profile': run_profile,
    'classify': run_classify,
    'intervene': run_intervene,
    'co-report': run_co_report,
    'dump': run_dump,
}
