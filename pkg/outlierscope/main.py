import json
import logging
import os
import sys
import uuid

import click

from outlierscope import (CO_BETA_STD, CO_M, DEFAULT_SAMPLE_COUNT,
                          DEFAULT_SEED, DEFAULT_SEQUENCE_LENGTH,
                          DEFAULT_TOP_K, LEDGER_PATH, SD_THRESHOLDS,
                          WEIGHT_FAMILIES, __version__)
from outlierscope.dict_logging import DictLogFilter
from outlierscope.ledger import (DIVERGED, FAILED, MISMATCH, OK, Ledger,
                                 RunLedgerEntry)
from outlierscope.reports import DATASET_NAMES, DTYPES, RUNNERS
from outlierscope.utils import LedgerError, OutlierScopeError, json_default

CONTEXT_SETTINGS = dict(help_option_names=['-h', '--help'])

EXIT_DIVERGED = 3
EXIT_MISMATCH = 4

logger = logging.getLogger('outlierscope')


@click.group(context_settings=CONTEXT_SETTINGS)
@click.option('--logfmt', type=click.Choice(['tty', 'text', 'json']),
              help='Logging output format.')
@click.option('--loglvl', default='INFO', help='Logging output level.',
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR',
                                 'CRITICAL']))
@click.option('--ledger', 'ledger_path', default=LEDGER_PATH,
              show_default=True, help='Run ledger file (JSON lines).')
@click.version_option(version=__version__)
@click.pass_context
def outlierscope(ctx, logfmt, loglvl, ledger_path):
    """Profile massive activations and channel-wise outliers of decoder
    checkpoints, and measure what removing them does to perplexity.

    Every invocation appends one entry to the run ledger.
    """

    sh = logging.StreamHandler()

    # Without explicit logfmt at tty use tty format.
    if not logfmt and sys.stderr.isatty():
        logfmt = 'tty'

    if logfmt == 'tty':
        sh.addFilter(DictLogFilter('tty'))
    elif logfmt == 'text':
        sh.addFilter(DictLogFilter('text'))
    else:
        # Default format is json.
        sh.addFilter(DictLogFilter('json'))

    # One handler per process, however many invocations.
    logger.handlers = [sh]
    logger.setLevel(logging.getLevelName(loglvl))

    ctx.obj = {'ledger': Ledger(ledger_path)}


def run_options(default_samples):
    """Options shared by every command that runs a checkpoint."""
    options = [
        click.option('--model', required=True,
                     help='Hugging Face model id or local checkpoint dir.'),
        click.option('--weights-dir', 'weights_location',
                     type=click.Path(file_okay=False),
                     help='Load tensors from this directory instead of '
                     'the model id.'),
        click.option('--dtype', default='float32', show_default=True,
                     type=click.Choice(sorted(DTYPES))),
        click.option('--dataset', default='wikitext', show_default=True,
                     type=click.Choice(sorted(DATASET_NAMES))),
        click.option('--corpus', type=click.Path(dir_okay=False),
                     help='Local corpus file (.txt, or .jsonl with `text` '
                     'or `input_ids` records).'),
        click.option('--samples', default=default_samples, type=int,
                     show_default=True, help='Number of sequences.'),
        click.option('--seed', default=DEFAULT_SEED, type=int,
                     show_default=True, help='Sampling seed.'),
        click.option('--seq-len', 'seq_len', default=DEFAULT_SEQUENCE_LENGTH,
                     type=int, show_default=True,
                     help='Tokens per sequence.'),
        click.option('--out', type=click.Path(file_okay=False),
                     help='Output directory; a fresh one under '
                     'outlierscope-runs/ by default.'),
    ]

    def decorate(f):
        for option in reversed(options):
            f = option(f)
        return f
    return decorate


def criteria_options(f):
    f = click.option('--beta-std', 'beta_std', default=CO_BETA_STD,
                     type=float, show_default=True,
                     help='Maximum channel std of a channel outlier.')(f)
    f = click.option('--m', 'm', default=CO_M, type=float, show_default=True,
                     help='Channel outlier distance in tensor stds.')(f)
    return f


def _params(kwargs):
    """Make click kwargs JSON-friendly for the ledger."""
    params = {}
    for key, value in kwargs.items():
        if isinstance(value, tuple):
            value = list(value)
        params[key] = value
    return params


def _invoke(ctx, command, kwargs):
    """Run a command's runner, record it in the ledger and exit.

    Handled errors exit 1 with their message, a diverged evaluation exits
    3. The ledger entry is written whatever happens.
    """
    params = _params(kwargs)
    if not params.get('out'):
        params['out'] = os.path.join('outlierscope-runs', '{0}-{1}'.format(
            command, uuid.uuid4().hex[:12]))
    entry = RunLedgerEntry(command, params, model_id=params.get('model'))

    try:
        outcome = RUNNERS[command](params)
        entry.result = outcome.result
        entry.artifacts = outcome.artifacts
        entry.model_id = outcome.model_id
        entry.plan_digest = outcome.plan_digest
        entry.status = outcome.status
    except OutlierScopeError as err:
        entry.status = FAILED
        entry.error = str(err)
        raise click.ClickException(str(err))
    except Exception as err:
        entry.status = FAILED
        entry.error = repr(err)
        raise
    finally:
        ctx.obj['ledger'].append(entry)

    _echo_summary(entry)
    sys.exit(EXIT_DIVERGED if entry.status == DIVERGED else 0)


def _reject(ctx, command, kwargs, message):
    """Record a usage error in the ledger, then exit 2."""
    entry = RunLedgerEntry(command, _params(kwargs),
                           model_id=kwargs.get('model'), status=FAILED,
                           error=message)
    ctx.obj['ledger'].append(entry)
    raise click.UsageError(message)


def _echo_summary(entry):
    click.echo(json.dumps({'entry_id': entry.entry_id,
                           'command': entry.command,
                           'status': entry.status,
                           'out': entry.params.get('out'),
                           'plan_digest': entry.plan_digest},
                          sort_keys=True))


@outlierscope.command()
@run_options(default_samples=1)
@click.option('--taps', default='x1', show_default=True,
              help='Comma separated slots, optionally `slot@L` or '
              '`slot@L0-L1`, e.g. "x1,y6@3-5".')
@click.option('--top-k', 'top_k', default=DEFAULT_TOP_K, type=int,
              show_default=True, help='Events kept per layer.')
@click.option('--no-residual', 'no_residual', is_flag=True, default=False,
              help='Disable every residual add.')
@click.option('--sublayers', type=int, multiple=True,
              help='Also report every slot of this layer (repeatable).')
@click.option('--plots', is_flag=True, default=False,
              help='Render figures from the written CSV files.')
@click.pass_context
def profile(ctx, **kwargs):
    """Detect massive activations at the requested taps.

    Writes ma_profile.csv, topk_series.csv and profile.json (and
    sublayers.csv with --sublayers).
    """
    _invoke(ctx, 'profile', kwargs)


@outlierscope.command()
@run_options(default_samples=20)
@click.option('--top-k', 'top_k', default=DEFAULT_TOP_K, type=int,
              show_default=True, help='Events kept per layer.')
@click.option('--birthplace/--no-birthplace', default=True,
              show_default=True,
              help='Locate the earliest slot holding an MA per sample.')
@click.pass_context
def classify(ctx, **kwargs):
    """Classify x1 massive activations as true or fake MAs.

    Runs each sample with and without residual adds, pairs initial-layer
    TMAs with final-layer TMAs and writes classification.csv, trends.csv,
    extreme_layers.csv and classify.json.
    """
    _invoke(ctx, 'classify', kwargs)


@outlierscope.command()
@run_options(default_samples=DEFAULT_SAMPLE_COUNT)
@criteria_options
@click.option('--site', type=click.Choice(['y6', 'y7']),
              help='Remove the MAs detected at this site on every pass.')
@click.option('--policy', default='mean', show_default=True,
              type=click.Choice(['mean', 'zero']))
@click.option('--weights', type=click.Choice(sorted(WEIGHT_FAMILIES)),
              help='Weight family whose outlier channels are ablated.')
@click.option('--sd', type=float, multiple=True,
              help='Outlier channel cutoff in SDs (repeatable).')
@click.option('--sweep', is_flag=True, default=False,
              help='Use every standard cutoff (6, 4 and 2 SDs).')
@click.option('--random', is_flag=True, default=False,
              help='Add matched random-channel baselines.')
@click.option('--count', type=int,
              help='With --random and --weights, ablate this many random '
              'channels per matrix.')
@click.option('--otc', type=click.Choice(['q', 'k', 'v']), multiple=True,
              help='Ablate the outlier triggering channels of a '
              'projection (repeatable).')
@click.option('--gamma', is_flag=True, default=False,
              help='Edit the norm scale entries of channel outliers.')
@click.option('--plan', type=click.Path(exists=True, dir_okay=False),
              help='Apply the plans of a plan file.')
@click.option('--workers', default=1, type=int, show_default=True,
              help='Processes scoring samples in parallel.')
@click.option('--progress', is_flag=True, default=False,
              help='Show a progress bar.')
@click.pass_context
def intervene(ctx, **kwargs):
    """Compare perplexity at baseline and under interventions.

    Each requested intervention is one arm: TMA removal (--site), outlier
    weight channels (--weights with --sd), random baselines (--random),
    OTCs (--otc), gamma edits (--gamma) and plan files (--plan). Exits 3
    when any perplexity diverges.
    """
    if kwargs.pop('sweep'):
        kwargs['sd'] = tuple(sorted(set(kwargs['sd']) | set(SD_THRESHOLDS),
                                    reverse=True))
    if not any(kwargs[k] for k in ('site', 'weights', 'otc', 'gamma',
                                   'plan')):
        _reject(ctx, 'intervene', kwargs, 'name at least one intervention')
    if kwargs['weights'] and not (kwargs['sd'] or
                                  (kwargs['random'] and kwargs['count'])):
        _reject(ctx, 'intervene', kwargs,
                '--weights needs --sd, --sweep or --random --count')
    _invoke(ctx, 'intervene', kwargs)


@outlierscope.command('co-report')
@run_options(default_samples=1)
@criteria_options
@click.option('--layer', default=0, type=int, show_default=True,
              help='Layer of the scatter and m sweep files.')
@click.option('--strip-mas', 'strip_mas', is_flag=True, default=False,
              help='Remove MAs before the normalization decomposition.')
@click.option('--plots', is_flag=True, default=False,
              help='Render figures from the written CSV files.')
@click.pass_context
def co_report(ctx, **kwargs):
    """Report channel outliers around the first normalization.

    Writes scatter files for x1, MA-stripped x1, the standardized and
    rescaled tensors and the m sweep of x2, the nesting check of every
    norm input and output, and the gamma edit series.
    """
    _invoke(ctx, 'co-report', kwargs)


@outlierscope.command()
@run_options(default_samples=1)
@click.option('--taps', default='x1', show_default=True,
              help='Comma separated slots, as for profile.')
@click.pass_context
def dump(ctx, **kwargs):
    """Write the activations at the requested taps to dump files."""
    _invoke(ctx, 'dump', kwargs)


@outlierscope.command()
@click.argument('entry_id')
@click.option('--out', type=click.Path(file_okay=False),
              help='Output directory for the replayed run.')
@click.pass_context
def replay(ctx, entry_id, out):
    """Re-run a ledger entry and compare its results.

    ENTRY_ID may be any unique prefix. Exits 4 when the replayed results
    differ from the recorded ones.
    """
    ledger = ctx.obj['ledger']
    entry = RunLedgerEntry('replay', {'entry_id': entry_id, 'out': out})

    try:
        original = ledger.find(entry_id)
        if original.command not in RUNNERS:
            raise LedgerError('cannot replay a `{0}` entry'.format(
                original.command))
        params = dict(original.params)
        params['out'] = out or '{0}-replay'.format(original.params['out'])
        entry = RunLedgerEntry(
            'replay', {'entry_id': original.entry_id, 'out': params['out']},
            model_id=original.model_id, entry_id=entry.entry_id,
            timestamp=entry.timestamp)

        outcome = RUNNERS[original.command](params)
        match = _normalized(outcome.result) == _normalized(original.result)
        entry.result = {'replayed': original.entry_id, 'match': match}
        entry.artifacts = outcome.artifacts
        entry.plan_digest = outcome.plan_digest
        entry.status = OK if match else MISMATCH
    except OutlierScopeError as err:
        entry.status = FAILED
        entry.error = str(err)
        raise click.ClickException(str(err))
    except Exception as err:
        entry.status = FAILED
        entry.error = repr(err)
        raise
    finally:
        ledger.append(entry)

    if entry.status == MISMATCH:
        logger.error({'msg': 'replayed results differ',
                      'entry_id': original.entry_id})
    _echo_summary(entry)
    sys.exit(EXIT_MISMATCH if entry.status == MISMATCH else 0)


def _normalized(result):
    # Compared as text so NaN results of diverged runs still match.
    return json.dumps(json.loads(json.dumps(result, default=json_default)),
                      sort_keys=True)


if __name__ == '__main__':
    outlierscope()
