import os

serial = os.environ.get('BUILD_NUM') or '0'
sha = os.environ.get('COMMIT_SHA1') or '0'
sha = sha[0:8]

__version_info__ = {
    'major': 0,
    'minor': 1,
    'micro': 0,
    'releaselevel': 'alpha',
    'serial': serial,
    'sha': sha
}


def get_version(short=False):
    assert __version_info__['releaselevel'] in ('alpha', 'beta', 'final')
    vers = ['%(major)i.%(minor)i.%(micro)i' % __version_info__, ]
    if __version_info__['releaselevel'] != 'final' and not short:
        __version_info__['lvlchar'] = __version_info__['releaselevel'][0]
        vers.append('%(lvlchar)s%(serial)s+%(sha)s' % __version_info__)
    return ''.join(vers)

__version__ = get_version()

# Massive activation criterion: |v| > MA_ABS_THRESHOLD and
# |v| >= MA_MEDIAN_RATIO * median(|A|).
MA_ABS_THRESHOLD = 100.0
MA_MEDIAN_RATIO = 1000.0

# Channel-wise outlier criterion defaults (mean-deviation multiplier and
# channel std ceiling).
CO_M = 4.0
CO_BETA_STD = 1.0 / 3.0
CO_M_SWEEP = (6.0, 4.0, 2.0)

DEFAULT_TOP_K = 3
SUBLAYER_TOP_K = 2

# Weight channel ablation thresholds, in cross-channel standard deviations.
SD_THRESHOLDS = (6.0, 4.0, 2.0)

DEFAULT_SAMPLE_COUNT = 100
DEFAULT_SEQUENCE_LENGTH = 1024
DEFAULT_SEED = 0

# Trend analysis layer windows.
INITIAL_LAYER_FRACTION = 0.25
FINAL_LAYER_COUNT = 2

# Architecture families the executor can run, keyed by the checkpoint's
# `model_type`.
SUPPORTED_MODEL_TYPES = {
    'gpt2': 'gpt2',
    'llama': 'llama',
    'mistral': 'llama',
    'qwen2': 'llama',
}

# Weight families for channel ablation sweeps.
WEIGHT_FAMILIES = {
    'q': ('q_proj',),
    'k': ('k_proj',),
    'v': ('v_proj',),
    'o': ('o_proj',),
    'qkv': ('q_proj', 'k_proj', 'v_proj'),
    'mlp': ('gate_proj', 'up_proj', 'fc_in', 'down_proj'),
    'layernorm': ('attn_norm', 'ffn_norm'),
}

_ledger_var = 'OUTLIERSCOPE_LEDGER'
if _ledger_var in os.environ:
    LEDGER_PATH = os.environ[_ledger_var]
else:
    LEDGER_PATH = 'outlierscope-ledger.jsonl'

CACHE_DIR = os.environ.get('OUTLIERSCOPE_CACHE_DIR') or None

__all__ = ('__version__', 'MA_ABS_THRESHOLD', 'MA_MEDIAN_RATIO', 'CO_M',
           'CO_BETA_STD', 'LEDGER_PATH')
