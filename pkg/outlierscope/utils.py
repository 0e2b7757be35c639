import hashlib
import json
import logging

import numpy as np
import torch

from outlierscope.dict_logging import secs_since

logger = logging.getLogger(__name__)


class OutlierScopeError(RuntimeError):
    pass


class UnsupportedArchitectureError(OutlierScopeError):
    pass


class CheckpointError(OutlierScopeError):
    pass


class TapResolutionError(OutlierScopeError):
    pass


class PlanError(OutlierScopeError):
    pass


class NonFiniteActivationError(OutlierScopeError):
    pass


class EmptyTensorError(OutlierScopeError):
    pass


class DegenerateTensorError(OutlierScopeError):
    pass


class ProvenanceError(OutlierScopeError):
    pass


class ShapeMismatchError(OutlierScopeError):
    pass


class CorpusError(OutlierScopeError):
    pass


class WorkerError(OutlierScopeError):
    pass


class LedgerError(OutlierScopeError):
    pass


class DumpFormatError(OutlierScopeError):
    pass


def check_finite(values, what, caller_name='', start_time=None):
    """Log and raise an error if a tensor holds NaN or Inf entries.

    If start_time is not None, an `elapsed` key is added to the dictionary
    sent to the logger.

    :param torch.Tensor values: the tensor to check
    :param str what: a description of the tensor, used in logging
    :param str caller_name: a name for the calling function, used in logging
    :param float start_time: optional start time, used for logging elapsed time
    :raises NonFiniteActivationError: if any entry is not finite
    """
    if bool(torch.isfinite(values).all()):
        return
    bad = int((~torch.isfinite(values)).sum())
    err = NonFiniteActivationError(
        'non-finite values while {0}: {1} of {2} entries'.format(
            what, bad, values.numel()))
    log_dict = {'msg': 'exiting {0}'.format(caller_name), 'err': err}
    if start_time:
        log_dict['elapsed'] = secs_since(start_time)
    logger.error(log_dict)
    raise err


def check_non_empty(values, what, caller_name=''):
    """Log and raise an error if a tensor has no entries.

    :param torch.Tensor values: the tensor to check
    :param str what: a description of the tensor, used in logging
    :param str caller_name: a name for the calling function, used in logging
    :raises EmptyTensorError: if values.numel() is 0
    """
    if values.numel() > 0:
        return
    err = EmptyTensorError('empty tensor while {0}'.format(what))
    logger.error({'msg': 'exiting {0}'.format(caller_name), 'err': err})
    raise err


def json_default(obj):
    """`json.dumps` fallback for numpy/torch scalars and tuples of them."""
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, torch.Tensor) and obj.numel() == 1:
        return obj.item()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError('{0!r} is not JSON serializable'.format(obj))


def digest(obj):
    """Return a stable md5 hex digest of a JSON-serializable object.

    Keys are sorted so that equal mappings hash equally regardless of
    insertion order.

    :param obj: JSON-serializable object
    :rtype: str
    """
    payload = json.dumps(obj, sort_keys=True, separators=(',', ':'),
                         default=json_default)
    return hashlib.md5(payload.encode('utf-8')).hexdigest()


def tokens_digest(tokens):
    """Return an md5 digest identifying an input token sequence."""
    return digest([int(t) for t in tokens])
