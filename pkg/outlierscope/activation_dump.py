"""Self-describing binary container for recorded activations.

Layout (all integers little-endian):

    8 bytes   magic ``OSDUMP01``
    4 bytes   uint32 length N of the header
    N bytes   UTF-8 JSON header
    ...       payload: every tap's tensor as raw little-endian float32,
              row-major, at the header's byte offsets

The header holds ``model_id``, ``pass_id``, ``input_digest``,
``dtype`` (always ``float32``) and ``taps``, a list of
``{tap: {layer_index, block_kind, slot}, shape, offset, nbytes}``.
Offsets are relative to the start of the payload.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

from outlierscope.model_adapter import ActivationSnapshot
from outlierscope.taps import TapPoint
from outlierscope.utils import DumpFormatError

logger = logging.getLogger(__name__)

MAGIC = b'OSDUMP01'
DTYPE = 'float32'
_LENGTH = struct.Struct('<I')


@dataclass(frozen=True)
class ActivationDump:
    model_id: str
    pass_id: str
    input_digest: str
    snapshots: tuple

    def snapshot(self, tap):
        for snapshot in self.snapshots:
            if snapshot.tap == tap:
                return snapshot
        raise KeyError(tap)


def write_dump(path, model_id, pass_id, snapshots):
    """Write snapshots of one pass to `path`.

    The file is written beside `path` and renamed into place, so a failed
    write leaves nothing behind.

    :raises DumpFormatError: if snapshots come from different passes
    """
    snapshots = list(snapshots)
    digests = {s.input_digest for s in snapshots}
    if any(s.pass_id != pass_id for s in snapshots) or len(digests) > 1:
        raise DumpFormatError('a dump holds the snapshots of one pass')

    entries = []
    payloads = []
    offset = 0
    for snapshot in snapshots:
        data = np.ascontiguousarray(snapshot.values.numpy(),
                                    dtype='<f4').tobytes()
        entries.append({'tap': snapshot.tap.to_dict(),
                        'shape': list(snapshot.shape),
                        'offset': offset, 'nbytes': len(data)})
        payloads.append(data)
        offset += len(data)

    header = json.dumps({'model_id': model_id, 'pass_id': pass_id,
                         'input_digest': digests.pop() if digests else None,
                         'dtype': DTYPE, 'taps': entries},
                        sort_keys=True).encode('utf-8')

    partial = path + '.partial'
    try:
        with open(partial, 'wb') as f:
            f.write(MAGIC)
            f.write(_LENGTH.pack(len(header)))
            f.write(header)
            for data in payloads:
                f.write(data)
        os.replace(partial, path)
    except OSError:
        if os.path.exists(partial):
            os.remove(partial)
        raise

    logger.debug({'msg': 'wrote activation dump', 'path': path,
                  'taps': len(entries), 'bytes': offset})
    return path


def read_dump(path):
    """Read a dump written by `write_dump`.

    :rtype: ActivationDump
    :raises DumpFormatError: if the file is not a well-formed dump
    """
    with open(path, 'rb') as f:
        blob = f.read()

    if blob[:len(MAGIC)] != MAGIC:
        raise DumpFormatError('{0} is not an activation dump'.format(path))
    start = len(MAGIC) + _LENGTH.size
    if len(blob) < start:
        raise DumpFormatError('{0} is truncated'.format(path))
    (length,) = _LENGTH.unpack(blob[len(MAGIC):start])
    try:
        header = json.loads(blob[start:start + length].decode('utf-8'))
    except ValueError as err:
        raise DumpFormatError('{0}: bad header: {1}'.format(path, err))
    if header.get('dtype') != DTYPE:
        raise DumpFormatError('{0}: unsupported dtype {1!r}'.format(
            path, header.get('dtype')))

    payload = memoryview(blob)[start + length:]
    snapshots = []
    for entry in header['taps']:
        end = entry['offset'] + entry['nbytes']
        if end > len(payload):
            raise DumpFormatError('{0} is truncated'.format(path))
        array = np.frombuffer(payload[entry['offset']:end], dtype='<f4')
        values = torch.from_numpy(
            array.reshape(entry['shape']).astype(np.float32))
        snapshots.append(ActivationSnapshot(
            TapPoint.from_dict(entry['tap']), values, header['pass_id'],
            header['input_digest']))

    return ActivationDump(header['model_id'], header['pass_id'],
                          header['input_digest'], tuple(snapshots))
