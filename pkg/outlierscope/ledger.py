import fcntl
import json
import logging
import os
import uuid
from dataclasses import asdict, dataclass, field

from outlierscope.dict_logging import strtime
from outlierscope.utils import LedgerError, digest, json_default

logger = logging.getLogger(__name__)

OK = 'ok'
FAILED = 'failed'
DIVERGED = 'diverged'
MISMATCH = 'mismatch'


@dataclass
class RunLedgerEntry:
    """One CLI invocation: what ran, on what, with what outcome.

    `params` holds every option the command was invoked with, which is
    what `replay` re-runs from; `config_digest` is their md5.
    """

    command: str
    params: dict
    model_id: str = None
    plan_digest: str = None
    result: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    status: str = OK
    error: str = None
    entry_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    timestamp: str = field(default_factory=strtime)
    config_digest: str = None

    def __post_init__(self):
        if self.config_digest is None:
            self.config_digest = digest({'command': self.command,
                                         'params': self.params})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**data)
        except TypeError as err:
            raise LedgerError('malformed ledger entry: {0}'.format(err))


class Ledger(object):
    """An append-only JSON-lines run ledger.

    Appends take an exclusive lock on the file, so concurrent invocations
    never interleave their lines.
    """

    def __init__(self, path):
        self.path = path

    def __repr__(self):
        return 'Ledger({0!r})'.format(self.path)

    def append(self, entry):
        line = json.dumps(entry.to_dict(), sort_keys=True,
                          default=json_default)
        directory = os.path.dirname(os.path.abspath(self.path))
        os.makedirs(directory, exist_ok=True)
        try:
            with open(self.path, 'a') as f:
                fcntl.flock(f, fcntl.LOCK_EX)
                try:
                    f.write(line + '\n')
                    f.flush()
                finally:
                    fcntl.flock(f, fcntl.LOCK_UN)
        except OSError as err:
            raise LedgerError('cannot append to ledger {0}: {1}'.format(
                self.path, err))
        logger.debug({'msg': 'appended ledger entry', 'path': self.path,
                      'entry_id': entry.entry_id,
                      'command': entry.command})
        return entry

    def entries(self):
        """Every entry, oldest first."""
        if not os.path.exists(self.path):
            return []
        entries = []
        with open(self.path) as f:
            for number, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    entries.append(RunLedgerEntry.from_dict(json.loads(line)))
                except ValueError as err:
                    raise LedgerError('{0}:{1}: {2}'.format(self.path, number,
                                                            err))
        return entries

    def find(self, entry_id):
        """Return the entry whose id starts with `entry_id`.

        :raises LedgerError: if no entry, or more than one, matches
        """
        matches = [e for e in self.entries()
                   if e.entry_id.startswith(entry_id)]
        if len(matches) != 1:
            raise LedgerError('{0} ledger entries match `{1}`'.format(
                len(matches), entry_id))
        return matches[0]
