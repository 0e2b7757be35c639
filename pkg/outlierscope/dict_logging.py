import collections.abc
import datetime
import json
import logging
import numbers
import time
from logging.handlers import QueueHandler

import numpy as np
import torch

nocolor = 0
red = 31
green = 32
yellow = 33
blue = 34
gray = 37
starttime = time.time()

# Significant digits used when rendering floats in log records.
FLOAT_DIGITS = 6


def secs_since(starttime):
    """Return the (padded) number of whole seconds since `starttime`.

    :param starttime: time to calculate seconds since
    :type starttime:  float number of seconds since the epoch
    :returns:         number of seconds since starttime padded to 4 with 0s
    :rtype:           str
    """
    return '{0:0>4}'.format(int(time.time() - starttime))


def strtime(curr_time=None):
    """Return the current (or given) time in a string conforming to RFC3339.

    :param float curr_time: seconds since the epoch, defaults to now
    :returns: time in RFC3339 format
    :rtype:   str
    """
    if curr_time is None:
        curr_time = time.time()
    local = datetime.datetime.fromtimestamp(curr_time).astimezone()
    return local.isoformat(timespec='seconds')


def levelcolor(level):
    """Return the terminal color number appropriate for the logging level.

    :param int level: logging level in integer form
    :returns:         the SGR parameter number for foreground text color
    :rtype:           int
    """

    if level == logging.DEBUG:
        return green
    elif level == logging.WARNING:
        return yellow
    elif level in (logging.ERROR, logging.CRITICAL):
        return red
    else:
        return blue


class DictLogFilter(logging.Filter):
    """A logging 'filter' that renders dict-type log messages.

    Analysis code logs dicts such as
    ``{'msg': 'detected massive activations', 'layer': 3, 'count': 2}``.
    Depending on `output` the filter turns the dict into one of:

    'json': a json object with the current time and level added.

    'text': logfmt-style ``key="val"`` pairs with time and level added.

    'tty': the level (truncated to four characters, colorized), the seconds
    since program start and the 'msg' value padded to 80 columns, followed by
    the remaining keys as colorized ``key=val`` pairs.

    Any other `output` value falls back to 'json'. Records whose msg is not a
    dict pass through untouched.
    """

    def __init__(self, output=None):
        super(DictLogFilter, self).__init__()
        self.output = output

    def filter(self, record):
        """Format the log record if record.msg is a dict.

        :param record: a log record instance
        :type record:  logging.LogRecord
        :returns:      always True to indicate the record should be handled
        :rtype:        bool
        """

        if not isinstance(record.msg, dict):
            return True

        if self.output == 'text':
            return self.text_filter(record)
        elif self.output == 'tty':
            return self.tty_filter(record)
        else:
            return self.json_filter(record)

    def json_filter(self, record):
        msg = dict(record.msg)
        msg['time'] = strtime(record.created)
        msg['level'] = record.levelname.lower()
        record.msg = json.dumps(stringify(msg))
        return True

    def tty_filter(self, record):
        msg = stringify(record.msg)
        color = levelcolor(record.levelno)

        out = '\x1b[{0}m{1}\x1b[0m[{2}] {3}'.format(color,
                                                    record.levelname[:4],
                                                    secs_since(starttime),
                                                    msg.get('msg', ''))
        out = '{0:<80}'.format(out)

        for k, v in msg.items():
            if k != 'msg':
                out = out + ' \x1b[{0}m{1}\x1b[0m={2}'.format(color, k, v)

        record.msg = out
        return True

    def text_filter(self, record):
        msg = dict(record.msg)
        msg['time'] = strtime(record.created)
        msg['level'] = record.levelname.lower()
        msg = stringify(msg)
        record.msg = ' '.join('{0}="{1}"'.format(k, v)
                              for k, v in msg.items())
        return True


class DictQueueHandler(QueueHandler):
    """A QueueHandler for worker processes that keeps dict msgs as dicts.

    The stock QueueHandler formats the record (turning the dict msg into a
    string) before enqueuing it, so the parent's DictLogFilter would never
    see a dict. This handler stringifies the dict's leaves instead, which
    keeps it picklable, and moves exc_info into exc_text.
    """

    formatter = logging.Formatter()

    def prepare(self, record):
        record.msg = stringify(record.msg)
        record.args = stringify(record.args) if record.args else None

        if record.exc_info:
            record.exc_text = self.formatter.formatException(record.exc_info)
            record.exc_info = None

        return record


def stringify(obj):
    """Recursively str() an object, leaving mappings and sequences.

    Tensors and arrays of a single element render as their scalar; larger
    ones render as a shape summary so log lines stay short.
    """
    if isinstance(obj, str):
        return obj
    if isinstance(obj, bool):
        return str(obj)
    if isinstance(obj, torch.Tensor):
        if obj.numel() == 1:
            return stringify(obj.item())
        return 'tensor(shape={0}, dtype={1})'.format(list(obj.shape),
                                                     obj.dtype)
    if isinstance(obj, np.ndarray):
        if obj.size == 1:
            return stringify(obj.item())
        return 'array(shape={0}, dtype={1})'.format(list(obj.shape),
                                                    obj.dtype)
    if isinstance(obj, numbers.Integral):
        return str(int(obj))
    if isinstance(obj, numbers.Real):
        return '{0:.{1}g}'.format(float(obj), FLOAT_DIGITS)
    if isinstance(obj, collections.abc.Mapping):
        return {str(k): stringify(v) for k, v in obj.items()}
    if isinstance(obj, (collections.abc.Sequence, collections.abc.Set)):
        return [stringify(i) for i in obj]
    return str(obj)
