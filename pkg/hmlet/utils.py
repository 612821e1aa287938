import json
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.exceptions import ImproperlyConfigured
from django.core.serializers.json import DjangoJSONEncoder

DEFAULT_EVAL_CHUNK_SIZE = 1024
SEED_ENVIRON = 'HMLET_SEED'


def get_setting(name, default=None):
    """Read ``HMLET_<name>`` from the Django settings, falling back when Django is not configured."""
    if not settings.configured:
        return default
    return getattr(settings, f'HMLET_{name}', default)


def eval_chunk_size():
    chunk_size = get_setting('EVAL_CHUNK_SIZE', DEFAULT_EVAL_CHUNK_SIZE)
    if not isinstance(chunk_size, int) or chunk_size < 1:
        raise ImproperlyConfigured("HMLET_EVAL_CHUNK_SIZE must be a positive integer.")
    return chunk_size


def read_config_file(path, allowed_keys):
    """
    Parse a line-oriented ``key = value`` file. Everything after ``#`` is a comment, blank lines
    are ignored and values stay strings; the run config form converts them.
    """
    try:
        text = Path(path).read_text(encoding='utf-8')
    except (OSError, UnicodeDecodeError) as exc:
        raise ImproperlyConfigured(f"Cannot read config file '{path}': {exc}") from exc
    values = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ImproperlyConfigured(f"{path}, line {line_number}: expected 'key = value'.")
        if key not in allowed_keys:
            raise ImproperlyConfigured(f"{path}, line {line_number}: unknown key '{key}'.")
        values[key] = value
    return values


def merge_config(*layers):
    """Later layers win; ``None`` values never override."""
    merged = {}
    for layer in layers:
        merged.update((key, value) for key, value in (layer or {}).items() if value is not None)
    return merged


class ReportEncoder(DjangoJSONEncoder):
    """Serialize the numpy scalars and arrays found in reports and logs."""

    def default(self, o):
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, Path):
            return str(o)
        return super().default(o)


def dump_json(obj, **kwargs):
    kwargs.setdefault('sort_keys', True)
    return json.dumps(obj, cls=ReportEncoder, **kwargs)
