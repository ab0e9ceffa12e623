"""Plain-text key-value manifest grammar shared by datasets, configs and reports.

::

    # comment
    key = value
    [section name]
    key = value

Keys match ``[A-Za-z0-9_.-]+`` and are unique within their section. Values run
to the end of the line with surrounding whitespace stripped; sequences are
whitespace-separated. Floats are written with ``repr`` so they round-trip
exactly. Parsing returns strings; callers convert.
"""

from __future__ import annotations

import re

import numpy as np

_KEY = re.compile(r"^[A-Za-z0-9_.\-]+$")


class ManifestError(ValueError):
    pass


def format_value(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, np.ndarray):
        return " ".join(format_value(v) for v in value.ravel().tolist())
    if isinstance(value, (list, tuple)):
        return " ".join(format_value(v) for v in value)
    if value is None:
        return "none"
    s = str(value)
    if "\n" in s:
        raise ManifestError("values may not contain newlines")
    return s


def dumps_manifest(data):
    """Serialize a dict; nested dicts become ``[section]`` blocks after the top-level keys."""
    lines = []
    sections = []
    for key, value in data.items():
        if isinstance(value, dict):
            sections.append((key, value))
            continue
        _check_key(key)
        lines.append(f"{key} = {format_value(value)}")
    for name, body in sections:
        if "]" in name or "\n" in name:
            raise ManifestError(f"bad section name {name!r}")
        lines.append(f"[{name}]")
        for key, value in body.items():
            if isinstance(value, dict):
                raise ManifestError("sections do not nest")
            _check_key(key)
            lines.append(f"{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def _check_key(key):
    if not _KEY.match(str(key)):
        raise ManifestError(f"bad key {key!r}")


def loads_manifest(text):
    root = {}
    current = root
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ManifestError(f"line {lineno}: unterminated section header")
            name = line[1:-1].strip()
            if name in root:
                raise ManifestError(f"line {lineno}: duplicate section {name!r}")
            current = root[name] = {}
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not _KEY.match(key):
            raise ManifestError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key in current:
            raise ManifestError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value.strip()
    return root


def read_manifest(path):
    with open(path, encoding="utf-8") as f:
        return loads_manifest(f.read())


def write_manifest(path, data):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_manifest(data))


def as_floats(value):
    return np.array([float(v) for v in value.split()], dtype=np.float64)


def as_bool(value):
    v = value.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ManifestError(f"not a boolean: {value!r}")
