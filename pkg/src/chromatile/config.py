"""Line-based ``key = value`` configuration files.

Format: UTF-8 text, one ``key = value`` pair per line, ``#`` starts a
full-line comment, blank lines ignored.  Keys are dotted lowercase paths
(e.g. ``pretrain.epochs``).  Values stay strings here; the typed getters
convert on access and raise UsageError on malformed values.
"""

import numpy as np

from chromatile.errors import DataError, UsageError


def parse_config_text(text: str) -> dict:
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise DataError(f"line {line_no}: empty key")
        if key in values:
            raise DataError(f"line {line_no}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    try:
        return parse_config_text(text)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def save_config(path, values: dict) -> None:
    """Write keys in sorted order so identical configs are identical bytes."""
    lines = [f"{key} = {values[key]}" for key in sorted(values)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _fetch(values: dict, key: str, default):
    if key in values:
        return values[key]
    if default is _REQUIRED:
        raise UsageError(f"missing required config key {key!r}")
    return default


_REQUIRED = object()


def as_str(values, key, default=_REQUIRED) -> str:
    got = _fetch(values, key, default)
    return got if isinstance(got, str) else got


def as_int(values, key, default=_REQUIRED) -> int:
    got = _fetch(values, key, default)
    if not isinstance(got, str):
        return got
    try:
        return int(got)
    except ValueError:
        raise UsageError(f"config key {key!r} must be an integer, got {got!r}") from None


def as_float(values, key, default=_REQUIRED) -> float:
    got = _fetch(values, key, default)
    if not isinstance(got, str):
        return got
    try:
        value = float(got)
    except ValueError:
        raise UsageError(f"config key {key!r} must be a number, got {got!r}") from None
    if not np.isfinite(value):
        raise UsageError(f"config key {key!r} must be finite, got {got!r}")
    return value


def as_bool(values, key, default=_REQUIRED) -> bool:
    got = _fetch(values, key, default)
    if not isinstance(got, str):
        return got
    lowered = got.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise UsageError(f"config key {key!r} must be a boolean, got {got!r}")


def as_int_list(values, key, default=_REQUIRED) -> "list[int]":
    got = _fetch(values, key, default)
    if not isinstance(got, str):
        return got
    if got == "":
        return []
    try:
        return [int(tok.strip()) for tok in got.split(",")]
    except ValueError:
        raise UsageError(
            f"config key {key!r} must be comma-separated integers, got {got!r}"
        ) from None


def as_str_list(values, key, default=_REQUIRED) -> "list[str]":
    got = _fetch(values, key, default)
    if not isinstance(got, str):
        return got
    if got == "":
        return []
    return [tok.strip() for tok in got.split(",")]
