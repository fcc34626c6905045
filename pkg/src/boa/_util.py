from __future__ import annotations

import datetime as _dt
import json
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = ["tomllib", "canonical_json", "utcnow", "format_ts", "parse_ts", "load_toml"]


def canonical_json(obj) -> str:
    """Two-space indent, sorted keys, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def utcnow() -> _dt.datetime:
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0)


def format_ts(ts: _dt.datetime | None) -> str | None:
    if ts is None:
        return None
    return ts.astimezone(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_ts(text: str | None) -> _dt.datetime | None:
    if text is None:
        return None
    return _dt.datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=_dt.timezone.utc)


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)
