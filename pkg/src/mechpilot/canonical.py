"""Canonical JSON rendering and SHA-256 digests.

Every hashed document in the package goes through :func:`canonical_bytes`:
keys sorted, no insignificant whitespace, floats rendered with 9 significant
digits. Nine digits round-trip any float32 exactly, so checkpoint parameters
survive serialization bit-for-bit, and the rendering is the same on every host.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

import numpy as np

FLOAT_DIGITS = 9


class CanonicalizationError(ValueError):
    pass


def render_float(x: float) -> str:
    if not math.isfinite(x):
        raise CanonicalizationError(f"non-finite float {x!r} cannot be canonicalized")
    if x == 0.0:
        return "0"
    return format(x, f".{FLOAT_DIGITS}g")


def _render(obj: Any, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(render_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise CanonicalizationError(f"object keys must be strings, got {key!r}")
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _render(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _render(item, out)
        out.append("]")
    elif isinstance(obj, np.ndarray):
        _render(obj.tolist(), out)
    else:
        raise CanonicalizationError(f"cannot canonicalize {type(obj).__name__}")


def canonical_text(obj: Any) -> str:
    out: list[str] = []
    _render(obj, out)
    return "".join(out)


def canonical_bytes(obj: Any) -> bytes:
    return canonical_text(obj).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest(obj: Any) -> str:
    """``sha256:<hex>`` of the canonical rendering of ``obj``."""
    return "sha256:" + sha256_hex(canonical_bytes(obj))


def bytes_digest(data: bytes) -> str:
    return "sha256:" + sha256_hex(data)


def document_bytes(obj: Any) -> bytes:
    """File form of a canonical document: canonical text plus a trailing newline."""
    return canonical_bytes(obj) + b"\n"


def roundtrip(obj: Any) -> Any:
    """The value a reader sees after parsing the canonical rendering."""
    return json.loads(canonical_text(obj))
