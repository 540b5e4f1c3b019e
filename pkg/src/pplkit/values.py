"""Runtime value universe shared by every evaluator.

Values are plain Python data: bool, int, float, Symbol, str, list
(vectors), dict (hash-maps), DistributionValue, procedure objects, and
None for nil. This module holds the Symbol type, the s-expression
renderer for values, and the JSON encoding used on the wire and in CLI
output.
"""

from __future__ import annotations

import json


class Symbol(str):
    """Interned-looking name. Distinct from str only by type."""

    __slots__ = ()

    def __repr__(self) -> str:
        return f"Symbol({str.__repr__(self)})"


nil = None


def is_vector(v) -> bool:
    return isinstance(v, list)


def print_value(v) -> str:
    """Render a runtime value as s-expression text."""
    if v is None:
        return "nil"
    if v is True:
        return "true"
    if v is False:
        return "false"
    if isinstance(v, Symbol):
        return str(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + " ".join(print_value(x) for x in v) + "]"
    if isinstance(v, dict):
        inner = " ".join(
            f"{print_value(k)} {print_value(x)}" for k, x in v.items()
        )
        return "{" + inner + "}"
    # DistributionValue and procedures render themselves
    return str(v)


def to_wire(v):
    """Encode a runtime value as JSON-serializable data.

    Scalars, vectors and nil map onto their JSON counterparts; symbols,
    hash-maps and distribution values get tagged wrappers so the
    decoding side can reconstruct the exact value.
    """
    if v is None or isinstance(v, (bool, int, float)):
        return v
    if isinstance(v, Symbol):
        return {"$sym": str(v)}
    if isinstance(v, str):
        return v
    if isinstance(v, (list, tuple)):
        return [to_wire(x) for x in v]
    if isinstance(v, dict):
        return {"$map": [[to_wire(k), to_wire(x)] for k, x in v.items()]}
    spec = getattr(v, "wire_spec", None)
    if callable(spec):
        return {"$dist": spec()}
    raise TypeError(f"value not wire-encodable: {v!r}")


def from_wire(j):
    """Inverse of to_wire."""
    if j is None or isinstance(j, (bool, int, float, str)):
        return j
    if isinstance(j, list):
        return [from_wire(x) for x in j]
    if isinstance(j, dict):
        if "$sym" in j and len(j) == 1:
            return Symbol(j["$sym"])
        if "$map" in j and len(j) == 1:
            return {_freeze_key(from_wire(k)): from_wire(x) for k, x in j["$map"]}
        if "$dist" in j and len(j) == 1:
            from . import distributions

            return distributions.from_wire_spec(j["$dist"])
        raise ValueError(f"unrecognized wire object: {j!r}")
    raise ValueError(f"unrecognized wire value: {j!r}")


def _freeze_key(k):
    if isinstance(k, list):
        return tuple(k)
    return k
