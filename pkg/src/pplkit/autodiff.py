"""Reverse-mode automatic differentiation over runtime values.

Numbers flowing through lifted primitives are boxed as tape values:
Plain carries a constant, Input a differentiation root, Node an
intermediate result remembering its inputs and local partials. grad
walks the tape backwards, accumulating adjoints per input symbol; the
walk memoizes by node identity so shared subexpressions cost linear
time while summing both contributions.

eval_lifted evaluates a deterministic target expression in an
environment of tape values: arithmetic and log-density primitives
build tape nodes, comparisons unbox to plain booleans, if evaluates
only the taken branch (the derivative follows the active branch),
and data primitives operate structurally with boxed leaves.

Arithmetic is done in IEEE semantics (division by zero yields inf or
nan rather than raising); callers reject non-finite results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .frontend import AppPrim, Constant, If, Variable
from .target_eval import apply_prim


class ADError(Exception):
    pass


@dataclass
class Plain:
    value: object


@dataclass
class Input:
    value: object
    var: str


@dataclass
class Node:
    value: object
    inputs: tuple
    partials: tuple


TapeValue = (Plain, Input, Node)


def box(v):
    return v if isinstance(v, TapeValue) else Plain(v)


def unbox(v):
    return v.value if isinstance(v, TapeValue) else v


def _as_float(v):
    x = unbox(v)
    if isinstance(v, (list, tuple, dict)) or isinstance(x, (list, tuple, dict)):
        raise ADError(f"expected a scalar, got {x!r}")
    return float(x)


def lift(f, grad_f):
    """Lift an n-ary real primitive with known partials onto the tape."""

    def lifted(*args):
        boxed = tuple(box(a) for a in args)
        vals = [_as_float(b) for b in boxed]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            value = float(f(*vals))
            partials = tuple(float(p) for p in grad_f(*vals))
        return Node(value, boxed, partials)

    return lifted


def grad(root) -> dict:
    """Adjoints of every Input symbol reachable from root."""
    if isinstance(root, Plain):
        return {}
    if isinstance(root, Input):
        return {root.var: 1.0}
    if not isinstance(root, Node):
        return {}

    # iterative topological order over the tape, children first
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if not isinstance(node, Node):
            continue
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node.inputs:
            stack.append((child, False))

    adjoint = {id(root): 1.0}
    out = {}
    for node in reversed(order):
        a = adjoint.get(id(node), 0.0)
        if a == 0.0:
            continue
        for child, partial in zip(node.inputs, node.partials):
            if isinstance(child, Input):
                out[child.var] = out.get(child.var, 0.0) + a * partial
            elif isinstance(child, Node):
                adjoint[id(child)] = adjoint.get(id(child), 0.0) + a * partial
    return out


# ---------------------------------------------------------------------------
# Lifted primitive registry


def _sign(x):
    return 0.0 if x == 0.0 else math.copysign(1.0, x)


def _lift_variadic(f2, df2):
    """Fold a lifted binary op over 2+ arguments."""
    binary = lift(f2, df2)

    def run(*args):
        out = binary(args[0], args[1])
        for a in args[2:]:
            out = binary(out, a)
        return out

    return run


_neg = lift(lambda a: -a, lambda a: (-1.0,))
_reciprocal = lift(lambda a: np.divide(1.0, a), lambda a: (-np.divide(1.0, a * a),))

_add = _lift_variadic(lambda a, b: a + b, lambda a, b: (1.0, 1.0))
_mul = _lift_variadic(lambda a, b: a * b, lambda a, b: (b, a))
_sub2 = _lift_variadic(lambda a, b: a - b, lambda a, b: (1.0, -1.0))
_div2 = _lift_variadic(
    lambda a, b: np.divide(a, b),
    lambda a, b: (np.divide(1.0, b), -np.divide(a, b * b)),
)


def _lifted_sub(*args):
    if len(args) == 1:
        return _neg(args[0])
    return _sub2(*args)


def _lifted_div(*args):
    if len(args) == 1:
        return _reciprocal(args[0])
    return _div2(*args)


LOG_2PI = math.log(2.0 * math.pi)


def _p_norm_val(v, m, s):
    z = np.divide(v - m, s)
    return -0.5 * z * z - np.log(s) - 0.5 * LOG_2PI


def _p_norm_grad(v, m, s):
    z = np.divide(v - m, s)
    return (
        -np.divide(z, s),
        np.divide(z, s),
        np.divide(z * z - 1.0, s),
    )


def _p_beta_val(v, a, b):
    return (
        (a - 1.0) * np.log(v)
        + (b - 1.0) * np.log1p(-v)
        + gammaln(a + b)
        - gammaln(a)
        - gammaln(b)
    )


def _p_beta_grad(v, a, b):
    return (
        np.divide(a - 1.0, v) - np.divide(b - 1.0, 1.0 - v),
        np.log(v) + digamma(a + b) - digamma(a),
        np.log1p(-v) + digamma(a + b) - digamma(b),
    )


def _p_gamma_val(v, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(v) - rate * v


def _p_gamma_grad(v, shape, rate):
    return (
        np.divide(shape - 1.0, v) - rate,
        np.log(rate) - digamma(shape) + np.log(v),
        np.divide(shape, rate) - v,
    )


def _p_exp_val(v, rate):
    if v < 0.0:
        return -math.inf
    return np.log(rate) - rate * v


def _p_exp_grad(v, rate):
    return (-rate, np.divide(1.0, rate) - v)


def _p_pois_val(k, rate):
    if k < 0 or k != math.floor(k):
        return -math.inf
    return k * np.log(rate) - rate - gammaln(k + 1.0)


def _p_pois_grad(k, rate):
    return (0.0, np.divide(k, rate) - 1.0)


def _p_bern_val(v, p):
    return np.log(p) if v >= 0.5 else np.log1p(-p)


def _p_bern_grad(v, p):
    return (0.0, np.divide(1.0, p) if v >= 0.5 else np.divide(-1.0, 1.0 - p))


def _p_unif_cont_val(v, lo, hi):
    if lo <= v <= hi:
        return -np.log(hi - lo)
    return -math.inf


def _p_unif_cont_grad(v, lo, hi):
    return (0.0, np.divide(1.0, hi - lo), np.divide(-1.0, hi - lo))


def _p_factor(*args):
    # (p_factor observed-nil log-weight): the potential is the weight
    lam = box(args[-1])
    return Node(_as_float(lam), (lam,), (1.0,))


_LIFTED = {
    "+": _add,
    "-": _lifted_sub,
    "*": _mul,
    "/": _lifted_div,
    "exp": lift(np.exp, lambda a: (np.exp(a),)),
    "log": lift(np.log, lambda a: (np.divide(1.0, a),)),
    "sqrt": lift(np.sqrt, lambda a: (np.divide(0.5, np.sqrt(a)),)),
    "tanh": lift(np.tanh, lambda a: (1.0 - np.tanh(a) ** 2,)),
    "abs": lift(abs, lambda a: (_sign(a),)),
    "p_norm": lift(_p_norm_val, _p_norm_grad),
    "p_beta": lift(_p_beta_val, _p_beta_grad),
    "p_gamma": lift(_p_gamma_val, _p_gamma_grad),
    "p_exp": lift(_p_exp_val, _p_exp_grad),
    "p_pois": lift(_p_pois_val, _p_pois_grad),
    "p_bern": lift(_p_bern_val, _p_bern_grad),
    "p_unif_cont": lift(_p_unif_cont_val, _p_unif_cont_grad),
    "p_factor": _p_factor,
}

_UNBOX_PRIMS = frozenset({"=", "<", ">", "<=", ">=", "and", "or", "not", "empty?"})


def _lifted_p_disc(v, ws):
    # weights may carry tape values; compose through lifted log and sum
    k = unbox(v)
    if isinstance(ws, TapeValue):
        ws = unbox(ws)
    if not isinstance(ws, (list, tuple)):
        raise ADError("p_disc: weights must be a vector")
    if not isinstance(k, int) or not (0 <= k < len(ws)):
        return Plain(-math.inf)
    total = _add(*ws) if len(ws) > 1 else box(ws[0])
    return _sub2(_LIFTED["log"](ws[k]), _LIFTED["log"](total))


def eval_lifted(e, env):
    """Evaluate a target expression with tape values in env."""
    match e:
        case Constant(value=v):
            return v
        case Variable(name=n):
            if n in env:
                return env[n]
            raise ADError(f"unbound variable {n}")
        case If(pred=p, conseq=c, alt=a):
            pv = unbox(eval_lifted(p, env))
            taken = c if (pv is not None and pv is not False) else a
            return eval_lifted(taken, env)
        case AppPrim(prim=f, args=args):
            vals = [eval_lifted(a, env) for a in args]
            if f in _LIFTED:
                return _LIFTED[f](*vals)
            if f == "p_disc":
                return _lifted_p_disc(*vals)
            if f in _UNBOX_PRIMS:
                return apply_prim(f, [unbox(v) for v in vals])
            if any(_contains_tape(v) for v in vals):
                if f in ("vector", "list"):
                    return list(vals)
                if f in ("get", "nth", "first", "second", "last"):
                    idx = [unbox(v) if not isinstance(v, (list, tuple)) else v for v in vals]
                    return apply_prim(f, idx)
                raise ADError(f"primitive {f} is not differentiable")
            return apply_prim(f, vals)
    raise ADError(f"cannot differentiate through {e!r}")


def _contains_tape(v):
    if isinstance(v, TapeValue):
        return True
    if isinstance(v, (list, tuple)):
        return any(_contains_tape(x) for x in v)
    return False
