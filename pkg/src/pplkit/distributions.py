"""First-class distribution values.

A Dist is an immutable tagged record (family, params). Construction
validates parameter constraints; discrete weights are stored
normalized. log_prob returns -inf outside the support rather than
raising, so inference code may score arbitrary values.

grad_log_prob differentiates the log density with respect to an
unconstrained internal parameterization: positive parameters enter
through their log, discrete weights through logits. The same
parameterization backs unconstrained_params / from_unconstrained,
which gradient-based proposal learning uses for its updates.

Random streams are numpy Generators over the counter-based Philox
bit generator; split_rng derives child streams that are independent
and reproducible, which fork semantics relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .values import nil

LOG_2PI = math.log(2.0 * math.pi)
NEG_INF = float("-inf")


class DistributionError(ValueError):
    pass


@dataclass(frozen=True)
class Dist:
    family: str
    params: tuple

    def wire_spec(self):
        from .values import to_wire

        return {"family": self.family, "params": [to_wire(p) for p in self.params]}

    def __repr__(self):
        inner = " ".join(repr(p) for p in self.params)
        return f"({self.family} {inner})"


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def split_rng(rng: np.random.Generator, n: int):
    return rng.spawn(n)


# ---------------------------------------------------------------------------
# Construction


def _require(cond, msg):
    if not cond:
        raise DistributionError(msg)


def _real(x, what, family):
    _require(
        isinstance(x, (int, float)) and not isinstance(x, bool),
        f"{family}: {what} must be a number, got {x!r}",
    )
    v = float(x)
    _require(math.isfinite(v), f"{family}: {what} must be finite, got {x!r}")
    return v


def _positive(x, what, family):
    v = _real(x, what, family)
    _require(v > 0.0, f"{family}: {what} must be positive, got {x!r}")
    return v


def _int(x, what, family):
    _require(
        isinstance(x, int) and not isinstance(x, bool),
        f"{family}: {what} must be an integer, got {x!r}",
    )
    return x


def _seq(x, what, family):
    _require(isinstance(x, (list, tuple)), f"{family}: {what} must be a sequence")
    return list(x)


def make(family, *params) -> Dist:
    """Construct a distribution value, validating its parameters."""
    if family == "flip":
        # boolean-valued coin; bernoulli covers the numeric 0/1 reading
        _require(len(params) == 1, "flip expects (p)")
        p = _real(params[0], "p", family)
        _require(0.0 <= p <= 1.0, f"flip: p must lie in [0,1], got {p}")
        return Dist("flip", (p,))
    if family == "normal":
        _require(len(params) == 2, "normal expects (mean, stddev)")
        mean = _real(params[0], "mean", family)
        sd = _positive(params[1], "stddev", family)
        return Dist("normal", (mean, sd))
    if family == "bernoulli":
        _require(len(params) == 1, "bernoulli expects (p)")
        p = _real(params[0], "p", family)
        _require(0.0 <= p <= 1.0, f"bernoulli: p must lie in [0,1], got {p}")
        return Dist("bernoulli", (p,))
    if family == "beta":
        _require(len(params) == 2, "beta expects (a, b)")
        return Dist(
            "beta",
            (_positive(params[0], "a", family), _positive(params[1], "b", family)),
        )
    if family == "gamma":
        _require(len(params) == 2, "gamma expects (shape, rate)")
        return Dist(
            "gamma",
            (
                _positive(params[0], "shape", family),
                _positive(params[1], "rate", family),
            ),
        )
    if family == "exponential":
        _require(len(params) == 1, "exponential expects (rate)")
        return Dist("exponential", (_positive(params[0], "rate", family),))
    if family == "poisson":
        _require(len(params) == 1, "poisson expects (rate)")
        return Dist("poisson", (_positive(params[0], "rate", family),))
    if family == "discrete":
        _require(len(params) == 1, "discrete expects (weights)")
        ws = [_real(w, "weight", family) for w in _seq(params[0], "weights", family)]
        _require(len(ws) > 0, "discrete: weights must be nonempty")
        _require(all(w >= 0.0 for w in ws), "discrete: weights must be nonnegative")
        total = sum(ws)
        _require(total > 0.0, "discrete: weights must not all be zero")
        return Dist("discrete", (tuple(w / total for w in ws),))
    if family == "uniform-discrete":
        _require(len(params) == 2, "uniform-discrete expects (lo, hi)")
        lo = _int(params[0], "lo", family)
        hi = _int(params[1], "hi", family)
        _require(lo < hi, f"uniform-discrete: lo must be < hi, got [{lo}, {hi})")
        return Dist("uniform-discrete", (lo, hi))
    if family == "uniform-continuous":
        _require(len(params) == 2, "uniform-continuous expects (lo, hi)")
        lo = _real(params[0], "lo", family)
        hi = _real(params[1], "hi", family)
        _require(lo < hi, f"uniform-continuous: lo must be < hi, got ({lo}, {hi})")
        return Dist("uniform-continuous", (lo, hi))
    if family == "uniform":
        _require(len(params) == 1, "uniform expects (items)")
        items = _seq(params[0], "items", family)
        _require(len(items) > 0, "uniform: items must be nonempty")
        return Dist("uniform", (tuple(items),))
    if family == "dirichlet":
        _require(len(params) == 1, "dirichlet expects (concentrations)")
        alphas = [
            _positive(a, "concentration", family)
            for a in _seq(params[0], "concentrations", family)
        ]
        _require(len(alphas) >= 2, "dirichlet: needs at least two concentrations")
        return Dist("dirichlet", (tuple(alphas),))
    if family == "dirac":
        _require(len(params) == 1, "dirac expects (point)")
        return Dist("dirac", (params[0],))
    if family == "factor-dist":
        _require(len(params) == 1, "factor-dist expects (log-weight)")
        lw = params[0]
        _require(
            isinstance(lw, (int, float)) and not isinstance(lw, bool),
            "factor-dist: log-weight must be a number",
        )
        return Dist("factor-dist", (float(lw),))
    raise DistributionError(f"unknown distribution family {family!r}")


def is_dist(v) -> bool:
    return isinstance(v, Dist)


# ---------------------------------------------------------------------------
# Value helpers


def values_equal(a, b) -> bool:
    """Structural equality over the runtime value universe.

    Booleans never equal numbers; ints and floats cross-compare.
    """
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return float(a) == float(b)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(values_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        if len(a) != len(b):
            return False
        for k, v in a.items():
            if k not in b or not values_equal(v, b[k]):
                return False
        return True
    return a == b


def _as_index(v):
    # booleans are not indices
    if isinstance(v, bool):
        return None
    if isinstance(v, int):
        return v
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return None


def _as_real(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        return None
    return float(v)


def _as_binary(v):
    # the bernoulli support: booleans or exact 0/1 numbers
    if isinstance(v, bool):
        return 1 if v else 0
    k = _as_index(v)
    if k in (0, 1):
        return k
    return None


# ---------------------------------------------------------------------------
# Sampling


def sample(d: Dist, rng: np.random.Generator):
    f, p = d.family, d.params
    if f == "normal":
        return float(rng.normal(p[0], p[1]))
    if f == "bernoulli":
        # 0/1 rather than booleans so draws compare and index numerically
        return int(rng.random() < p[0])
    if f == "flip":
        return bool(rng.random() < p[0])
    if f == "beta":
        return float(rng.beta(p[0], p[1]))
    if f == "gamma":
        return float(rng.gamma(p[0], 1.0 / p[1]))
    if f == "exponential":
        return float(rng.exponential(1.0 / p[0]))
    if f == "poisson":
        return int(rng.poisson(p[0]))
    if f == "discrete":
        u = rng.random()
        acc = 0.0
        ws = p[0]
        for k, w in enumerate(ws):
            acc += w
            if u < acc:
                return k
        return len(ws) - 1
    if f == "uniform-discrete":
        return int(rng.integers(p[0], p[1]))
    if f == "uniform-continuous":
        return float(rng.uniform(p[0], p[1]))
    if f == "uniform":
        items = p[0]
        k = int(rng.integers(0, len(items)))
        v = items[k]
        return list(v) if isinstance(v, tuple) else v
    if f == "dirichlet":
        return [float(x) for x in rng.dirichlet(p[0])]
    if f == "dirac":
        v = p[0]
        return list(v) if isinstance(v, tuple) else v
    if f == "factor-dist":
        return nil
    raise DistributionError(f"cannot sample family {f!r}")


# ---------------------------------------------------------------------------
# Log density / mass


def log_prob(d: Dist, v) -> float:
    f, p = d.family, d.params
    if f == "normal":
        x = _as_real(v)
        if x is None:
            return NEG_INF
        mean, sd = p
        z = (x - mean) / sd
        return -0.5 * z * z - math.log(sd) - 0.5 * LOG_2PI
    if f in ("bernoulli", "flip"):
        k = _as_binary(v)
        if k is None:
            return NEG_INF
        prob = p[0] if k == 1 else 1.0 - p[0]
        return math.log(prob) if prob > 0.0 else NEG_INF
    if f == "beta":
        x = _as_real(v)
        if x is None or not (0.0 < x < 1.0):
            return NEG_INF
        a, b = p
        return (
            (a - 1.0) * math.log(x)
            + (b - 1.0) * math.log1p(-x)
            + float(gammaln(a + b) - gammaln(a) - gammaln(b))
        )
    if f == "gamma":
        x = _as_real(v)
        if x is None or x <= 0.0:
            return NEG_INF
        shape, rate = p
        return (
            shape * math.log(rate)
            - float(gammaln(shape))
            + (shape - 1.0) * math.log(x)
            - rate * x
        )
    if f == "exponential":
        x = _as_real(v)
        if x is None or x < 0.0:
            return NEG_INF
        rate = p[0]
        return math.log(rate) - rate * x
    if f == "poisson":
        k = _as_index(v)
        if k is None or k < 0:
            return NEG_INF
        rate = p[0]
        return k * math.log(rate) - rate - float(gammaln(k + 1))
    if f == "discrete":
        k = _as_index(v)
        ws = p[0]
        if k is None or not (0 <= k < len(ws)):
            return NEG_INF
        return math.log(ws[k]) if ws[k] > 0.0 else NEG_INF
    if f == "uniform-discrete":
        k = _as_index(v)
        lo, hi = p
        if k is None or not (lo <= k < hi):
            return NEG_INF
        return -math.log(hi - lo)
    if f == "uniform-continuous":
        x = _as_real(v)
        lo, hi = p
        if x is None or not (lo <= x <= hi):
            return NEG_INF
        return -math.log(hi - lo)
    if f == "uniform":
        items = p[0]
        if any(values_equal(v, item) for item in items):
            return -math.log(len(items))
        return NEG_INF
    if f == "dirichlet":
        alphas = p[0]
        if not isinstance(v, (list, tuple)) or len(v) != len(alphas):
            return NEG_INF
        xs = [_as_real(x) for x in v]
        if any(x is None or x <= 0.0 for x in xs):
            return NEG_INF
        if abs(sum(xs) - 1.0) > 1e-8:
            return NEG_INF
        out = float(gammaln(sum(alphas)) - sum(gammaln(a) for a in alphas))
        out += sum((a - 1.0) * math.log(x) for a, x in zip(alphas, xs))
        return out
    if f == "dirac":
        return 0.0 if values_equal(v, p[0]) else NEG_INF
    if f == "factor-dist":
        return p[0] if v is nil else NEG_INF
    raise DistributionError(f"cannot score family {f!r}")


# ---------------------------------------------------------------------------
# Unconstrained parameterization and its gradients

GRAD_FAMILIES = ("normal", "gamma", "beta", "discrete", "exponential", "poisson")


def unconstrained_params(d: Dist):
    """Map parameters into the unconstrained space gradients live in."""
    f, p = d.family, d.params
    if f == "normal":
        return [p[0], math.log(p[1])]
    if f in ("gamma", "beta"):
        return [math.log(p[0]), math.log(p[1])]
    if f in ("exponential", "poisson"):
        return [math.log(p[0])]
    if f == "discrete":
        return [math.log(w) if w > 0.0 else -745.0 for w in p[0]]
    raise DistributionError(f"no unconstrained parameterization for {f!r}")


def from_unconstrained(family: str, theta) -> Dist:
    theta = [float(t) for t in theta]
    if family == "normal":
        return make("normal", theta[0], math.exp(theta[1]))
    if family == "gamma":
        return make("gamma", math.exp(theta[0]), math.exp(theta[1]))
    if family == "beta":
        return make("beta", math.exp(theta[0]), math.exp(theta[1]))
    if family == "exponential":
        return make("exponential", math.exp(theta[0]))
    if family == "poisson":
        return make("poisson", math.exp(theta[0]))
    if family == "discrete":
        m = max(theta)
        ws = [math.exp(t - m) for t in theta]
        return make("discrete", ws)
    raise DistributionError(f"no unconstrained parameterization for {family!r}")


def grad_log_prob(d: Dist, v):
    """d log p(v; theta) / d theta in the unconstrained parameterization."""
    f, p = d.family, d.params
    if f == "normal":
        x = _as_real(v)
        if x is None:
            raise DistributionError("normal: value must be a number")
        mean, sd = p
        z = (x - mean) / sd
        return [z / sd, z * z - 1.0]
    if f == "gamma":
        x = _as_real(v)
        if x is None or x <= 0.0:
            raise DistributionError("gamma: value must be positive")
        shape, rate = p
        d_shape = math.log(rate) - float(digamma(shape)) + math.log(x)
        d_rate = shape / rate - x
        return [shape * d_shape, rate * d_rate]
    if f == "beta":
        x = _as_real(v)
        if x is None or not (0.0 < x < 1.0):
            raise DistributionError("beta: value must lie in (0,1)")
        a, b = p
        dg_ab = float(digamma(a + b))
        d_a = math.log(x) - float(digamma(a)) + dg_ab
        d_b = math.log1p(-x) - float(digamma(b)) + dg_ab
        return [a * d_a, b * d_b]
    if f == "exponential":
        x = _as_real(v)
        if x is None or x < 0.0:
            raise DistributionError("exponential: value must be nonnegative")
        return [1.0 - p[0] * x]
    if f == "poisson":
        k = _as_index(v)
        if k is None or k < 0:
            raise DistributionError("poisson: value must be a nonnegative integer")
        return [float(k) - p[0]]
    if f == "discrete":
        ws = p[0]
        k = _as_index(v)
        if k is None or not (0 <= k < len(ws)):
            raise DistributionError("discrete: value must index the weights")
        return [(1.0 if j == k else 0.0) - ws[j] for j in range(len(ws))]
    raise DistributionError(f"grad_log_prob does not support family {f!r}")


# ---------------------------------------------------------------------------
# Wire serialization


def from_wire_spec(spec) -> Dist:
    from .values import from_wire

    try:
        family = spec["family"]
        params = [from_wire(p) for p in spec["params"]]
    except (KeyError, TypeError) as exc:
        raise DistributionError(f"malformed distribution record: {spec!r}") from exc
    return make(family, *params)
