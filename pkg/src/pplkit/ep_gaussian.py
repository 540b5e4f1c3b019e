"""Fully-factorized expectation propagation with Gaussian messages.

Messages live in natural parameters (tau, nu) = (precision,
precision*mean) for the sufficient statistics (x^2, x); a message is
the unnormalized exponential exp(-tau*x^2/2 + nu*x), and (0, 0) is
the improper uniform every edge starts from.

Supported potentials: Gaussian links N(affine(X); 0, sigma^2)
(priors, likelihoods, and chains are all instances), hard affine
constraints (the sigma=0 limit), and one-variable truncations from a
boolean comparison. Each factor update moment-matches the tilted
distribution against the cavity and writes damped messages back.

The evidence estimate composes per-factor integrals with the
marginal normalizers, evaluating each factor's contribution against
its freshly matched marginal so the estimate is self-consistent at a
fixed point (and exact after one sweep on a single normalized
factor).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .frontend import AppPrim, Constant, Variable, print_expr
from .graph_compiler import FactorGraph

LOG_2PI = math.log(2.0 * math.pi)


class EPError(Exception):
    pass


@dataclass(frozen=True)
class EPResult:
    marginals: dict  # variable -> (mean, variance)
    logZ: float
    skipped_updates: int
    sweeps: int


def _a(tau, nu):
    """log integral of exp(-tau x^2/2 + nu x) dx; requires tau > 0."""
    if tau <= 0.0:
        return math.inf
    return nu * nu / (2.0 * tau) + 0.5 * math.log(2.0 * math.pi / tau)


# ---------------------------------------------------------------------------
# Factor classification


def _affine(e):
    """(constant, {var: coefficient}) for +,-,* with constant scalars."""
    match e:
        case Constant(value=v) if isinstance(v, (int, float)) and not isinstance(
            v, bool
        ):
            return float(v), {}
        case Variable(name=n):
            return 0.0, {n: 1.0}
        case AppPrim(prim="+", args=args):
            const, coeffs = 0.0, {}
            for a in args:
                part = _affine(a)
                if part is None:
                    return None
                const += part[0]
                for k, w in part[1].items():
                    coeffs[k] = coeffs.get(k, 0.0) + w
            return const, coeffs
        case AppPrim(prim="-", args=args):
            first = _affine(args[0])
            if first is None:
                return None
            const, coeffs = first[0], dict(first[1])
            if len(args) == 1:
                return -const, {k: -w for k, w in coeffs.items()}
            for a in args[1:]:
                part = _affine(a)
                if part is None:
                    return None
                const -= part[0]
                for k, w in part[1].items():
                    coeffs[k] = coeffs.get(k, 0.0) - w
            return const, coeffs
        case AppPrim(prim="*", args=args):
            const, coeffs, scale = 1.0, None, 1.0
            for a in args:
                part = _affine(a)
                if part is None:
                    return None
                if part[1]:
                    if coeffs is not None:
                        return None  # product of two variables
                    coeffs = part
                else:
                    scale *= part[0]
            if coeffs is None:
                return scale, {}
            return coeffs[0] * scale, {k: w * scale for k, w in coeffs[1].items()}
    return None


_COMPARISONS = {">": False, ">=": False, "<": True, "<=": True}


@dataclass(frozen=True)
class _GaussianLink:
    # N(const + sum_i w_i x_i ; 0, sigma^2); sigma == 0 is a hard constraint
    const: float
    vars: tuple
    weights: tuple
    sigma: float


@dataclass(frozen=True)
class _Truncation:
    # requires (x > bound) == keep_upper on a single variable
    var: str
    bound: float
    keep_upper: bool


@dataclass(frozen=True)
class _ConstantPotential:
    log_value: float


def _classify(f, psi):
    def fail(why):
        return EPError(f"factor {f}: {why}: {print_expr(psi)}")

    match psi:
        case Constant(value=v) if isinstance(v, (int, float)):
            return _ConstantPotential(float(v))
        case AppPrim(prim="p_norm", args=(val, mean, sd)):
            if not (isinstance(sd, Constant) and isinstance(sd.value, (int, float))):
                raise fail("stddev must be a constant")
            left, right = _affine(val), _affine(mean)
            if left is None or right is None:
                raise fail("mean and value must be affine in the variables")
            const = left[0] - right[0]
            coeffs = dict(left[1])
            for k, w in right[1].items():
                coeffs[k] = coeffs.get(k, 0.0) - w
            coeffs = {k: w for k, w in coeffs.items() if w != 0.0}
            return _GaussianLink(
                const,
                tuple(coeffs),
                tuple(coeffs.values()),
                float(sd.value),
            )
        case AppPrim(prim="p_dirac", args=(a, b)):
            for flag, comparison in ((a, b), (b, a)):
                if isinstance(flag, Constant) and isinstance(flag.value, bool):
                    return _classify_comparison(f, psi, flag.value, comparison)
            left, right = _affine(a), _affine(b)
            if left is None or right is None:
                raise fail("constraint must be affine in the variables")
            const = left[0] - right[0]
            coeffs = dict(left[1])
            for k, w in right[1].items():
                coeffs[k] = coeffs.get(k, 0.0) - w
            coeffs = {k: w for k, w in coeffs.items() if w != 0.0}
            if not coeffs:
                return _ConstantPotential(0.0 if const == 0.0 else -math.inf)
            return _GaussianLink(const, tuple(coeffs), tuple(coeffs.values()), 0.0)
    raise fail("unsupported potential form")


def _classify_comparison(f, psi, flag, comparison):
    match comparison:
        case AppPrim(prim=op, args=(lhs, rhs)) if op in _COMPARISONS:
            left, right = _affine(lhs), _affine(rhs)
            if left is None or right is None:
                raise EPError(
                    f"factor {f}: comparison sides must be affine: {print_expr(psi)}"
                )
            const = left[0] - right[0]
            coeffs = dict(left[1])
            for k, w in right[1].items():
                coeffs[k] = coeffs.get(k, 0.0) - w
            coeffs = {k: w for k, w in coeffs.items() if w != 0.0}
            if len(coeffs) != 1:
                raise EPError(
                    f"factor {f}: truncation must involve exactly one variable: "
                    f"{print_expr(psi)}"
                )
            # region (const + w x > 0), possibly flipped by op and flag
            ((var, w),) = coeffs.items()
            keep_upper = w > 0.0
            bound = -const / w
            if _COMPARISONS[op]:
                keep_upper = not keep_upper
            if not flag:
                keep_upper = not keep_upper
            return _Truncation(var, bound, keep_upper)
    raise EPError(f"factor {f}: unsupported comparison: {print_expr(psi)}")


# ---------------------------------------------------------------------------
# Per-factor projection


def _log_gauss_integral(taus, nus, const, weights, sigma):
    """log of integral exp(sum_i -tau_i x_i^2/2 + nu_i x_i)
    N(const + w.x; 0, sigma^2) dx, or None if divergent."""
    d = len(taus)
    tau = np.array(taus)
    nu = np.array(nus)
    w = np.array(weights)
    if sigma > 0.0:
        A = np.diag(tau) + np.outer(w, w) / (sigma * sigma)
        b = nu - const * w / (sigma * sigma)
        base = -0.5 * (LOG_2PI + 2.0 * math.log(sigma)) - const * const / (
            2.0 * sigma * sigma
        )
    else:
        k = int(np.argmax(np.abs(w)))
        wk, tk, nk = w[k], tau[k], nu[k]
        keep = [i for i in range(d) if i != k]
        base = -math.log(abs(wk)) - tk * const * const / (2.0 * wk * wk) - (
            nk * const / wk
        )
        if not keep:
            return base
        wp = w[keep]
        A = np.diag(tau[keep]) + (tk / (wk * wk)) * np.outer(wp, wp)
        b = nu[keep] - (tk * const / (wk * wk)) * wp - (nk / wk) * wp
        d = len(keep)
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    half_logdet = float(np.sum(np.log(np.diag(chol))))
    y = np.linalg.solve(chol, b)
    return base + 0.5 * d * LOG_2PI - half_logdet + 0.5 * float(y @ y)


def _proj_gaussian_link(link, cavities):
    """New undamped messages {x: (tau, nu)} plus the factor integral."""
    messages = {}
    for k, xk in enumerate(link.vars):
        mean_shift = link.const
        var_sum = link.sigma * link.sigma
        ok = True
        for j, xj in enumerate(link.vars):
            if j == k:
                continue
            tau_j, nu_j = cavities[xj]
            if tau_j <= 0.0:
                ok = False
                break
            mean_shift += link.weights[j] * nu_j / tau_j
            var_sum += link.weights[j] ** 2 / tau_j
        if not ok:
            messages[xk] = (0.0, 0.0)
            continue
        wk = link.weights[k]
        var = var_sum / (wk * wk)
        if var <= 0.0:
            raise EPError(
                f"hard constraint pins {xk} exactly; eliminate it before running"
            )
        mean = -mean_shift / wk
        messages[xk] = (1.0 / var, mean / var)

    log_i = _log_gauss_integral(
        [cavities[x][0] for x in link.vars],
        [cavities[x][1] for x in link.vars],
        link.const,
        link.weights,
        link.sigma,
    )
    return messages, log_i


def _truncated_moments(mu, sd, bound, keep_upper):
    """Mean, variance, and log mass of a one-sided truncated Gaussian."""
    if keep_upper:
        alpha = (bound - mu) / sd
    else:
        alpha = (mu - bound) / sd
    log_mass = float(log_ndtr(-alpha))
    if alpha > 8.0:
        # deep truncation: asymptotic hazard; the generic variance
        # formula cancels to roundoff here, so use its expansion
        lam = alpha + 1.0 / alpha
        var = sd * sd / (alpha * alpha)
    else:
        log_pdf = -0.5 * alpha * alpha - 0.5 * LOG_2PI
        lam = math.exp(log_pdf - log_mass)
        var = sd * sd * (1.0 + alpha * lam - lam * lam)
    mean_shift = sd * lam
    if keep_upper:
        return mu + mean_shift, var, log_mass
    return mu - mean_shift, var, log_mass


def proj(fg: FactorGraph, messages, f, damping=1.0):
    """One factor update: moment-match against the cavities and damp
    the stored messages. Returns (log Z_f or None, skipped count).

    messages is mutated in place; it maps (factor, variable) to
    natural parameters.
    """
    kind = _classify(f, fg.Psi[f])

    if isinstance(kind, _ConstantPotential):
        if kind.log_value == -math.inf:
            raise EPError(f"factor {f}: contradictory constant constraint")
        return kind.log_value, 0

    adjacent = _adjacent_map(fg)
    skipped = 0

    def cavity(x):
        tau = sum(messages[(g, x)][0] for g in adjacent[x])
        nu = sum(messages[(g, x)][1] for g in adjacent[x])
        mt, mn = messages[(f, x)]
        return tau - mt, nu - mn

    if isinstance(kind, _Truncation):
        x = kind.var
        ct, cn = cavity(x)
        if ct < 0.0:
            return None, 1
        if ct == 0.0:
            return None, 0  # nothing to truncate yet
        mu, sd = cn / ct, math.sqrt(1.0 / ct)
        mean, var, log_mass = _truncated_moments(mu, sd, kind.bound, kind.keep_upper)
        if log_mass == -math.inf:
            raise EPError(f"factor {f}: truncation region has zero mass")
        if var <= 0.0:
            return None, 1
        star = (1.0 / var, mean / var)
        skipped += _write(messages, adjacent, f, x, (star[0] - ct, star[1] - cn), damping)
        log_zf = log_mass + _a(ct, cn) - _a(*star)
        return log_zf, skipped

    # Gaussian link
    cavities = {}
    for x in kind.vars:
        ct, cn = cavity(x)
        if ct < 0.0:
            return None, 1
        cavities[x] = (ct, cn)
    new_messages, log_i = _proj_gaussian_link(kind, cavities)
    log_zf = log_i
    for x in kind.vars:
        msg = new_messages[x]
        star_tau = cavities[x][0] + msg[0]
        star_nu = cavities[x][1] + msg[1]
        if log_zf is not None:
            if star_tau <= 0.0:
                log_zf = None
            else:
                log_zf -= _a(star_tau, star_nu)
        if msg != (0.0, 0.0):
            skipped += _write(messages, adjacent, f, x, msg, damping)
    return log_zf, skipped


def _write(messages, adjacent, f, x, target, damping):
    """Damped message write; reverts if the marginal would turn improper."""
    old = messages[(f, x)]
    new = (
        damping * target[0] + (1.0 - damping) * old[0],
        damping * target[1] + (1.0 - damping) * old[1],
    )
    messages[(f, x)] = new
    marginal_tau = sum(messages[(g, x)][0] for g in adjacent[x])
    if marginal_tau <= 0.0 and new[0] < old[0]:
        messages[(f, x)] = old
        return 1
    return 0


def _adjacent_map(fg: FactorGraph):
    order = {f: i for i, f in enumerate(fg.F)}
    adjacent = {x: [] for x in fg.X}
    for x, f in fg.A:
        adjacent[x].append(f)
    for x in adjacent:
        adjacent[x].sort(key=order.get)
    return adjacent


def ep(fg: FactorGraph, sweeps: int = 20, damping: float = 0.8) -> EPResult:
    """Round-robin EP over the factors, a fixed number of sweeps."""
    if not (0.0 < damping <= 1.0):
        raise EPError("damping must lie in (0, 1]")
    adjacent = _adjacent_map(fg)
    messages = {}
    for x, fs in adjacent.items():
        for f in fs:
            messages[(f, x)] = (0.0, 0.0)
    log_zf = {}
    skipped = 0
    for _ in range(sweeps):
        for f in fg.F:
            zf, sk = proj(fg, messages, f, damping)
            log_zf[f] = zf
            skipped += sk

    marginals = {}
    log_z = 0.0
    for x in fg.X:
        tau = sum(messages[(f, x)][0] for f in adjacent[x])
        nu = sum(messages[(f, x)][1] for f in adjacent[x])
        if tau <= 0.0 or not math.isfinite(tau):
            raise EPError(f"marginal for {x} is improper after {sweeps} sweeps")
        marginals[x] = (nu / tau, 1.0 / tau)
        log_z += _a(tau, nu)
    for f in fg.F:
        if f not in log_zf:
            raise EPError(f"factor {f} was never projected")
        if log_zf[f] is None:
            raise EPError(f"factor {f} never produced a finite evidence contribution")
        log_z += log_zf[f]
    return EPResult(
        marginals=marginals, logZ=log_z, skipped_updates=skipped, sweeps=sweeps
    )
