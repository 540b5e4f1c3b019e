"""Evaluation-based inference: run the program forward, intercepting
sample and observe.

Every algorithm here is a pair of hooks handed to the same base
evaluator plus some bookkeeping between runs. The inference state
carries named registers; each algorithm reads and writes only its
own. Programs are inlined and addressed first so that a runtime
sample site is identified by a stable string address across runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    GRAD_FAMILIES,
    Dist,
    from_unconstrained,
    grad_log_prob,
    log_prob,
    make_rng,
    sample,
    unconstrained_params,
)
from .frontend import (
    AppPrim,
    AppUser,
    Constant,
    If,
    Let,
    Observe,
    Program,
    Sample,
    Variable,
    fresh_symbol,
)
from .target_eval import EvalError, apply_prim, substitute, truthy


class InferenceError(Exception):
    pass


@dataclass
class InferState:
    """Registers shared by the evaluation-based algorithms."""

    logW: float = 0.0
    X: dict = field(default_factory=dict)  # address -> sampled value
    C: dict = field(default_factory=dict)  # reuse cache, address -> value
    logP: dict = field(default_factory=dict)  # address -> log density
    x0: object = None  # address singled out for resampling
    Q: dict = field(default_factory=dict)  # address -> proposal Dist
    G: dict = field(default_factory=dict)  # address -> parameter gradient
    log_lambda: float = 0.0  # cumulative observe log-likelihood
    y_r: object = None  # breakpoint address


@dataclass(frozen=True)
class WeightedSample:
    value: object
    logW: float


# ---------------------------------------------------------------------------
# Base evaluator


def eval_foppl(e, sigma: InferState, env, hooks, defs=None):
    """Forward evaluation with lazy if; sample/observe go to hooks.

    hooks is (on_sample, on_observe) with signatures
    on_sample(sigma, addr, dist) -> value and
    on_observe(sigma, addr, dist, value) -> value.
    defs maps procedure names to (params, body) for user calls.
    """
    return _ev(e, sigma, env, hooks, defs or {}), sigma


def _ev(e, sigma, env, hooks, defs):
    match e:
        case Constant(value=v):
            return v
        case Variable(name=n):
            try:
                return env[n]
            except KeyError:
                raise EvalError(f"unbound variable {n}", e) from None
        case Let(var=v, bound=b, body=body):
            bound = _ev(b, sigma, env, hooks, defs)
            inner = dict(env)
            inner[v] = bound
            return _ev(body, sigma, inner, hooks, defs)
        case If(pred=p, conseq=t, alt=a):
            if truthy(_ev(p, sigma, env, hooks, defs)):
                return _ev(t, sigma, env, hooks, defs)
            return _ev(a, sigma, env, hooks, defs)
        case AppPrim(prim=name, args=args):
            vals = [_ev(a, sigma, env, hooks, defs) for a in args]
            return apply_prim(name, vals, e)
        case AppUser(proc=name, args=args):
            try:
                params, body = defs[name]
            except KeyError:
                raise EvalError(f"unknown procedure {name}", e) from None
            vals = [_ev(a, sigma, env, hooks, defs) for a in args]
            return _ev(body, sigma, dict(zip(params, vals)), hooks, defs)
        case Sample(dist=d, addr=addr):
            dist = _ev(d, sigma, env, hooks, defs)
            if not isinstance(dist, Dist):
                raise EvalError("sample of a non-distribution value", e)
            return hooks[0](sigma, addr, dist)
        case Observe(dist=d, value=v, addr=addr):
            dist = _ev(d, sigma, env, hooks, defs)
            if not isinstance(dist, Dist):
                raise EvalError("observe of a non-distribution value", e)
            val = _ev(v, sigma, env, hooks, defs)
            return hooks[1](sigma, addr, dist, val)
    raise EvalError("not a runnable expression", e)


def _run(p: Program, sigma, hooks):
    defs = {name: (params, body) for name, params, body in p.defs}
    return _ev(p.body, sigma, {}, hooks, defs)


# ---------------------------------------------------------------------------
# Addressing


def has_addresses(p: Program) -> bool:
    found = False

    def walk(e):
        nonlocal found
        match e:
            case Sample(addr=a) | Observe(addr=a):
                if a is not None:
                    found = True
        for child in _children(e):
            walk(child)

    walk(p.body)
    for _, _, body in p.defs:
        walk(body)
    return found


def _children(e):
    match e:
        case Let(bound=b, body=body):
            return (b, body)
        case If(pred=p, conseq=t, alt=a):
            return (p, t, a)
        case AppPrim(args=args) | AppUser(args=args):
            return args
        case Sample(dist=d):
            return (d,)
        case Observe(dist=d, value=v):
            return (d, v)
    return ()


def address_foppl(p: Program) -> Program:
    """Inline user procedures and give every sample/observe a fresh
    string address, so each runtime site is statically distinct."""
    if p.lang != "foppl":
        raise InferenceError("addressing applies to first-order programs")
    if has_addresses(p):
        raise InferenceError("program already carries addresses")
    defs = {name: (params, body) for name, params, body in p.defs}
    counter = [0]

    def mint(kind):
        counter[0] += 1
        return f"{kind}{counter[0]}"

    def walk(e):
        match e:
            case Constant() | Variable():
                return e
            case Let(var=v, bound=b, body=body, pos=pos):
                return Let(v, walk(b), walk(body), pos=pos)
            case If(pred=pr, conseq=t, alt=a, pos=pos):
                return If(walk(pr), walk(t), walk(a), pos=pos)
            case AppPrim(prim=name, args=args, pos=pos):
                return AppPrim(name, tuple(walk(a) for a in args), pos=pos)
            case AppUser(proc=name, args=args, pos=pos):
                params, body = defs[name]
                renames = {q: fresh_symbol(q) for q in params}
                inlined = substitute(
                    body, {q: Variable(renames[q]) for q in params}
                )
                out = walk(inlined)
                for q, a in reversed(list(zip(params, args))):
                    out = Let(renames[q], walk(a), out, pos=pos)
                return out
            case Sample(dist=d, pos=pos):
                return Sample(walk(d), addr=mint("s"), pos=pos)
            case Observe(dist=d, value=v, pos=pos):
                return Observe(walk(d), walk(v), addr=mint("y"), pos=pos)
        raise InferenceError(f"cannot address expression: {e!r}")

    return Program(defs=(), body=walk(p.body), lang="foppl")


def _addressed(p: Program) -> Program:
    return p if has_addresses(p) else address_foppl(p)


# ---------------------------------------------------------------------------
# Likelihood weighting


def likelihood_weighting(p: Program, L: int, rng=None, seed=None):
    """Draw latents from the prior; observes accumulate log weight."""
    rng = rng if rng is not None else make_rng(seed)

    def on_sample(sigma, addr, dist):
        return sample(dist, rng)

    def on_observe(sigma, addr, dist, val):
        sigma.logW += log_prob(dist, val)
        return val

    out = []
    for _ in range(L):
        sigma = InferState()
        value = _run(p, sigma, (on_sample, on_observe))
        out.append(WeightedSample(value, sigma.logW))
    return out


def posterior_mean(samples):
    """Self-normalized importance-sampling estimate of the mean."""
    logw = np.array([s.logW for s in samples], dtype=float)
    vals = np.array([float(s.value) for s in samples], dtype=float)
    m = np.max(logw)
    if not np.isfinite(m):
        raise InferenceError("all weights are zero")
    w = np.exp(logw - m)
    return float(np.sum(w * vals) / np.sum(w))


# ---------------------------------------------------------------------------
# Metropolis-Hastings, independent proposals from the prior


def independent_mh(p: Program, S: int, rng=None, seed=None):
    """Propose whole fresh runs; accept with likelihood ratio W'/W."""
    rng = rng if rng is not None else make_rng(seed)

    def on_sample(sigma, addr, dist):
        return sample(dist, rng)

    def on_observe(sigma, addr, dist, val):
        sigma.logW += log_prob(dist, val)
        return val

    hooks = (on_sample, on_observe)
    sigma = InferState()
    r = _run(p, sigma, hooks)
    logw = sigma.logW
    out = []
    accepted = 0
    for _ in range(S):
        sigma2 = InferState()
        r2 = _run(p, sigma2, hooks)
        log_alpha = sigma2.logW - logw
        if math.isnan(log_alpha):  # both weights zero: keep the old run
            log_alpha = -math.inf
        if math.log(rng.random()) < log_alpha:
            r, logw = r2, sigma2.logW
            accepted += 1
        out.append(r)
    return out


# ---------------------------------------------------------------------------
# Single-site Metropolis-Hastings


def accept_single_site(x0, X_new, X_old, logP_new, logP_old):
    """Log acceptance ratio for a one-site proposal.

    Freshly sampled sites (the picked site plus any site absent from
    the other trace) are excluded from both products; their prior
    proposal terms cancel against the target.
    """
    sampled_new = {x0} | (set(X_new) - set(X_old))
    sampled_old = {x0} | (set(X_old) - set(X_new))
    log_alpha = math.log(len(X_old)) - math.log(len(X_new))
    for v, lp in logP_new.items():
        if v not in sampled_new:
            log_alpha += lp
    for v, lp in logP_old.items():
        if v not in sampled_old:
            log_alpha -= lp
    return log_alpha


def _traced_hooks(rng):
    def on_sample(sigma, addr, dist):
        if addr == sigma.x0 or addr not in sigma.C:
            val = sample(dist, rng)
        else:
            val = sigma.C[addr]
        sigma.X[addr] = val
        sigma.logP[addr] = log_prob(dist, val)
        return val

    def on_observe(sigma, addr, dist, val):
        sigma.logP[addr] = log_prob(dist, val)
        return val

    return (on_sample, on_observe)


def single_site_mh(p: Program, S: int, rng=None, seed=None, always_accept=False):
    """Resample one address per step, replay the rest from cache.

    always_accept skips the ratio (a diagnostic switch: the chain then
    samples the prior).
    """
    rng = rng if rng is not None else make_rng(seed)
    p = _addressed(p)
    defs = {name: (params, body) for name, params, body in p.defs}
    hooks = _traced_hooks(rng)

    sigma = None
    for _ in range(100):
        trial = InferState()
        r = _ev(p.body, trial, {}, hooks, defs)
        if all(lp > -math.inf for lp in trial.logP.values()):
            sigma = trial
            break
    if sigma is None:
        raise InferenceError(
            "no initial run with positive density in 100 attempts"
        )

    out = []
    for _ in range(S):
        if not sigma.X:  # no latents: reruns are deterministic
            out.append(r)
            continue
        addresses = list(sigma.X)
        x0 = addresses[rng.integers(len(addresses))]
        prop = InferState(C=dict(sigma.X), x0=x0)
        r2 = _ev(p.body, prop, {}, hooks, defs)
        if always_accept:
            keep = True
        else:
            log_alpha = accept_single_site(
                x0, prop.X, sigma.X, prop.logP, sigma.logP
            )
            keep = math.log(rng.random()) < log_alpha
        if keep:
            sigma, r = prop, r2
        out.append(r)
    return out


# ---------------------------------------------------------------------------
# Sequential Monte Carlo with resampling breakpoints


class _Breakpoint(Exception):
    pass


def observe_addresses(p: Program, rng=None, seed=None):
    """Observe addresses in the order one prior run encounters them."""
    rng = rng if rng is not None else make_rng(seed)
    p = _addressed(p)
    defs = {name: (params, body) for name, params, body in p.defs}
    order = []

    def on_sample(sigma, addr, dist):
        return sample(dist, rng)

    def on_observe(sigma, addr, dist, val):
        order.append(addr)
        return val

    _ev(p.body, InferState(), {}, (on_sample, on_observe), defs)
    return order


def smc(
    p: Program,
    L: int,
    breakpoints=None,
    rng=None,
    seed=None,
    systematic=False,
):
    """Particle inference; resample at each breakpoint address.

    Every particle must meet the breakpoints in the given order; a
    particle whose run hits a different schedule aborts the sweep.
    Returns (weighted samples, log evidence estimate).
    """
    rng = rng if rng is not None else make_rng(seed)
    p = _addressed(p)
    defs = {name: (params, body) for name, params, body in p.defs}
    if breakpoints is None:
        breakpoints = observe_addresses(p, rng=rng)

    def on_sample(sigma, addr, dist):
        if addr in sigma.X:
            return sigma.X[addr]
        val = sample(dist, rng)
        sigma.X[addr] = val
        return val

    def on_observe(sigma, addr, dist, val):
        sigma.log_lambda += log_prob(dist, val)
        if sigma.y_r is not None and addr == sigma.y_r:
            raise _Breakpoint()
        return val

    hooks = (on_sample, on_observe)
    retained = [dict() for _ in range(L)]
    base = [0.0] * L
    log_z = 0.0

    for y_r in breakpoints:
        deltas = np.empty(L)
        lams = np.empty(L)
        for l in range(L):
            sigma = InferState(X=retained[l], y_r=y_r)
            try:
                _ev(p.body, sigma, {}, hooks, defs)
            except _Breakpoint:
                pass
            else:
                raise InferenceError(
                    f"a particle finished without reaching breakpoint {y_r}"
                )
            lams[l] = sigma.log_lambda
            deltas[l] = sigma.log_lambda - base[l]
        shift = np.max(deltas)
        if not np.isfinite(shift):
            raise InferenceError(
                f"all particles have zero weight at breakpoint {y_r}"
            )
        w = np.exp(deltas - shift)
        log_z += shift + math.log(float(np.mean(w)))
        probs = w / np.sum(w)
        ancestors = _resample(rng, probs, L, systematic)
        retained = [dict(retained[a]) for a in ancestors]
        base = [lams[a] for a in ancestors]

    out = []
    finals = np.empty(L)
    for l in range(L):
        sigma = InferState(X=retained[l])
        value = _ev(p.body, sigma, {}, hooks, defs)
        finals[l] = sigma.log_lambda - base[l] + log_z
        out.append(WeightedSample(value, float(finals[l])))
    shift = np.max(finals)
    if not np.isfinite(shift):
        raise InferenceError("all particles have zero weight at return")
    log_z_final = shift + math.log(float(np.mean(np.exp(finals - shift))))
    return out, log_z_final


def _resample(rng, probs, L, systematic):
    if systematic:
        positions = (rng.random() + np.arange(L)) / L
        return np.searchsorted(np.cumsum(probs), positions)
    return rng.choice(L, size=L, p=probs)


# ---------------------------------------------------------------------------
# Black-box variational inference


@dataclass
class BBVIResult:
    Q: dict  # address -> learned proposal Dist
    samples: list  # WeightedSample per (step, run)
    elbo_trace: list  # mean logW per step


def bbvi(p: Program, T: int, L: int, rng=None, seed=None, lr=0.1):
    """Score-function ELBO ascent with a per-address covariance
    baseline and adagrad steps; proposals start at the prior."""
    rng = rng if rng is not None else make_rng(seed)
    p = _addressed(p)
    defs = {name: (params, body) for name, params, body in p.defs}

    params = {}  # address -> unconstrained parameter vector
    family = {}  # address -> family name
    accum = {}  # address -> adagrad accumulator

    def proposal(addr):
        return from_unconstrained(family[addr], params[addr])

    def on_sample(sigma, addr, dist):
        if addr not in params:
            if dist.family not in GRAD_FAMILIES:
                raise InferenceError(
                    f"no gradient support for family {dist.family} at {addr}"
                )
            family[addr] = dist.family
            params[addr] = np.array(unconstrained_params(dist), dtype=float)
            accum[addr] = np.zeros_like(params[addr])
        q = proposal(addr)
        val = sample(q, rng)
        sigma.G[addr] = np.array(grad_log_prob(q, val), dtype=float)
        sigma.logW += log_prob(dist, val) - log_prob(q, val)
        return val

    def on_observe(sigma, addr, dist, val):
        sigma.logW += log_prob(dist, val)
        return val

    hooks = (on_sample, on_observe)
    out = []
    elbo_trace = []
    for _ in range(T):
        runs = []
        for _ in range(L):
            sigma = InferState()
            value = _ev(p.body, sigma, {}, hooks, defs)
            runs.append(sigma)
            out.append(WeightedSample(value, sigma.logW))
        elbo_trace.append(float(np.mean([s.logW for s in runs])))

        for addr in params:
            dim = params[addr].shape[0]
            G = np.zeros((L, dim))
            F = np.zeros((L, dim))
            for l, sigma in enumerate(runs):
                g = sigma.G.get(addr)
                if g is not None:
                    lw = sigma.logW if math.isfinite(sigma.logW) else -1e12
                    G[l] = g
                    F[l] = lw * g
            var_g = np.var(G, axis=0)
            total_var = float(np.sum(var_g))
            if total_var > 0.0:
                cov = np.mean((F - F.mean(axis=0)) * (G - G.mean(axis=0)), axis=0)
                b_hat = float(np.sum(cov)) / total_var
            else:
                b_hat = 0.0
            g_hat = np.mean(F - b_hat * G, axis=0)
            accum[addr] += g_hat * g_hat
            step = lr / np.sqrt(accum[addr] + 1e-12)
            params[addr] = params[addr] + step * g_hat

    q_final = {addr: proposal(addr) for addr in params}
    return BBVIResult(Q=q_final, samples=out, elbo_trace=elbo_trace)
