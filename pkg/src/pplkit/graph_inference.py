"""Inference on compiled graphs: joint evaluation, ancestral sampling,
MH-within-Gibbs, and Hamiltonian Monte Carlo.

A Trace carries the latent assignment plus cached per-site log
densities so sweep updates touch only the sites whose densities
mention the changed variable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import distributions as dist
from .autodiff import Input, eval_lifted, grad, unbox
from .frontend import AppPrim, Constant, If, Variable
from .graph_compiler import Graph, unscore
from .target_eval import eval_det, free_vars, partial_eval, truthy

NEG_INF = float("-inf")


class InferenceError(Exception):
    pass


@dataclass
class Trace:
    X: dict = field(default_factory=dict)  # latent -> value
    logP: dict = field(default_factory=dict)  # vertex -> cached log density

    def copy(self):
        return Trace(dict(self.X), dict(self.logP))


# ---------------------------------------------------------------------------
# Structure


def topological_order(g: Graph):
    """Parents before children; ties broken by vertex creation order."""
    index = {v: i for i, v in enumerate(g.V)}
    children = {v: [] for v in g.V}
    indegree = {v: 0 for v in g.V}
    for parent, child in g.A:
        children[parent].append(child)
        indegree[child] += 1
    ready = sorted((v for v in g.V if indegree[v] == 0), key=index.__getitem__)
    out = []
    while ready:
        v = ready.pop(0)
        out.append(v)
        for c in sorted(children[v], key=index.__getitem__):
            indegree[c] -= 1
            if indegree[c] == 0:
                ready.append(c)
        ready.sort(key=index.__getitem__)
    if len(out) != len(g.V):
        raise InferenceError("graph has a cycle")
    return out


def observed_values(g: Graph) -> dict:
    """Evaluate the (closed) observed-value expressions once."""
    return {y: eval_det(value, {}) for y, (value, _g) in g.Y.items()}


def _site_log_density(g: Graph, v, env) -> float:
    """log density at one vertex; guarded observes score 0 off-path."""
    if v in g.Y:
        _value, guard = g.Y[v]
        if not truthy(eval_det(guard, env)):
            return 0.0
    return eval_det(g.P[v], env)


def log_joint(g: Graph, values: dict) -> float:
    """Sum of site log densities for a complete vertex assignment."""
    total = 0.0
    for v in g.V:
        term = _site_log_density(g, v, values)
        if term == NEG_INF:
            return NEG_INF
        total += term
    return total


def prior_dist(g: Graph, v, env) -> dist.Dist:
    """The conditional distribution at v given parent values."""
    d = eval_det(unscore(g.P[v], v), env)
    if not isinstance(d, dist.Dist):
        raise InferenceError(f"prior expression at {v} is not a distribution")
    return d


def ancestral_sample(g: Graph, rng):
    """Draw latents from their prior conditionals in topological order.

    Returns (trace, log likelihood of the observations) so a caller
    doing importance sampling can weight the draw.
    """
    env = observed_values(g)
    trace = Trace()
    log_lik = 0.0
    for v in topological_order(g):
        if v in g.Y:
            lp = _site_log_density(g, v, env)
            trace.logP[v] = lp
            log_lik += lp
        else:
            try:
                d = prior_dist(g, v, env)
            except Exception as exc:
                raise InferenceError(f"cannot sample vertex {v}: {exc}") from exc
            value = dist.sample(d, rng)
            env[v] = value
            trace.X[v] = value
            trace.logP[v] = dist.log_prob(d, value)
    return trace, log_lik


# ---------------------------------------------------------------------------
# MH within Gibbs


def default_proposals(g: Graph) -> dict:
    """Prior conditionals as proposal expressions, one per latent."""
    return {v: unscore(g.P[v], v) for v in g.latents()}


def gaussian_rw_proposals(g: Graph, scale=1.0) -> dict:
    """Random-walk proposal centered on the current value of each site."""
    return {
        v: AppPrim("normal", (Variable(v), Constant(float(scale))))
        for v in g.latents()
    }


def _blanket(g: Graph, latents) -> dict:
    """V_x: the vertices whose density (or guard) mentions x."""
    out = {x: [] for x in latents}
    for v in g.V:
        mentioned = free_vars(g.P[v])
        if v in g.Y:
            mentioned = mentioned | free_vars(g.Y[v][1])
        for x in mentioned:
            if x in out:
                out[x].append(v)
    return out


def initial_trace(g: Graph, rng, attempts=100) -> Trace:
    """Ancestral draw retried until the joint density is finite."""
    env_obs = observed_values(g)
    for _ in range(attempts):
        trace, _ = ancestral_sample(g, rng)
        if log_joint(g, {**env_obs, **trace.X}) > NEG_INF:
            return trace
    raise InferenceError(
        f"no initialization with finite joint density in {attempts} attempts"
    )


def gibbs(g: Graph, Q, X0: Trace, S: int, rng):
    """MH-within-Gibbs sweeps with per-site proposal expressions Q."""
    latents = g.latents()
    blanket = _blanket(g, set(latents))
    env = observed_values(g)
    env.update(X0.X)
    trace = X0.copy()
    for v in g.V:
        if v not in trace.logP:
            trace.logP[v] = _site_log_density(g, v, env)

    out = []
    for _ in range(S):
        for x in latents:
            q_expr = Q[x]
            d_fwd = eval_det(q_expr, env)
            proposed = dist.sample(d_fwd, rng)
            old = env[x]

            env[x] = proposed
            d_rev = eval_det(q_expr, env)
            log_alpha = dist.log_prob(d_rev, old) - dist.log_prob(d_fwd, proposed)
            new_site = {}
            ok = True
            for v in blanket[x]:
                lp = _site_log_density(g, v, env)
                if lp == NEG_INF:
                    ok = False
                    break
                new_site[v] = lp
                log_alpha += lp - trace.logP[v]
            if ok and math.log(rng.random()) < log_alpha:
                trace.X[x] = proposed
                trace.logP.update(new_site)
            else:
                env[x] = old
        out.append(trace.copy())
    return out


# ---------------------------------------------------------------------------
# Hamiltonian Monte Carlo

_CONTINUOUS_PRIMS = frozenset(
    {"p_norm", "p_beta", "p_gamma", "p_exp", "p_unif_cont", "p_factor"}
)


def _density_prims_on(e, v):
    """Density primitive names that score vertex v inside expression e."""
    out = set()

    def walk(node):
        match node:
            case AppPrim(prim=f, args=args):
                if (
                    f.startswith("p_")
                    and args
                    and isinstance(args[0], Variable)
                    and args[0].name == v
                ):
                    out.add(f)
                for a in args:
                    walk(a)
            case If(pred=p, conseq=c, alt=a):
                walk(p)
                walk(c)
                walk(a)

    walk(e)
    return out


def _if_predicates(e):
    match e:
        case If(pred=p, conseq=c, alt=a):
            yield p
            yield from _if_predicates(p)
            yield from _if_predicates(c)
            yield from _if_predicates(a)
        case AppPrim(args=args):
            for arg in args:
                yield from _if_predicates(arg)


def hmc_applicable(g: Graph):
    """(ok, reason): whether the joint density is differentiable in
    every latent."""
    latents = set(g.latents())
    for v in g.latents():
        prims = _density_prims_on(g.P[v], v)
        bad = prims - _CONTINUOUS_PRIMS
        if bad:
            return False, (
                f"latent {v} is drawn from a discrete or non-differentiable "
                f"family ({', '.join(sorted(bad))})"
            )
    for v in g.V:
        # an observation guard is itself a branch: the density term
        # vanishes on one side of it
        preds = []
        if v in g.Y and g.Y[v][1] is not None:
            preds.append(g.Y[v][1])
        exprs = [g.P[v], *preds]
        for e in exprs:
            preds.extend(_if_predicates(e))
        for pred in preds:
            touched = free_vars(pred) & latents
            if touched:
                return False, (
                    f"the density of {v} branches on latent "
                    f"{sorted(touched)[0]}; the gradient is undefined at "
                    "the branch boundary"
                )
    return True, ""


def potential_expr(g: Graph):
    """-log joint as one target expression over the latent symbols."""
    terms = []
    for v in g.V:
        if v in g.Y:
            value, guard = g.Y[v]
            term = partial_eval(
                _subst_vertex(g.P[v], v, value)
            )
            if not (isinstance(guard, Constant) and guard.value is True):
                term = If(guard, term, Constant(0.0))
            terms.append(term)
        else:
            terms.append(g.P[v])
    if not terms:
        return Constant(0.0)
    joint = terms[0] if len(terms) == 1 else AppPrim("+", tuple(terms))
    return AppPrim("-", (joint,))


def _subst_vertex(e, v, value):
    from .target_eval import substitute

    return substitute(e, {v: value})


def _energy_and_grad(e_u, positions):
    env = {v: Input(val, v) for v, val in positions.items()}
    tape = eval_lifted(e_u, env)
    u = float(unbox(tape))
    if not math.isfinite(u):
        return u, None
    gr = grad(tape)
    return u, {v: gr.get(v, 0.0) for v in positions}


def hmc(g: Graph, X0: Trace, S: int, T: int = 20, eps: float = 0.05, M=None, rng=None):
    """Hamiltonian Monte Carlo over all-continuous latents."""
    ok, reason = hmc_applicable(g)
    if not ok:
        raise InferenceError(f"gradient-based simulation unavailable: {reason}")
    latents = list(g.latents())
    mass = {v: 1.0 for v in latents}
    if M:
        mass.update(M)
    e_u = potential_expr(g)

    q = {v: float(X0.X[v]) for v in latents}
    u, gu = _energy_and_grad(e_u, q)
    if not math.isfinite(u):
        raise InferenceError("initial state has non-finite energy")

    out = []
    for _ in range(S):
        r = {v: rng.normal(0.0, math.sqrt(mass[v])) for v in latents}
        h0 = u + 0.5 * sum(r[v] ** 2 / mass[v] for v in latents)

        q_new = dict(q)
        r_new = dict(r)
        u_new, g_new = u, gu
        rejected = False
        for v in latents:
            r_new[v] -= 0.5 * eps * g_new[v]
        for step in range(T):
            for v in latents:
                q_new[v] += eps * r_new[v] / mass[v]
            u_new, g_new = _energy_and_grad(e_u, q_new)
            if g_new is None:
                rejected = True
                break
            scale = eps if step < T - 1 else 0.5 * eps
            for v in latents:
                r_new[v] -= scale * g_new[v]

        if not rejected:
            h1 = u_new + 0.5 * sum(r_new[v] ** 2 / mass[v] for v in latents)
            if math.isfinite(h1) and math.log(rng.random()) < h0 - h1:
                q, u, gu = q_new, u_new, g_new
        out.append(Trace(X=dict(q), logP={}))
    return out
