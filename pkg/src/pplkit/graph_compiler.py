"""Compilation of core first-order programs to graphical models.

compile_graph walks the desugared program and emits one vertex per
sample or observe form, inlining user procedures by substitution and
partially evaluating on the way, so arcs reflect true dependencies
only. P maps each vertex to a log-density expression in call shape
(p_c v args...); guards on observations live next to the observed
value in Y rather than being multiplied into P, and evaluation
composes them as (if guard logF 0).

compile_factor_graph additionally pulls deterministic sub-expressions
out into point-mass vertices (the source transform here), regroups
the result as a bipartite factor graph, and eliminates the point-mass
factors that merely name a constant or alias two variables.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import distributions as dist
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
)
from .target_eval import (
    DENSITY_PRIM_OF_FAMILY,
    FAMILY_OF_DENSITY_PRIM,
    _vector_entries,
    free_vars,
    partial_eval,
    substitute,
)
from .values import Symbol


class GraphCompileError(Exception):
    def __init__(self, msg, pos=None):
        if pos is not None:
            msg = f"{msg} (line {pos[0]}, column {pos[1]})"
        super().__init__(msg)
        self.pos = pos


@dataclass(frozen=True)
class Graph:
    V: tuple  # vertex symbols in creation order (a topological order)
    A: frozenset  # arcs (parent, child)
    P: dict  # vertex -> log-density TargetExpr
    Y: dict  # observed vertex -> (value TargetExpr, guard TargetExpr)

    def latents(self):
        return tuple(v for v in self.V if v not in self.Y)

    def observed(self):
        return tuple(v for v in self.V if v in self.Y)

    def parents(self, v):
        return free_vars(self.P[v]) - {v}


@dataclass(frozen=True)
class FactorGraph:
    X: tuple  # variable symbols
    F: tuple  # factor symbols
    A: frozenset  # edges (variable, factor)
    Psi: dict  # factor -> log-potential TargetExpr


# ---------------------------------------------------------------------------
# score and its inverse

_CONSTRUCTOR_FAMILIES = frozenset(DENSITY_PRIM_OF_FAMILY) | {"flip"}


def _density_prim(family):
    return DENSITY_PRIM_OF_FAMILY["bernoulli" if family == "flip" else family]


def _materialize_param(p):
    return Constant(list(p) if isinstance(p, tuple) else p)


def score(E, v):
    """Rewrite a distribution-valued expression into a log-density call
    on the vertex symbol v. Returns None when E cannot denote a
    distribution.
    """
    var = Variable(v)
    match E:
        case If(pred=p, conseq=c, alt=a, pos=pos):
            f1, f2 = score(c, v), score(a, v)
            if f1 is None or f2 is None:
                return None
            return If(p, f1, f2, pos=pos)
        case AppPrim(prim=f, args=args, pos=pos) if f in _CONSTRUCTOR_FAMILIES:
            return AppPrim(_density_prim(f), (var,) + tuple(args), pos=pos)
        case Constant(value=d) if isinstance(d, dist.Dist):
            params = tuple(_materialize_param(p) for p in d.params)
            return AppPrim(_density_prim(d.family), (var,) + params, pos=E.pos)
        case AppPrim(prim="get", args=(base, idx), pos=pos) if not isinstance(
            idx, Constant
        ):
            # a distribution selected by a random index: unfold the
            # selection into a comparison tree so each element scores
            entries = _vector_entries(base)
            if not entries:
                return None
            scored = [score(el, v) for el in entries]
            if any(s is None for s in scored):
                return None
            out = scored[-1]
            for k in reversed(range(len(scored) - 1)):
                out = If(AppPrim("=", (idx, Constant(k))), scored[k], out, pos=pos)
            return out
    return None


def unscore(F, v):
    """Invert score: recover a distribution-valued expression from a
    log-density expression on vertex v."""
    match F:
        case If(pred=p, conseq=c, alt=a, pos=pos):
            return If(p, unscore(c, v), unscore(a, v), pos=pos)
        case AppPrim(prim=f, args=args, pos=pos) if f in FAMILY_OF_DENSITY_PRIM:
            head = args[0]
            if not (isinstance(head, Variable) and head.name == v):
                raise GraphCompileError(
                    f"density for {v} does not score {v} in head position"
                )
            return AppPrim(FAMILY_OF_DENSITY_PRIM[f], tuple(args[1:]), pos=pos)
    raise GraphCompileError(f"cannot invert the density expression for {v}")


# ---------------------------------------------------------------------------
# Translation


class _Builder:
    def __init__(self):
        self.V = []
        self.P = {}
        self.Y = {}
        self.n_sample = 0
        self.n_observe = 0

    def _name(self, kind, pos):
        if kind == "sample":
            self.n_sample += 1
            base = f"x{self.n_sample}"
        else:
            self.n_observe += 1
            base = f"y{self.n_observe}"
        if pos is not None:
            base = f"{base}@L{pos[0]}"
        return Symbol(base)

    def add_sample(self, density_for, pos):
        v = self._name("sample", pos)
        F = density_for(v)
        if F is None:
            raise GraphCompileError(
                "sample argument is not a distribution-valued expression", pos
            )
        self.V.append(v)
        self.P[v] = partial_eval(F)
        return v

    def add_observe(self, density_for, value, guard, pos):
        v = self._name("observe", pos)
        F = density_for(v)
        if F is None:
            raise GraphCompileError(
                "observe argument is not a distribution-valued expression", pos
            )
        self.V.append(v)
        self.P[v] = partial_eval(F)
        self.Y[v] = (value, partial_eval(guard))
        return v

    def finalize(self):
        arcs = set()
        vset = set(self.V)
        for v in self.V:
            for parent in free_vars(self.P[v]) - {v}:
                if parent not in vset:
                    raise GraphCompileError(
                        f"density for {v} mentions unknown variable {parent}"
                    )
                arcs.add((parent, v))
        for y, (value, _guard) in self.Y.items():
            leak = free_vars(value) & vset
            if leak:
                raise GraphCompileError(
                    f"observed value for {y} depends on random variables {sorted(leak)}"
                )
        for parent, _child in arcs:
            if parent in self.Y:
                raise GraphCompileError(f"observed vertex {parent} has children")
        return Graph(V=tuple(self.V), A=frozenset(arcs), P=dict(self.P), Y=dict(self.Y))


_TRUE = Constant(True)


def _conj(a, b):
    if isinstance(a, Constant) and a.value is True:
        return b
    if isinstance(b, Constant) and b.value is True:
        return a
    return AppPrim("and", (a, b))


def _neg(a):
    return AppPrim("not", (a,))


def _translate(e, defs, phi, bld):
    match e:
        case Constant() | Variable():
            return e
        case Let(var=v, bound=b, body=body):
            E1 = _translate(b, defs, phi, bld)
            return _translate(substitute(body, {v: E1}), defs, phi, bld)
        case If(pred=p, conseq=c, alt=a, pos=pos):
            E1 = _translate(p, defs, phi, bld)
            E2 = _translate(c, defs, _conj(phi, E1), bld)
            E3 = _translate(a, defs, _conj(phi, _neg(E1)), bld)
            return partial_eval(If(E1, E2, E3, pos=pos))
        case Sample(dist=d, pos=pos):
            E = _translate(d, defs, phi, bld)
            v = bld.add_sample(lambda name: score(E, name), pos)
            return Variable(v)
        case Observe(dist=d, value=val, pos=pos):
            E1 = _translate(d, defs, phi, bld)
            E2 = _translate(val, defs, phi, bld)
            bld.add_observe(lambda name: score(E1, name), E2, phi, pos)
            return E2
        case AppPrim(prim=f, args=args, pos=pos):
            targs = tuple(_translate(a, defs, phi, bld) for a in args)
            return partial_eval(AppPrim(f, targs, pos=pos))
        case AppUser(proc=f, args=args, pos=pos):
            targs = [_translate(a, defs, phi, bld) for a in args]
            if f not in defs:
                raise GraphCompileError(f"unknown procedure {f}", pos)
            params, body = defs[f]
            inlined = substitute(body, dict(zip(params, targs)))
            return _translate(inlined, defs, phi, bld)
    raise GraphCompileError(f"form not part of the first-order language: {e!r}")


def compile_graph(program: Program):
    """Compile a core first-order program to (Graph, result expression)."""
    if program.lang != "foppl":
        raise GraphCompileError("graph compilation requires a first-order program")
    bld = _Builder()
    result = _translate(program.body, program.def_map(), _TRUE, bld)
    return bld.finalize(), partial_eval(result)


def compile_factor(program: Program) -> Graph:
    """Compile a program that conditions through factor forms.

    factor desugars to observe on a unit point mass carrying the log
    potential, so this is graph compilation with the result dropped:
    each factor becomes an observed vertex whose log potential is
    guarded by its branch condition.
    """
    g, _ = compile_graph(program)
    return g


# ---------------------------------------------------------------------------
# Factor-graph source transform

_DATA_CTORS = frozenset({"vector", "hash-map"})


def _wrap(e):
    return Sample(AppPrim("dirac", (e,), pos=e.pos), pos=e.pos)


def _t(e):
    """Pull deterministic work out into point-mass sample vertices."""
    match e:
        case Constant() | Variable():
            return e
        case Let(var=v, bound=b, body=body, pos=pos):
            return Let(v, _t(b), _t(body), pos=pos)
        case If(pred=p, conseq=c, alt=a, pos=pos):
            return _wrap(If(_t(p), _t(c), _t(a), pos=pos))
        case AppPrim(prim=f, args=args, pos=pos) if f in _DATA_CTORS:
            return AppPrim(f, tuple(_t(a) for a in args), pos=pos)
        case AppPrim(prim=f, args=args, pos=pos):
            return _wrap(AppPrim(f, tuple(_t(a) for a in args), pos=pos))
        case AppUser(proc=f, args=args, pos=pos):
            return AppUser(f, tuple(_t(a) for a in args), pos=pos)
        case Sample(dist=d, pos=pos):
            return Sample(_t_dist(d), pos=pos)
        case Observe(dist=d, value=v, pos=pos):
            return Observe(_t_dist(d), _t(v), pos=pos)
    raise GraphCompileError(f"form not part of the first-order language: {e!r}")


def _t_dist(e):
    # an expression standing in distribution position keeps its own
    # head unwrapped so the result still scores
    match e:
        case If(pred=p, conseq=c, alt=a, pos=pos):
            return If(_t(p), _t_dist(c), _t_dist(a), pos=pos)
        case Let(var=v, bound=b, body=body, pos=pos):
            return Let(v, _t(b), _t_dist(body), pos=pos)
        case AppPrim(prim="dirac", args=(arg,), pos=pos):
            return AppPrim("dirac", (_t_top(arg),), pos=pos)
        case AppPrim(prim=f, args=args, pos=pos):
            return AppPrim(f, tuple(_t(a) for a in args), pos=pos)
    return _t(e)


def _t_top(e):
    # like _t but without wrapping the root, for expressions already
    # sitting under an explicit point mass
    match e:
        case AppPrim(prim=f, args=args, pos=pos):
            return AppPrim(f, tuple(_t(a) for a in args), pos=pos)
        case If(pred=p, conseq=c, alt=a, pos=pos):
            return If(_t(p), _t(c), _t(a), pos=pos)
    return _t(e)


def transform_factor_source(program: Program) -> Program:
    """The source-to-source step behind compile_factor_graph."""
    defs = tuple((name, params, _t(body)) for name, params, body in program.defs)
    return Program(defs=defs, body=_t(program.body), lang=program.lang)


def _psi_of(g: Graph, v):
    if v in g.Y:
        value, _guard = g.Y[v]
        return partial_eval(substitute(g.P[v], {v: value}))
    return g.P[v]


def compile_factor_graph(program: Program) -> FactorGraph:
    """Compile to a bipartite factor graph over the latent variables."""
    g, _result = compile_graph(transform_factor_source(program))
    variables = list(g.latents())
    factors = []
    psi = {}
    for i, v in enumerate(g.V, start=1):
        f = Symbol(f"f{i}")
        factors.append(f)
        psi[f] = _psi_of(g, v)

    # eliminate point-mass factors that pin a variable to a constant or
    # alias one variable to another
    changed = True
    while changed:
        changed = False
        for f in list(factors):
            match psi[f]:
                case AppPrim(prim="p_dirac", args=(Variable(name=a), Constant() as c)):
                    if a in variables:
                        _substitute_out(factors, psi, variables, f, a, c)
                        changed = True
                        break
                case AppPrim(prim="p_dirac", args=(Constant() as c, Variable(name=a))):
                    if a in variables:
                        _substitute_out(factors, psi, variables, f, a, c)
                        changed = True
                        break
                case AppPrim(
                    prim="p_dirac", args=(Variable(name=a), Variable(name=b))
                ):
                    if a in variables and b in variables:
                        _substitute_out(factors, psi, variables, f, a, Variable(b))
                        changed = True
                        break

    edges = set()
    var_set = set(variables)
    for f in factors:
        for x in free_vars(psi[f]) & var_set:
            edges.add((x, f))
    return FactorGraph(
        X=tuple(variables),
        F=tuple(factors),
        A=frozenset(edges),
        Psi={f: psi[f] for f in factors},
    )


def _substitute_out(factors, psi, variables, f, var, replacement):
    factors.remove(f)
    del psi[f]
    variables.remove(var)
    for g_name in factors:
        psi[g_name] = partial_eval(substitute(psi[g_name], {var: replacement}))


# ---------------------------------------------------------------------------
# JSON view (used by the CLI golden output)


def graph_to_json(g: Graph, result=None):
    from .frontend import print_expr

    doc = {
        "V": [str(v) for v in g.V],
        "A": sorted([str(p), str(c)] for p, c in g.A),
        "P": {str(v): print_expr(g.P[v]) for v in g.V},
        "Y": {
            str(v): {"value": print_expr(val), "guard": print_expr(guard)}
            for v, (val, guard) in g.Y.items()
        },
    }
    if result is not None:
        doc["result"] = print_expr(result)
    return doc
