"""Compiling first-order programs into graphical models.

Shape assertions below (vertex and arc counts) follow from the models
by hand: one vertex per sample and observe, one arc per direct
dependence that survives constant folding.
"""

import json
import math

import pytest

from pplkit.distributions import make, make_rng
from pplkit.frontend import parse, desugar_foppl, desugar_hoppl, print_expr
from pplkit.graph_compiler import (
    Graph,
    GraphCompileError,
    compile_factor_graph,
    compile_graph,
    graph_to_json,
    score,
    unscore,
)
from pplkit.target_eval import AppPrim, Constant, If, Variable, eval_det
from pplkit.values import Symbol


def graph_of(text):
    return compile_graph(desugar_foppl(parse(text)))


def load(name):
    from pathlib import Path

    return (Path(__file__).parent.parent / "programs" / name).read_text()


# ---------------------------------------------------------------------------
# score / unscore


def test_score_constructor_call():
    e = AppPrim("normal", (Constant(0.0), Constant(1.0)))
    f = score(e, Symbol("x"))
    assert f == AppPrim(
        "p_norm", (Variable(Symbol("x")), Constant(0.0), Constant(1.0))
    )


def test_score_if_scores_both_branches():
    e = If(
        Variable(Symbol("c")),
        AppPrim("normal", (Constant(0.0), Constant(1.0))),
        AppPrim("bernoulli", (Constant(0.5),)),
    )
    f = score(e, Symbol("x"))
    assert isinstance(f, If)
    assert f.conseq.prim == "p_norm"
    assert f.alt.prim == "p_bern"


def test_score_distribution_constant():
    e = Constant(make("normal", 1.0, 2.0))
    f = score(e, Symbol("x"))
    assert f.prim == "p_norm"
    assert eval_det(f, {Symbol("x"): 1.0}) == pytest.approx(
        -0.5 * math.log(2 * math.pi * 4), abs=1e-12
    )


def test_score_non_distribution_is_none():
    assert score(Constant(5), Symbol("x")) is None


def test_score_random_index_unfolds_selection():
    e = AppPrim(
        "get",
        (
            AppPrim(
                "vector",
                (
                    AppPrim("normal", (Constant(-1.0), Constant(1.0))),
                    AppPrim("normal", (Constant(1.0), Constant(1.0))),
                ),
            ),
            Variable(Symbol("z")),
        ),
    )
    f = score(e, Symbol("x"))
    assert isinstance(f, If)
    got = eval_det(f, {Symbol("z"): 1, Symbol("x"): 1.0})
    want = eval_det(score(AppPrim("normal", (Constant(1.0), Constant(1.0))), Symbol("x")), {Symbol("x"): 1.0})
    assert got == want


def test_unscore_inverts_score():
    e = AppPrim("normal", (Constant(0.0), Constant(1.0)))
    f = score(e, Symbol("x"))
    assert unscore(f, Symbol("x")) == e


def test_unscore_rejects_foreign_density():
    f = AppPrim("p_norm", (Variable(Symbol("other")), Constant(0.0), Constant(1.0)))
    with pytest.raises(GraphCompileError):
        unscore(f, Symbol("x"))


# ---------------------------------------------------------------------------
# Whole programs


def test_beta_bernoulli_graph():
    g, result = graph_of(load("beta_bernoulli.foppl"))
    assert len(g.latents()) == 1
    assert len(g.observed()) == 1
    (x,) = g.latents()
    (y,) = g.observed()
    assert g.A == frozenset({(x, y)})
    value, guard = g.Y[y]
    assert eval_det(value, {}) == 1
    assert eval_det(guard, {}) is True
    # the observed density reads the latent
    assert eval_det(g.P[y], {x: 0.25, y: 1}) == pytest.approx(math.log(0.25))
    assert result == Variable(x)


def test_observing_requires_a_distribution():
    with pytest.raises(GraphCompileError):
        graph_of("(observe 5 1)")


def test_vertices_are_in_creation_order():
    g, _ = graph_of(load("mixture.foppl"))
    assert [str(v)[0] for v in g.V] == ["x", "x", "x", "y"]


def test_vertex_names_carry_source_lines():
    g, _ = graph_of("(let [x (sample (normal 0 1))]\n  (observe (normal x 1) 2))")
    names = sorted(str(v) for v in g.V)
    assert names[0].startswith("x1@L1")
    assert names[1].startswith("y1@L2")


def test_linreg_graph_shape():
    g, result = graph_of(load("linreg.foppl"))
    assert len(g.latents()) == 2
    assert len(g.observed()) == 5
    # each observation depends on both slope and intercept
    assert len(g.A) == 10
    slope, intercept = g.latents()
    assert eval_det(result, {slope: 2.0, intercept: -0.5}) == [2.0, -0.5]


def test_hmm_graph_shape():
    # 1 initial + 16 transition draws, 16 emissions, and after constant
    # folding only chain arcs plus emission arcs remain
    g, _ = graph_of(load("hmm.foppl"))
    assert len(g.latents()) == 17
    assert len(g.observed()) == 16
    assert len(g.A) == 32


def test_hmm_chain_is_first_order():
    g, _ = graph_of(load("hmm.foppl"))
    latents = list(g.latents())
    for v in latents:
        parents = {p for p, c in g.A if c == v}
        assert len(parents) <= 1


def test_gmm_graph_shape():
    g, _ = graph_of(load("gmm.foppl"))
    assert len(g.latents()) == 14
    assert len(g.observed()) == 7
    # each of the 7 points: z reads pi, y reads z and all 6 component
    # parameters
    assert len(g.A) == 56


def test_branchy_observes_carry_guards():
    g, _ = graph_of(load("mixture_if_observe.foppl"))
    guards = [g.Y[v][1] for v in g.observed()]
    z = next(v for v in g.latents() if str(v).startswith("x1"))
    on_z = [gd for gd in guards if Symbol(str(z)) in _vars_of(gd)]
    assert len(on_z) == 2


def _vars_of(e):
    from pplkit.target_eval import free_vars

    return free_vars(e)


def test_unguarded_observe_guard_is_trivially_true():
    g, _ = graph_of(load("beta_bernoulli.foppl"))
    (y,) = g.observed()
    assert eval_det(g.Y[y][1], {}) is True


def test_compile_rejects_higher_order_input():
    p = desugar_hoppl(parse("(sample (normal 0 1))"))
    with pytest.raises(GraphCompileError):
        compile_graph(p)


def test_random_choice_in_distribution_position():
    # scoring a vector lookup with a random index keeps one vertex
    g, _ = graph_of(
        "(let [z (sample (discrete [0.5 0.5]))"
        "      d [(normal -1.0 1.0) (normal 1.0 1.0)]]"
        "  (observe (get d z) 0.5))"
    )
    assert len(g.latents()) == 1
    assert len(g.observed()) == 1


# ---------------------------------------------------------------------------
# JSON rendering


def test_graph_to_json_schema():
    g, result = graph_of(load("beta_bernoulli.foppl"))
    doc = graph_to_json(g, result)
    json.dumps(doc)
    assert set(doc) == {"V", "A", "P", "Y", "result"}
    assert all(isinstance(v, str) for v in doc["V"])
    assert all(len(a) == 2 for a in doc["A"])
    assert set(doc["P"]) == set(doc["V"])
    for y, entry in doc["Y"].items():
        assert set(entry) == {"value", "guard"}


def test_graph_json_round_trips_expressions_textually():
    g, result = graph_of(load("beta_bernoulli.foppl"))
    doc = graph_to_json(g, result)
    x = doc["V"][0]
    assert doc["P"][x] == f"(p_beta {x} 1.0 1.0)"


# ---------------------------------------------------------------------------
# Factor graphs


def test_factor_graph_for_hard_comparison_model():
    fg = compile_factor_graph(desugar_foppl(parse(load("trueskill.foppl"))))
    # two skills and their difference survive; the comparison and the
    # observation collapse into a single truncation factor
    assert len(fg.X) == 3
    assert len(fg.F) == 4
    for f in fg.F:
        assert f in fg.Psi
    # bipartite edges only touch declared variables
    for x, f in fg.A:
        assert x in fg.X and f in fg.F


def test_factor_graph_eliminates_pinned_aliases():
    fg = compile_factor_graph(
        desugar_foppl(parse("(let [a (sample (normal 0 1)) b (+ a 0)] (observe (dirac b) 1.0) a)"))
    )
    # b is an alias of a, pinned by the observation: one variable is
    # enough
    assert len(fg.X) <= 2


def test_factor_graph_potentials_render():
    fg = compile_factor_graph(desugar_foppl(parse(load("trueskill.foppl"))))
    texts = sorted(print_expr(fg.Psi[f]) for f in fg.F)
    assert any("p_norm" in t for t in texts)
    assert any("p_dirac" in t for t in texts)
