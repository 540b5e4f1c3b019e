"""Inference on compiled graphs: Gibbs and Hamiltonian dynamics.

Posterior checks use conjugate models with known answers:
  - normal prior + normal likelihood (observe 2 under unit noise from a
    unit-normal latent) has posterior N(1, 1/2)
  - uniform beta prior + one success has posterior Beta(2, 1), mean 2/3
"""

import math
from pathlib import Path

import numpy as np
import pytest

from pplkit.distributions import make_rng
from pplkit.frontend import parse, desugar_foppl
from pplkit.graph_compiler import compile_graph
from pplkit.graph_inference import (
    InferenceError,
    Trace,
    ancestral_sample,
    default_proposals,
    gaussian_rw_proposals,
    gibbs,
    hmc,
    hmc_applicable,
    initial_trace,
    log_joint,
    observed_values,
    potential_expr,
    topological_order,
)
from pplkit.target_eval import eval_det
from pplkit.values import Symbol

PROGRAMS = Path(__file__).parent.parent / "programs"


def graph_of(name):
    return compile_graph(desugar_foppl(parse((PROGRAMS / name).read_text())))


# ---------------------------------------------------------------------------
# Graph utilities


def test_topological_order_respects_arcs():
    g, _ = graph_of("hmm.foppl")
    order = topological_order(g)
    pos = {v: i for i, v in enumerate(order)}
    assert set(order) == set(g.V)
    for parent, child in g.A:
        assert pos[parent] < pos[child]


def test_ancestral_sample_covers_latents():
    g, _ = graph_of("mixture.foppl")
    rng = make_rng(0)
    t, log_lik = ancestral_sample(g, rng)
    assert set(t.X) == set(g.latents())
    assert math.isfinite(log_lik)
    assert math.isfinite(log_joint(g, {**observed_values(g), **t.X}))


def test_observed_values_evaluate_the_observation_expressions():
    g, _ = graph_of("beta_bernoulli.foppl")
    vals = observed_values(g)
    (y,) = g.observed()
    assert vals[y] == 1


def test_log_joint_sums_vertex_densities():
    g, _ = graph_of("conjugate_gaussian.foppl")
    (x,) = g.latents()
    (y,) = g.observed()
    total = log_joint(g, {x: 0.7, y: 2.0})
    norm = lambda v, m, s: -0.5 * ((v - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)
    assert total == pytest.approx(norm(0.7, 0, 1) + norm(2.0, 0.7, 1), abs=1e-12)


def test_initial_trace_is_finite():
    g, _ = graph_of("gmm.foppl")
    t = initial_trace(g, make_rng(1))
    assert set(t.X) == set(g.latents())
    assert all(math.isfinite(lp) for lp in t.logP.values())


def test_potential_expr_is_negative_log_joint():
    g, _ = graph_of("conjugate_gaussian.foppl")
    (x,) = g.latents()
    e = potential_expr(g)
    u = eval_det(e, {x: 0.4})
    assert u == pytest.approx(-log_joint(g, {**observed_values(g), x: 0.4}), abs=1e-10)


def test_proposal_tables_cover_latents():
    g, _ = graph_of("mixture.foppl")
    for q in (default_proposals(g), gaussian_rw_proposals(g, scale=0.5)):
        assert set(q) == set(g.latents())


# ---------------------------------------------------------------------------
# Gibbs


def test_gibbs_beta_bernoulli_posterior_mean():
    g, result = graph_of("beta_bernoulli.foppl")
    rng = make_rng(10)
    x0 = initial_trace(g, rng)
    traces = gibbs(g, default_proposals(g), x0, 4000, rng)
    assert len(traces) == 4000
    vals = [eval_det(result, t.X) for t in traces[500:]]
    assert np.mean(vals) == pytest.approx(2 / 3, abs=0.02)


def test_gibbs_conjugate_gaussian_moments():
    g, result = graph_of("conjugate_gaussian.foppl")
    rng = make_rng(11)
    traces = gibbs(g, default_proposals(g), initial_trace(g, rng), 6000, rng)
    vals = np.array([eval_det(result, t.X) for t in traces[1000:]])
    assert vals.mean() == pytest.approx(1.0, abs=0.05)
    assert vals.var() == pytest.approx(0.5, abs=0.08)


def test_gibbs_mixes_over_discrete_and_continuous():
    g, result = graph_of("mixture.foppl")
    rng = make_rng(12)
    traces = gibbs(g, default_proposals(g), initial_trace(g, rng), 20000, rng)
    zs = [eval_det(result, t.X) for t in traces[2000:]]
    assert np.mean(zs) == pytest.approx(1 / (1 + math.exp(-0.5)), abs=0.03)


def test_gibbs_traces_cache_consistent_log_densities():
    g, _ = graph_of("conjugate_gaussian.foppl")
    rng = make_rng(13)
    traces = gibbs(g, default_proposals(g), initial_trace(g, rng), 50, rng)
    obs = observed_values(g)
    for t in traces[-5:]:
        assert sum(t.logP.values()) == pytest.approx(
            log_joint(g, {**obs, **t.X}), abs=1e-9
        )


# ---------------------------------------------------------------------------
# HMC


def test_hmc_conjugate_gaussian_moments():
    g, result = graph_of("conjugate_gaussian.foppl")
    rng = make_rng(21)
    traces = hmc(g, initial_trace(g, rng), 3000, rng=rng)
    vals = np.array([eval_det(result, t.X) for t in traces[500:]])
    assert vals.mean() == pytest.approx(1.0, abs=0.05)
    assert vals.var() == pytest.approx(0.5, abs=0.08)


def test_hmc_is_deterministic_given_a_seed():
    g, _ = graph_of("conjugate_gaussian.foppl")
    runs = []
    for _ in range(2):
        rng = make_rng(5)
        traces = hmc(g, initial_trace(g, rng), 50, rng=rng)
        runs.append([t.X for t in traces])
    assert runs[0] == runs[1]


def test_hmc_rejects_discrete_latents():
    g, _ = graph_of("mixture.foppl")
    with pytest.raises(InferenceError) as err:
        hmc(g, initial_trace(g, make_rng(0)), 10, rng=make_rng(0))
    assert "discrete" in str(err.value)


def test_hmc_rejects_branching_densities():
    g, _ = graph_of("discontinuous.foppl")
    ok, reason = hmc_applicable(g)
    assert not ok
    assert "branch" in reason
    with pytest.raises(InferenceError):
        hmc(g, Trace(X={v: 0.5 for v in g.latents()}), 10, rng=make_rng(0))


def test_hmc_rejects_branchy_priors():
    g, _ = compile_graph(
        desugar_foppl(
            parse(
                "(let [a (sample (normal 0 1))"
                "      b (sample (normal (if (> a 0) 1.0 -1.0) 1.0))]"
                "  (observe (normal b 1) 0.5) b)"
            )
        )
    )
    ok, reason = hmc_applicable(g)
    assert not ok


def test_hmc_linear_regression_matches_closed_form():
    g, result = graph_of("linreg.foppl")
    rng = make_rng(31)
    traces = hmc(g, initial_trace(g, rng), 3000, rng=rng)
    pairs = np.array([eval_det(result, t.X) for t in traces[500:]])
    # posterior solved from the normal equations with the same prior
    assert pairs[:, 0].mean() == pytest.approx(1.99754546, abs=0.05)
    assert pairs[:, 1].mean() == pytest.approx(-0.15233171, abs=0.08)
