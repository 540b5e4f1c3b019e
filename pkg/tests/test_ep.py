"""Gaussian expectation propagation on compiled factor graphs.

EP with Gaussian messages is exact on purely linear-Gaussian models,
so those cases pin closed-form answers tightly. The skill-comparison
model adds one truncation factor; its fixed point is known in closed
form too (the difference variable carries exactly the truncated
moments, and the symmetric skills split them).
"""

import math

import pytest

from pplkit.ep_gaussian import EPError, ep, _truncated_moments
from pplkit.frontend import desugar_foppl, parse
from pplkit.graph_compiler import compile_factor_graph


def fg_of(text):
    return compile_factor_graph(desugar_foppl(parse(text)))


def load(name):
    from pathlib import Path

    return (Path(__file__).parent.parent / "programs" / name).read_text()


# frozen from scipy.stats: moments of N(0, sqrt(2)) truncated to
# (0.1, inf), and norm.logsf(0.1 / sqrt(2))
TRUNC_MEAN = 1.192802371212224
TRUNC_VAR = 0.6965027403517184
TRUNC_LOG_MASS = -0.7511704153289288


# ---------------------------------------------------------------------------
# truncated-Gaussian moment matching


def test_truncated_moments_match_frozen_oracle():
    mean, var, log_mass = _truncated_moments(0.0, math.sqrt(2.0), 0.1, True)
    assert mean == pytest.approx(TRUNC_MEAN, abs=1e-12)
    assert var == pytest.approx(TRUNC_VAR, abs=1e-12)
    assert log_mass == pytest.approx(TRUNC_LOG_MASS, abs=1e-12)


def test_truncated_moments_lower_tail_mirror():
    # keeping the lower tail of N(0, s) below -b mirrors keeping the
    # upper tail above b
    up = _truncated_moments(0.0, 2.0, 0.7, True)
    lo = _truncated_moments(0.0, 2.0, -0.7, False)
    assert lo[0] == pytest.approx(-up[0], abs=1e-12)
    assert lo[1] == pytest.approx(up[1], abs=1e-12)
    assert lo[2] == pytest.approx(up[2], abs=1e-12)


def test_truncated_moments_shift_and_scale():
    # affine change of variables: x ~ N(mu, sd) above bound equals
    # mu + sd * (z above (bound - mu) / sd)
    m0, v0, lm0 = _truncated_moments(0.0, 1.0, 0.5, True)
    m1, v1, lm1 = _truncated_moments(3.0, 2.0, 4.0, True)
    assert m1 == pytest.approx(3.0 + 2.0 * m0, rel=1e-12)
    assert v1 == pytest.approx(4.0 * v0, rel=1e-12)
    assert lm1 == pytest.approx(lm0, abs=1e-12)


def test_truncated_moments_deep_tail():
    # far past the mean the code switches to an asymptotic expansion:
    # the log mass stays exact while mean and variance trade a little
    # bias for stability (the direct formula cancels to noise there)
    from scipy import stats

    for alpha in (9.0, 12.0):
        mean, var, log_mass = _truncated_moments(0.0, 1.0, alpha, True)
        ref_m, ref_v = stats.truncnorm.stats(alpha, math.inf, moments="mv")
        assert log_mass == pytest.approx(float(stats.norm.logsf(alpha)), abs=1e-12)
        assert mean == pytest.approx(float(ref_m), rel=1e-3)
        assert var == pytest.approx(float(ref_v), rel=0.1)
        assert math.isfinite(var) and var > 0.0


# ---------------------------------------------------------------------------
# exact cases: linear-Gaussian models


def test_single_site_conjugate_pair_is_exact():
    # x ~ N(0,1), y = 2 ~ N(x,1): evidence is the prior predictive
    # N(2; 0, sqrt(2)), posterior is N(1, 1/2)
    fg = fg_of("(let [x (sample (normal 0 1))] (observe (normal x 1) 2) x)")
    r = ep(fg)
    ((mean, var),) = r.marginals.values()
    assert mean == pytest.approx(1.0, abs=1e-12)
    assert var == pytest.approx(0.5, abs=1e-12)
    assert r.logZ == pytest.approx(-0.5 * math.log(4.0 * math.pi) - 1.0, abs=1e-12)
    assert r.skipped_updates == 0


def test_two_stage_chain_is_exact():
    # x ~ N(0,1), z ~ N(x,1), y = 1.5 ~ N(z,1). Marginally y ~ N(0,3),
    # and the posterior means scale the datum by cov(.,y)/3.
    fg = fg_of(
        "(let [x (sample (normal 0 1)) z (sample (normal x 1))]"
        " (observe (normal z 1) 1.5) [x z])"
    )
    r = ep(fg)
    x, z = fg.X
    assert r.marginals[x][0] == pytest.approx(0.5, abs=1e-10)
    assert r.marginals[z][0] == pytest.approx(1.0, abs=1e-10)
    assert r.marginals[x][1] == pytest.approx(2.0 / 3.0, abs=1e-10)
    assert r.marginals[z][1] == pytest.approx(2.0 / 3.0, abs=1e-10)
    exact = -0.5 * math.log(2.0 * math.pi * 3.0) - 1.5**2 / 6.0
    assert r.logZ == pytest.approx(exact, abs=1e-12)
    assert r.skipped_updates == 0


def test_result_records_sweeps():
    fg = fg_of("(let [x (sample (normal 0 1))] (observe (normal x 1) 2) x)")
    assert ep(fg, sweeps=3).sweeps == 3


# ---------------------------------------------------------------------------
# skill comparison: priors, a difference, and one truncation


def test_skill_model_fixed_point():
    fg = compile_factor_graph(desugar_foppl(parse(load("trueskill.foppl"))))
    r = ep(fg)
    s1, s2, delta = fg.X

    # the difference carries the truncated-Gaussian moments exactly
    assert r.marginals[delta][0] == pytest.approx(TRUNC_MEAN, abs=1e-9)
    assert r.marginals[delta][1] == pytest.approx(TRUNC_VAR, abs=1e-9)

    # skills split the difference symmetrically: s1 = (sum + delta)/2
    # with sum ~ N(0, 2) independent of the truncation
    assert r.marginals[s1][0] == pytest.approx(TRUNC_MEAN / 2.0, abs=1e-9)
    assert r.marginals[s2][0] == pytest.approx(-TRUNC_MEAN / 2.0, abs=1e-9)
    assert r.marginals[s1][1] == pytest.approx((TRUNC_VAR + 2.0) / 4.0, abs=1e-9)
    assert r.marginals[s2][1] == pytest.approx((TRUNC_VAR + 2.0) / 4.0, abs=1e-9)

    # evidence is the mass of the kept region
    assert r.logZ == pytest.approx(TRUNC_LOG_MASS, abs=1e-9)
    assert r.skipped_updates == 0


def test_skill_model_insensitive_to_damping():
    fg = compile_factor_graph(desugar_foppl(parse(load("trueskill.foppl"))))
    light = ep(fg, sweeps=60, damping=0.5)
    full = ep(fg, sweeps=60, damping=1.0)
    assert light.logZ == pytest.approx(full.logZ, abs=1e-8)
    for x in fg.X:
        assert light.marginals[x][0] == pytest.approx(full.marginals[x][0], abs=1e-8)
        assert light.marginals[x][1] == pytest.approx(full.marginals[x][1], abs=1e-8)


# ---------------------------------------------------------------------------
# rejection paths


def test_non_gaussian_potential_is_rejected():
    fg = fg_of("(let [x (sample (gamma 1 1))] (observe (normal x 1) 2) x)")
    with pytest.raises(EPError, match="unsupported potential"):
        ep(fg)


@pytest.mark.parametrize("damping", [0.0, -0.5, 1.2])
def test_damping_must_be_in_unit_interval(damping):
    fg = fg_of("(let [x (sample (normal 0 1))] (observe (normal x 1) 2) x)")
    with pytest.raises(EPError, match="damping"):
        ep(fg, damping=damping)
