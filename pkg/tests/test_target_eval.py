"""The deterministic target language: primitives, evaluation, rewriting."""

import math

import pytest

from pplkit.distributions import log_prob, make
from pplkit.frontend import parse, desugar_foppl
from pplkit.target_eval import (
    AppPrim,
    CONSTRUCTOR_OF_DENSITY_PRIM,
    Constant,
    DENSITY_PRIM_OF_FAMILY,
    EvalError,
    If,
    Let,
    PRIM_ENV,
    PRIM_NAMES,
    Variable,
    apply_prim,
    eval_det,
    free_vars,
    partial_eval,
    print_expr,
    substitute,
    truthy,
)
from pplkit.values import Symbol, nil


def expr_of(text):
    return desugar_foppl(parse(text)).body


# ---------------------------------------------------------------------------
# Primitives


def test_arithmetic():
    assert apply_prim("+", [1, 2]) == 3
    assert apply_prim("-", [1]) == -1
    assert apply_prim("*", [2.0, 3]) == 6.0
    assert apply_prim("/", [1, 4]) == 0.25


def test_division_by_zero_is_an_eval_error():
    with pytest.raises(EvalError):
        apply_prim("/", [1, 0])


def test_comparisons():
    assert apply_prim("<", [1, 2]) is True
    assert apply_prim(">=", [2, 2]) is True
    assert apply_prim("=", [1, 1.0]) is True
    assert apply_prim("=", [True, 1]) is False


def test_logic_and_truthiness():
    # only nil and false count as false
    assert truthy(0) and truthy("") and truthy([])
    assert not truthy(nil) and not truthy(False)
    assert apply_prim("not", [0]) is False
    assert apply_prim("and", [True, False]) is False
    assert apply_prim("or", [False, True]) is True


def test_vector_ops():
    v = [10, 20, 30]
    assert apply_prim("first", [v]) == 10
    assert apply_prim("second", [v]) == 20
    assert apply_prim("last", [v]) == 30
    assert apply_prim("rest", [v]) == [20, 30]
    assert apply_prim("nth", [v, 2]) == 30
    assert apply_prim("get", [v, 0]) == 10
    assert apply_prim("put", [v, 1, 9]) == [10, 9, 30]
    assert apply_prim("append", [v, 4]) == [10, 20, 30, 4]
    assert apply_prim("conj", [v, 4]) == [10, 20, 30, 4]
    assert apply_prim("prepend", [v, 4]) == [4, 10, 20, 30]
    assert apply_prim("count", [v]) == 3
    assert apply_prim("empty?", [[]]) is True
    assert apply_prim("range", [1, 4]) == [1, 2, 3]


def test_put_is_persistent():
    v = [1, 2]
    assert apply_prim("put", [v, 0, 9]) == [9, 2]
    assert v == [1, 2]


def test_vector_index_errors():
    with pytest.raises(EvalError):
        apply_prim("get", [[1, 2], 5])
    with pytest.raises(EvalError):
        apply_prim("first", [[]])


def test_hash_map_ops():
    m = {1: "a"}
    assert apply_prim("get", [m, 1]) == "a"
    assert apply_prim("put", [m, 2, "b"]) == {1: "a", 2: "b"}
    assert apply_prim("remove", [{1: 2, 3: 4}, 1]) == {3: 4}
    with pytest.raises(EvalError):
        apply_prim("get", [m, 99])


def test_matrix_ops():
    a = [[1, 2], [3, 4]]
    assert apply_prim("mat-mul", [a, [[1], [1]]]) == [[3.0], [7.0]]
    assert apply_prim("mat-transpose", [a]) == [[1.0, 3.0], [2.0, 4.0]]
    assert apply_prim("mat-add", [[[1]], [[2]]]) == [[3.0]]
    assert apply_prim("mat-repmat", [[[1]], 2, 2]) == [[1.0, 1.0], [1.0, 1.0]]
    assert apply_prim("mat-tanh", [[[0.0]]]) == [[0.0]]


def test_constructor_prims_build_distributions():
    d = apply_prim("normal", [0.0, 1.0])
    assert d == make("normal", 0.0, 1.0)
    assert apply_prim("flip", [0.5]) == make("flip", 0.5)


def test_density_prims_match_log_prob():
    cases = [
        ("p_norm", make("normal", 1.0, 2.0), 0.5),
        ("p_bern", make("bernoulli", 0.3), 1),
        ("p_flip", make("flip", 0.3), True),
        ("p_beta", make("beta", 2.0, 2.0), 0.5),
        ("p_gamma", make("gamma", 2.0, 1.0), 1.5),
        ("p_disc", make("discrete", [0.5, 0.5]), 0),
    ]
    for prim, d, x in cases:
        assert apply_prim(prim, [x, *d.params]) == pytest.approx(
            log_prob(d, x), abs=1e-12
        )


def test_density_prim_table_is_consistent():
    for family, prim in DENSITY_PRIM_OF_FAMILY.items():
        assert prim in PRIM_ENV
        assert CONSTRUCTOR_OF_DENSITY_PRIM[prim] == family
    assert not (PRIM_NAMES - PRIM_ENV.keys())


def test_case_error_prim_raises():
    with pytest.raises(EvalError):
        apply_prim("case-error", [5])


def test_push_addr_prim_joins():
    assert apply_prim("push-addr", ["a", "b"]) == "a/b"


def test_arity_mismatch():
    with pytest.raises(EvalError):
        apply_prim("+", [])
    with pytest.raises(EvalError):
        apply_prim("first", [[1], [2]])


# ---------------------------------------------------------------------------
# eval_det


def test_eval_det_full_expression():
    e = expr_of("(let [a 3 b (* a a)] (if (> b 5) (+ b 1) 0))")
    assert eval_det(e, {}) == 10


def test_eval_det_reads_environment():
    e = AppPrim("+", (Variable(Symbol("x")), Constant(1)))
    assert eval_det(e, {Symbol("x"): 4}) == 5


def test_eval_det_unbound_symbol():
    with pytest.raises(EvalError):
        eval_det(Variable(Symbol("nope")), {})


def test_eval_det_if_is_lazy():
    e = expr_of("(if true 1 (/ 1 0))")
    assert eval_det(e, {}) == 1


# ---------------------------------------------------------------------------
# Rewriting


def test_free_vars():
    e = expr_of("(let [a 1] (+ a 1))")
    assert free_vars(e) == set()
    e2 = AppPrim("+", (Variable(Symbol("x")), Variable(Symbol("y"))))
    assert free_vars(e2) == {Symbol("x"), Symbol("y")}


def test_free_vars_respects_let_scope():
    # the binding expression is outside the body scope
    e = Let(Symbol("x"), Variable(Symbol("x")), Variable(Symbol("x")))
    assert free_vars(e) == {Symbol("x")}


def test_substitute():
    e = AppPrim("+", (Variable(Symbol("x")), Variable(Symbol("y"))))
    out = substitute(e, {Symbol("x"): Constant(5)})
    assert eval_det(out, {Symbol("y"): 1}) == 6


def test_substitute_respects_shadowing():
    e = Let(Symbol("x"), Constant(1), Variable(Symbol("x")))
    out = substitute(e, {Symbol("x"): Constant(99)})
    assert eval_det(out, {}) == 1


def test_partial_eval_folds_constants():
    e = expr_of("(+ 1 (* 2 3))")
    assert partial_eval(e) == Constant(7)


def test_partial_eval_prunes_known_branches():
    e = If(Constant(True), Variable(Symbol("a")), Variable(Symbol("b")))
    assert partial_eval(e) == Variable(Symbol("a"))


def test_partial_eval_resolves_vector_get():
    # indexing a known vector with a known index drops the other slots
    e = expr_of("(get [10 20 30] 1)")
    assert partial_eval(e) == Constant(20)


def test_partial_eval_keeps_unknowns():
    x = Variable(Symbol("x"))
    e = AppPrim("+", (Constant(0), x))
    out = partial_eval(e)
    assert free_vars(out) == {Symbol("x")}


def test_partial_eval_narrows_get_over_unknown_index():
    # only the selected element's variables should remain free
    text = "(get [x y] i)"
    e = AppPrim(
        "get",
        (
            AppPrim("vector", (Variable(Symbol("x")), Variable(Symbol("y")))),
            Variable(Symbol("i")),
        ),
    )
    out = partial_eval(substitute(e, {Symbol("i"): Constant(0)}))
    assert free_vars(out) == {Symbol("x")}


def test_partial_eval_leaves_errors_to_runtime():
    # folding must not turn a latent error into a compile failure
    e = expr_of("(if false (/ 1 0) 2)")
    assert partial_eval(e) == Constant(2)


def test_print_expr_renders_core_forms():
    e = expr_of("(let [a 1] (if (> a 0) [a] nil))")
    s = print_expr(e)
    assert "let" in s or "(" in s
    assert "nil" in s
