"""Surface syntax: reading s-expressions and lowering the sugar.

Deterministic programs are checked by running them, so every assertion
is about meaning rather than about one particular lowering.
"""

import pytest

from pplkit.frontend import (
    Constant,
    DesugarError,
    Fn,
    FrontendError,
    If,
    Observe,
    ParseError,
    Sample,
    desugar_foppl,
    desugar_hoppl,
    parse,
    print_expr,
)
from pplkit.eval_inference import InferState, eval_foppl
from pplkit.hoppl_runtime import run_direct
from pplkit.values import Symbol, nil


def run_foppl(text):
    """Evaluate a sample/observe-free first-order program."""
    p = desugar_foppl(parse(text))
    defs = {name: (params, body) for name, params, body in p.defs}
    value, _ = eval_foppl(p.body, InferState(), {}, None, defs)
    return value


def run_hoppl(text):
    return run_direct(desugar_hoppl(parse(text)))


# ---------------------------------------------------------------------------
# Reader


def test_parse_rejects_unbalanced():
    with pytest.raises(ParseError):
        parse("(+ 1 2")
    with pytest.raises(ParseError):
        parse("(+ 1 2))")
    with pytest.raises(ParseError):
        parse("")


def test_parse_error_carries_position():
    with pytest.raises(ParseError) as err:
        parse("(let [x 1]\n  (+ x\n)")
    assert "line" in str(err.value)


def test_atoms():
    assert run_foppl("1") == 1
    assert run_foppl("-2.5") == -2.5
    assert run_foppl("true") is True
    assert run_foppl("false") is False
    assert run_foppl("nil") is nil
    assert run_foppl('"a string"') == "a string"


def test_comments_are_skipped():
    assert run_foppl("; leading note\n(+ 1 ; inline\n 2)") == 3


def test_vector_literal():
    assert run_foppl("[1 2 [3]]") == [1, 2, [3]]


def test_hash_map_literal():
    assert run_foppl("(get {1 10 2 20} 2)") == 20


# ---------------------------------------------------------------------------
# Sugar


def test_let_multiple_bindings():
    assert run_foppl("(let [a 2 b (* a 3)] (+ a b))") == 8


def test_let_multiple_body_forms():
    # earlier body forms run for effect only
    assert run_foppl("(let [a 1] (+ a 1) (+ a 2))") == 3


def test_let_shadowing():
    assert run_foppl("(let [x 1] (let [x 2] x))") == 2


def test_if_is_three_armed():
    with pytest.raises(DesugarError):
        desugar_foppl(parse("(if false 1)"))


def test_case_dispatches_on_equality():
    text = "(case %d 1 10 2 20 3 30)"
    assert run_foppl(text % 2) == 20
    assert run_foppl(text % 3) == 30


def test_case_falls_through_to_default():
    assert run_foppl("(case 9 1 10 99)") == 99


def test_case_without_default_raises_at_runtime():
    from pplkit.target_eval import EvalError

    with pytest.raises(EvalError):
        run_foppl("(case 9 1 10)")


def test_foreach_unrolls_and_collects():
    assert run_foppl("(foreach 3 [x [10 20 30]] (* x 2))") == [20, 40, 60]


def test_foreach_without_bindings_uses_index_count():
    assert run_foppl("(foreach 2 [] 7)") == [7, 7]


def test_loop_threads_accumulator():
    text = "(defn step [i acc] (+ acc i)) (loop 4 0 step)"
    assert run_foppl(text) == 6


def test_loop_passes_extra_arguments():
    text = "(defn step [i acc k] (+ acc k)) (loop 3 0 step 10)"
    assert run_foppl(text) == 30


def test_defn_calls():
    assert run_foppl("(defn sq [x] (* x x)) (sq 7)") == 49


def test_factor_becomes_observe():
    p = desugar_foppl(parse("(let [x (sample (normal 0 1))] (factor (* -1 x)) x)"))

    found = []

    def walk(e):
        if isinstance(e, Observe):
            found.append(e)
        for f in getattr(e, "__dataclass_fields__", {}):
            v = getattr(e, f)
            if hasattr(v, "__dataclass_fields__"):
                walk(v)
            elif isinstance(v, tuple):
                for x in v:
                    if hasattr(x, "__dataclass_fields__"):
                        walk(x)

    walk(p.body)
    assert len(found) == 1


# ---------------------------------------------------------------------------
# Language restrictions


def test_foppl_rejects_anonymous_fn():
    with pytest.raises(DesugarError):
        desugar_foppl(parse("((fn [x] x) 1)"))


def test_foppl_rejects_recursion():
    with pytest.raises(DesugarError):
        desugar_foppl(parse("(defn f [x] (f x)) (f 1)"))


def test_foppl_rejects_unknown_symbol():
    with pytest.raises(DesugarError):
        desugar_foppl(parse("(+ x 1)"))


def test_foppl_rejects_forward_reference():
    with pytest.raises(DesugarError):
        desugar_foppl(parse("(defn f [x] (g x)) (defn g [x] x) (f 1)"))


def test_hoppl_allows_recursion_and_fn():
    text = """
    (defn fact [n] (if (<= n 1) 1 (* n (fact (- n 1)))))
    (fact 10)
    """
    assert run_hoppl(text) == 3628800
    assert run_hoppl("((fn [x y] (+ x y)) 3 4)") == 7


def test_hoppl_prelude_map():
    assert run_hoppl("(map (fn [x] (* x x)) [1 2 3])") == [1, 4, 9]


def test_hoppl_prelude_reduce():
    assert run_hoppl("(reduce (fn [a x] (+ a x)) 0 [1 2 3 4])") == 10


def test_hoppl_prelude_repeatedly():
    assert run_hoppl("(repeatedly 3 (fn [] 5))") == [5, 5, 5]


def test_hoppl_prelude_shadowed_by_user_defn():
    text = "(defn map [f xs] 42) (map (fn [x] x) [1])"
    assert run_hoppl(text) == 42


def test_sample_observe_arity():
    with pytest.raises(DesugarError):
        desugar_foppl(parse("(sample (normal 0 1) 2)"))
    with pytest.raises(DesugarError):
        desugar_foppl(parse("(observe (normal 0 1))"))


def test_defn_requires_body_at_top_level_only():
    with pytest.raises(DesugarError):
        desugar_foppl(parse("(defn f [x] x)"))


# ---------------------------------------------------------------------------
# Structure


def test_desugared_core_contains_no_sugar():
    p = desugar_foppl(parse("(case (foreach 1 [] 2) [2] 5 0)"))

    def walk(e):
        assert type(e).__name__ not in ("SForm", "CaseForm")
        for f in getattr(e, "__dataclass_fields__", {}):
            v = getattr(e, f)
            if hasattr(v, "__dataclass_fields__"):
                walk(v)
            elif isinstance(v, tuple):
                for x in v:
                    if hasattr(x, "__dataclass_fields__"):
                        walk(x)

    walk(p.body)


def test_print_expr_round_trips_through_parse():
    text = "(let [x (sample (normal 0 1))] (observe (normal x 1) 2) x)"
    p = desugar_foppl(parse(text))
    q = desugar_foppl(parse(print_expr(p.body)))
    assert print_expr(p.body) == print_expr(q.body)


def test_positions_survive_desugar():
    p = desugar_foppl(parse("(let [x (sample (normal 0 1))]\n  x)"))

    samples = []

    def walk(e):
        if isinstance(e, Sample):
            samples.append(e)
        for f in getattr(e, "__dataclass_fields__", {}):
            v = getattr(e, f)
            if hasattr(v, "__dataclass_fields__"):
                walk(v)

    walk(p.body)
    assert samples and samples[0].pos is not None
    assert samples[0].pos[0] == 1
