import math

import pytest

from pplkit.distributions import make, values_equal
from pplkit.values import Symbol, from_wire, nil, print_value, to_wire


def test_symbol_is_interned_text():
    a = Symbol("x1")
    assert a == Symbol("x1")
    assert str(a) == "x1"
    assert a != Symbol("x2")


def test_print_value_scalars():
    assert print_value(nil) == "nil"
    assert print_value(True) == "true"
    assert print_value(False) == "false"
    assert print_value(3) == "3"
    assert print_value(2.5) == "2.5"


def test_print_value_collections():
    assert print_value([1, 2, [3, nil]]) == "[1 2 [3 nil]]"
    assert print_value({1: 2.0}) == "{1 2.0}"


def test_wire_round_trip_plain_values():
    for v in (nil, True, False, 0, -7, 1.5, "text", [1, [2.5, nil], "s"]):
        assert from_wire(to_wire(v)) == v


def test_wire_keeps_booleans_and_numbers_apart():
    # json alone would conflate these with 0/1 on some paths
    assert to_wire(True) is True
    assert to_wire(1) == 1
    assert from_wire(to_wire([True, 1, 0, False])) == [True, 1, 0, False]


def test_wire_symbol_tagging():
    w = to_wire(Symbol("mu"))
    assert w == {"$sym": "mu"}
    assert from_wire(w) == Symbol("mu")
    assert isinstance(from_wire(w), Symbol)


def test_wire_map_preserves_non_string_keys():
    m = {1: "a", Symbol("k"): [2]}
    back = from_wire(to_wire(m))
    assert back == m
    assert any(isinstance(k, Symbol) for k in back)


def test_wire_tuple_flattens_to_list():
    assert to_wire((1, 2, 3)) == [1, 2, 3]
    assert from_wire(to_wire((1, 2, 3))) == [1, 2, 3]


def test_wire_distribution_values():
    d = make("normal", 0.5, 2.0)
    w = to_wire(d)
    assert w == {"$dist": {"family": "normal", "params": [0.5, 2.0]}}
    assert from_wire(w) == d


def test_wire_discrete_weights_round_trip():
    d = make("discrete", [0.2, 0.3, 0.5])
    assert from_wire(to_wire(d)) == d


def test_wire_rejects_opaque_objects():
    with pytest.raises(TypeError):
        to_wire(object())


def test_values_equal_numeric_cross_type():
    assert values_equal(1, 1.0)
    assert values_equal(0.5, 0.5)
    assert not values_equal(1, 2)


def test_values_equal_booleans_are_not_numbers():
    assert not values_equal(True, 1)
    assert not values_equal(False, 0)
    assert values_equal(True, True)


def test_values_equal_structural():
    assert values_equal([1, [2, 3]], [1.0, [2.0, 3]])
    assert not values_equal([1, 2], [1, 2, 3])
    assert values_equal({1: 2}, {1.0: 2.0})
    assert values_equal(nil, nil)
    assert not values_equal(nil, 0)


def test_values_equal_nan_is_not_equal():
    assert not values_equal(math.nan, math.nan)
