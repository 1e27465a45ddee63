import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from alias_forge.metrics import (
    DegenerateTraceError, budget_ok, budget_scaling, edit_distance, fitness, ler, stdev,
)
from alias_forge.trace import TraceMatrix, total_latency

floats = st.floats(-1e6, 1e6, allow_nan=False)


def tm_of(rows):
    rows = np.asarray(rows, dtype=float)
    return TraceMatrix(list(range(len(rows))), rows)


def test_stdev_examples():
    assert stdev([5, 5, 5]) == 0.0
    assert stdev([2, 4, 6]) == 2.0
    with pytest.raises(DegenerateTraceError):
        stdev([1.0])


@given(st.lists(floats, min_size=2, max_size=40), st.floats(-1e3, 1e3), st.floats(-10, 10))
def test_stdev_translation_and_scale(xs, shift, scale):
    s = stdev(xs)
    assert math.isclose(stdev([x + shift for x in xs]), s, rel_tol=1e-6, abs_tol=1e-6)
    assert math.isclose(stdev([scale * x for x in xs]), abs(scale) * s, rel_tol=1e-6, abs_tol=1e-6)


def test_scaling_examples():
    assert budget_scaling(1.2, 1.0, 0.2) == pytest.approx(0.0, abs=1e-15)
    assert budget_scaling(1.0, 1.0, 0.2) == pytest.approx(0.04, rel=1e-12)
    assert budget_scaling(1.0, 1.0, 0.2, "hinge") == pytest.approx(1e-6)
    assert budget_scaling(1.5, 1.0, 0.2, "hinge") == pytest.approx(0.09 + 1e-6)
    with pytest.raises(ValueError):
        budget_scaling(1, 1, 0, "other")


def test_fitness_zero_at_budget():
    rows = [[100, 1, 1], [300, 1, 1]]
    t = total_latency(tm_of(rows))
    rep = fitness(tm_of(rows), t / 1.2, 0.2)
    assert rep.scaling == pytest.approx(0.0, abs=1e-20)
    assert rep.fitness == rep.stdev_sum * rep.scaling


def test_fitness_doubling_recomputes(rng):
    rows = rng.uniform(1, 1e4, (12, 3))
    base = fitness(tm_of(rows), 5e4, 0.2)
    double = fitness(tm_of(2 * rows), 5e4, 0.2)
    assert double.stdev_sum == pytest.approx(2 * base.stdev_sum, rel=1e-12)
    t = total_latency(tm_of(2 * rows))
    assert double.scaling == pytest.approx(((t - 1.2 * 5e4) / 5e4) ** 2, rel=1e-12)


def test_fitness_errors():
    with pytest.raises(ValueError):
        fitness(tm_of([[1, 1, 1], [2, 2, 2]]), 0, 0.2)
    with pytest.raises(DegenerateTraceError):
        fitness(tm_of([[1, 1, 1]]), 1, 0.2)


def test_budget_ok():
    tm = tm_of([[100, 1, 1], [50, 1, 1]])
    t = total_latency(tm)
    assert budget_ok(tm, t, 0.0)
    assert not budget_ok(tm, t * 0.99, 0.0)


def test_ler_examples():
    a = ["Conv2D", "FC"]
    assert ler(a, a) == 0
    assert edit_distance(["Conv2D", "Conv2D", "FC"], a) == 1
    assert ler(["Conv2D", "Conv2D", "FC"], a) == 0.5
    assert ler(["x"] * 5 + ["a", "b", "c"], ["a", "b", "c"]) == pytest.approx(5 / 3)
    with pytest.raises(ValueError):
        ler(a, [])


seqs = st.lists(st.sampled_from("ABCD"), max_size=12)


@given(seqs, seqs, seqs)
def test_edit_distance_metric_axioms(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert (edit_distance(a, b) == 0) == (a == b)


def test_fixture_genome_budget_golden(resnet_fixture):
    from alias_forge.trace import trace
    from alias_forge.transforms import apply_genome, random_genome
    t0 = total_latency(trace(resnet_fixture))
    obf = trace(apply_genome(resnet_fixture, random_genome(resnet_fixture, 0)))
    # recorded from the reference run: 31 ops, T/T* = 2.683
    assert not budget_ok(obf, t0, 0.2)
    assert total_latency(obf) / t0 == pytest.approx(2.6833118825491367, rel=1e-12)
