"""Closed forms against numeric optima on small discrete worlds."""

from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpalf.errors import ConfigurationError, DivergenceError, UndefinedPointError
from hpalf.theory import (
    DiscreteWorld,
    generator_criterion,
    generator_optimality_sweep,
    minimize_on_simplex,
    optimal_D_closed_form,
    optimal_D_numeric,
    printed_v_prime,
    project_simplex,
    random_world,
    simplex_grid,
    value_function_eval,
    verify_theory,
    write_theory_csv,
)

R1 = np.array([0.5, 0.3, 0.2])
R0 = np.array([0.2, 0.3, 0.5])


def _world(p_data=(0.4, 0.6), p_g=(0.3, 0.7)) -> DiscreteWorld:
    return DiscreteWorld(np.array(p_data), np.array(p_g), R1, R0)


def test_world_validation():
    with pytest.raises(ConfigurationError):
        DiscreteWorld(np.array([0.5, 0.6]), np.array([0.5, 0.5]), R1, R0)
    with pytest.raises(ConfigurationError):
        DiscreteWorld(np.array([0.5, 0.5]), np.array([1.0]), R1, R0)
    with pytest.raises(ConfigurationError):
        DiscreteWorld(np.array([0.5, 0.5]), np.array([0.5, 0.5]), R1, R1)
    assert DiscreteWorld(np.array([1.0]), np.array([1.0]), R1, R1, allow_degenerate=True).outcomes == 3


def test_closed_forms_at_a_point():
    closed = optimal_D_closed_form(_world(), 0)
    np.testing.assert_allclose(closed.mixture, (0.4 * R1 + 0.3 * R0) / 0.7)
    assert closed.mixture.sum() == pytest.approx(1.0)
    assert closed.proof.sum() == pytest.approx(1.0)
    # the printed optimum is not a distribution
    assert closed.printed.sum() == pytest.approx(1.0 + 3 * 0.4 / 0.7)


def test_undefined_point_raises():
    world = DiscreteWorld(np.array([1.0, 0.0]), np.array([1.0, 0.0]), R1, R0)
    with pytest.raises(UndefinedPointError):
        optimal_D_closed_form(world, 1)


@pytest.mark.parametrize("solver", ["newton", "projected"])
def test_kl_only_optimum_is_the_anchor_mixture(solver):
    world = _world()
    numeric = optimal_D_numeric(world, 0, "kl_only", solver=solver)
    np.testing.assert_allclose(numeric, optimal_D_closed_form(world, 0).mixture, atol=1e-6)


def test_kl_plus_scalar_optimum_is_the_normalised_proof_form():
    world = _world()
    for x in range(world.n_x):
        numeric = optimal_D_numeric(world, x, "kl_plus_scalar")
        np.testing.assert_allclose(numeric, optimal_D_closed_form(world, x).proof, atol=1e-8)


def test_minimize_on_simplex_rejects_bad_requests():
    with pytest.raises(ConfigurationError):
        minimize_on_simplex(np.array([-1.0, 2.0]))
    with pytest.raises(ConfigurationError):
        minimize_on_simplex(np.array([1.0, 1.0]), solver="lbfgs")


def test_project_simplex():
    np.testing.assert_allclose(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
    projected = project_simplex(np.array([0.3, 0.3, 0.3]))
    np.testing.assert_allclose(projected, np.full(3, 1 / 3))


def test_value_function_matches_hand_computation():
    world = _world()
    perspectives = np.array([R1, R0])
    scalars = np.array([0.6, 0.4])
    kl_fake_0 = float(np.sum(R0 * np.log(R0 / R1)))
    kl_real_1 = float(np.sum(R1 * np.log(R1 / R0)))
    expected = (
        0.4 * (0.0 + math.log(0.6))
        + 0.6 * (kl_real_1 + math.log(0.4))
        + 0.3 * (kl_fake_0 + math.log(0.4))
        + 0.7 * (0.0 + math.log(0.6))
    )
    assert value_function_eval(world, perspectives, scalars) == pytest.approx(expected)
    with pytest.raises(DivergenceError):
        value_function_eval(world, perspectives, np.array([1.0, 0.5]))


def test_generator_criterion_vanishes_only_at_the_data():
    world = _world()
    assert generator_criterion(world) > 0
    assert generator_criterion(world.with_generator(world.p_data)) == pytest.approx(0.0, abs=1e-15)
    flat = DiscreteWorld(world.p_data, world.p_g, R1, R1, allow_degenerate=True)
    assert generator_criterion(flat) == pytest.approx(0.0, abs=1e-15)


def test_printed_v_prime_is_undefined_for_ordinary_anchors():
    assert math.isnan(printed_v_prime(_world()))


def test_simplex_grid():
    grid = simplex_grid(2, 0.25)
    assert grid.shape == (5, 2)
    np.testing.assert_allclose(grid.sum(axis=1), 1.0)
    assert simplex_grid(3, 0.5).shape == (6, 3)
    with pytest.raises(ConfigurationError):
        simplex_grid(5, 0.5)
    with pytest.raises(ConfigurationError):
        simplex_grid(2, 0.3)


def test_sweep_finds_the_unique_minimum_at_the_data():
    world = DiscreteWorld(np.array([0.2, 0.3, 0.5]), np.array([0.6, 0.2, 0.2]), R1, R0)
    report = generator_optimality_sweep(world, step=0.05)
    np.testing.assert_allclose(report.grid[report.data_index], world.p_data)
    np.testing.assert_allclose(report.minimizer, world.p_data)
    assert report.unique_minimum
    assert report.zero_iff_data
    gap, strength = report.separation[0]
    assert gap == 0.0
    assert abs(strength) < 1e-15
    assert report.separation_monotone
    assert report.separation[-1][1] > 0


def test_random_world_puts_p_data_on_the_grid(rng):
    world = random_world(rng, n_x=3, outcomes=5, step=0.05)
    assert np.all(world.p_data > 0)
    np.testing.assert_allclose(world.p_data * 20, np.round(world.p_data * 20), atol=1e-9)
    assert world.outcomes == 5


def test_verify_theory_rows_and_csv(tmp_path):
    rows = verify_theory(3, seed=7, n_x=3, outcomes=5, step=0.05)
    assert len(rows) == 12
    verdicts = {row.variant: set() for row in rows}
    for row in rows:
        verdicts[row.variant].add(row.passed)
    assert verdicts["kl_only"] == {"pass"}
    assert verdicts["kl_plus_scalar"] == {"pass"}
    assert verdicts["printed_vs_kl_only"] == {"info"}

    path = write_theory_csv(rows, tmp_path / "theory.csv")
    with path.open(newline="") as handle:
        records = list(csv.DictReader(handle))
    assert list(records[0]) == ["world_id", "variant", "sup_norm_gap", "c_minimizer", "result"]
    assert len(records) == 12



def test_every_world_of_a_full_verification_passes():
    rows = verify_theory(100, seed=0, n_x=3, outcomes=10, step=0.05)
    assert len({row.world_id for row in rows}) == 100
    checked = [row for row in rows if row.variant in ("kl_only", "kl_plus_scalar")]
    assert len(checked) == 200
    assert [row for row in checked if row.passed != "pass"] == []


@settings(max_examples=50, deadline=None)
@given(values=st.lists(st.floats(min_value=-5.0, max_value=5.0), min_size=2, max_size=8))
def test_projection_lands_on_the_simplex_and_is_idempotent(values):
    projected = project_simplex(np.array(values))
    assert projected.sum() == pytest.approx(1.0)
    assert np.all(projected >= 0)
    np.testing.assert_allclose(project_simplex(projected), projected, atol=1e-12)
