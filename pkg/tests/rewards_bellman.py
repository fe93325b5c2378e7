import numpy as np
import pytest

from AAROS.rewards import TabularMDP, bellman_q_update, iterate_bellman_updates, q_value_iteration


def test_single_update() -> None:
    delta, new_q = bellman_q_update(q=0.0, r=1.0, gamma=0.99, max_next_q=0.0, alpha=0.1)
    assert delta == pytest.approx(0.1)
    assert new_q == pytest.approx(0.1)


def test_zero_step_size_keeps_q() -> None:
    assert bellman_q_update(q=0.7, r=1.0, gamma=0.9, max_next_q=3.0, alpha=0.0) == (0.0, 0.7)


def test_fixed_point_has_no_delta() -> None:
    delta, new_q = bellman_q_update(q=1.0, r=0.0, gamma=0.5, max_next_q=2.0, alpha=0.3)
    assert delta == pytest.approx(0.0)
    assert new_q == pytest.approx(1.0)


@pytest.mark.parametrize(("gamma", "alpha"), [(1.5, 0.1), (0.9, -0.1), (0.9, 1.1)])
def test_out_of_range_parameters(gamma: float, alpha: float) -> None:
    with pytest.raises(ValueError):
        bellman_q_update(0.0, 0.0, gamma, 0.0, alpha)


def test_repeated_updates_reach_the_optimal_q_table() -> None:
    mdp = TabularMDP(
        transitions=np.array([[1, 2], [0, 2], [2, 0]]),
        rewards=np.array([[0.0, 1.0], [2.0, -1.0], [0.5, 0.0]]),
    )
    exact = q_value_iteration(mdp, gamma=0.9)
    learned = iterate_bellman_updates(mdp, gamma=0.9, alpha=0.5, sweeps=2000)
    np.testing.assert_allclose(learned, exact, atol=1e-6)
    # Bellman optimality holds for the exact table
    np.testing.assert_allclose(exact, mdp.rewards + 0.9 * exact.max(axis=1)[mdp.transitions], atol=1e-9)
