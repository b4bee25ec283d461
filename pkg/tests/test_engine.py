import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from detuner import LayerGroup, RecoveryConfig, recover_layer
from detuner.engine import initialize, log10_mse, loss, m_step, w_step
from detuner.errors import (ConfigError, DivergenceError, NonFiniteError, ShapeMismatchError,
                            UnderdeterminedError)
from detuner.scheduler import SchedulerConfig

from conftest import make_group


def test_initialize_mean():
    g = LayerGroup("x", [np.zeros((2, 2)), 2 * np.ones((2, 2))])
    np.testing.assert_array_equal(initialize(g), np.ones((2, 2)))


def test_m_step_worked_example():
    g = LayerGroup("x", [np.diag([5.0, 2.0, 1.0]), np.eye(3)])
    ms = m_step(g, np.zeros((3, 3)), [1, 3])
    np.testing.assert_allclose(ms[0], np.diag([5.0, 0, 0]), atol=1e-14)
    np.testing.assert_allclose(ms[1], np.eye(3), atol=1e-14)


def test_w_step_and_loss_worked_example():
    g = LayerGroup("x", [np.full((2, 2), 3.0), np.full((2, 2), 5.0)])
    ms = [np.ones((2, 2)), np.full((2, 2), 3.0)]
    w = w_step(g, ms)
    np.testing.assert_array_equal(w, np.full((2, 2), 2.0))
    assert loss(g, w, ms) == 0.0
    assert loss(g, np.zeros((2, 2)), ms) == pytest.approx(4.0)


def test_w_step_is_optimal_under_perturbation(rng):
    g = make_group(rng, 8, 6, 4, 2)
    ms = m_step(g, initialize(g), [2] * 4)
    w = w_step(g, ms)
    base = loss(g, w, ms)
    for _ in range(200):
        assert loss(g, w + 1e-3 * rng.standard_normal(w.shape), ms) >= base


def test_m_step_is_optimal_under_perturbation(rng):
    g = make_group(rng, 8, 6, 3, 2)
    w = initialize(g)
    ms = m_step(g, w, [2] * 3)
    base = loss(g, w, ms)
    for _ in range(100):
        i = rng.integers(3)
        u, s, vt = np.linalg.svd(ms[i])
        # perturb within the rank-2 manifold
        other = list(ms)
        other[i] = (u[:, :2] + 1e-3 * rng.standard_normal((8, 2))) @ np.diag(s[:2]) @ vt[:2]
        assert loss(g, w, other) >= base - 1e-15


def test_step_shape_checks(rng):
    g = make_group(rng, 4, 4, 3, 1)
    with pytest.raises(ShapeMismatchError):
        m_step(g, np.zeros((4, 5)), [1, 1, 1])
    with pytest.raises(ShapeMismatchError):
        m_step(g, np.zeros((4, 4)), [1, 1])
    with pytest.raises(ShapeMismatchError):
        w_step(g, [np.zeros((4, 4))] * 2)


def test_layer_group_validation():
    with pytest.raises(ShapeMismatchError):
        LayerGroup("x", [np.zeros((2, 2)), np.zeros((2, 3))])
    with pytest.raises(NonFiniteError):
        LayerGroup("x", [np.zeros((2, 2)), np.full((2, 2), np.inf)])
    with pytest.raises(UnderdeterminedError):
        LayerGroup("x", [])


@pytest.mark.parametrize("use_scheduler", [True, False])
def test_loss_is_monotone(rng, use_scheduler):
    g = make_group(rng, 24, 20, 5, 3)
    cfg = RecoveryConfig(steps=80, ranks=[3] * 5,
                         scheduler=SchedulerConfig() if use_scheduler else None)
    losses = recover_layer(g, cfg).losses
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_ground_truth_is_never_read(rng):
    g = make_group(rng, 16, 16, 4, 2)
    cfg = RecoveryConfig(steps=30, ranks=[2] * 4)
    clean = recover_layer(g, cfg)
    poisoned = recover_layer(LayerGroup("L", g.fine_tuned, np.full(g.shape, 1e6)), cfg)
    np.testing.assert_array_equal(clean.final_w_star, poisoned.final_w_star)
    assert clean.losses == poisoned.losses


def test_deterministic(rng):
    g = make_group(rng, 16, 12, 4, 2)
    cfg = RecoveryConfig(steps=40, ranks=[2] * 4)
    a, b = recover_layer(g, cfg), recover_layer(g, cfg)
    np.testing.assert_array_equal(a.final_w_star, b.final_w_star)
    assert a.losses == b.losses and a.active_ranks == b.active_ranks


def test_randomized_backend_is_seeded(rng):
    g = make_group(rng, 16, 12, 4, 2)
    cfg = RecoveryConfig(steps=20, ranks=[2] * 4, svd_method="randomized", seed=3)
    np.testing.assert_array_equal(recover_layer(g, cfg).final_w_star,
                                  recover_layer(g, cfg).final_w_star)


def test_permutation_invariance(rng):
    g = make_group(rng, 20, 20, 5, [2, 3, 4, 2, 3])
    ranks = [2, 3, 4, 2, 3]
    cfg = RecoveryConfig(steps=60, ranks=ranks, scheduler=None)
    perm = [3, 0, 4, 1, 2]
    a = recover_layer(g, cfg)
    b = recover_layer(LayerGroup("L", [g.fine_tuned[i] for i in perm]),
                      RecoveryConfig(steps=60, ranks=[ranks[i] for i in perm], scheduler=None))
    np.testing.assert_allclose(a.final_w_star, b.final_w_star, atol=1e-12)


def test_translation_equivariance(rng):
    g = make_group(rng, 12, 12, 4, 2)
    shift = rng.standard_normal(g.shape)
    cfg = RecoveryConfig(steps=25, ranks=[2] * 4)
    a = recover_layer(g, cfg)
    b = recover_layer(LayerGroup("L", [w + shift for w in g.fine_tuned]), cfg)
    np.testing.assert_allclose(b.final_w_star, a.final_w_star + shift, atol=1e-10)


def test_identical_inputs_stop_after_one_iteration(rng):
    w = rng.standard_normal((6, 6))
    trace = recover_layer(LayerGroup("L", [w, w.copy(), w.copy()]),
                          RecoveryConfig(steps=50, ranks=[1, 1, 1]))
    assert trace.steps_run == 1 and trace.losses[0] < 1e-30
    np.testing.assert_allclose(trace.final_w_star, w, atol=1e-15)


def test_loss_tolerance_stops_early(rng):
    g = make_group(rng, 16, 16, 5, 2)
    trace = recover_layer(g, RecoveryConfig(steps=300, ranks=[2] * 5, loss_tolerance=1e-8))
    assert trace.steps_run < 300 and trace.losses[-1] <= 1e-8


def test_needs_two_models(rng):
    with pytest.raises(UnderdeterminedError):
        recover_layer(LayerGroup("L", [rng.standard_normal((4, 4))]),
                      RecoveryConfig(steps=5, ranks=[1]))


def test_rank_validation(rng):
    g = make_group(rng, 6, 4, 3, 1)
    with pytest.raises(ConfigError):
        recover_layer(g, RecoveryConfig(steps=5, ranks=[5, 1, 1]))
    with pytest.raises(ConfigError):
        recover_layer(g, RecoveryConfig(steps=5, ranks=[1, 1]))
    with pytest.raises(ConfigError):
        RecoveryConfig(steps=0, ranks=[1])
    with pytest.raises(ConfigError):
        RecoveryConfig(steps=1, ranks=[1], svd_method="qr")


def test_two_models_full_rank_is_not_identifiable(rng):
    # any W works once each residual may be full rank: loss hits zero, error stays
    g = make_group(rng, 8, 8, 2, 1)
    trace = recover_layer(g, RecoveryConfig(steps=10, ranks=[8, 8], scheduler=None))
    assert trace.losses[0] < 1e-25
    assert log10_mse(trace.final_w_star, g.ground_truth) > -6


def test_divergence_is_reported(monkeypatch, rng):
    import detuner.engine as engine
    g = make_group(rng, 6, 6, 3, 1)
    monkeypatch.setattr(engine, "loss", lambda *a: float("nan"))
    with pytest.raises(DivergenceError):
        recover_layer(g, RecoveryConfig(steps=3, ranks=[1] * 3))


def test_w_errors_recorded_per_iteration(rng):
    g = make_group(rng, 16, 16, 5, 2)
    trace = recover_layer(g, RecoveryConfig(steps=20, ranks=[2] * 5))
    assert len(trace.w_errors) == trace.steps_run
    assert trace.w_errors[-1] == pytest.approx(log10_mse(trace.final_w_star, g.ground_truth))
    assert recover_layer(g.without_ground_truth(), RecoveryConfig(steps=5, ranks=[2] * 5)).w_errors is None


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 5), r=st.integers(1, 3))
def test_monotone_descent_property(seed, n, r):
    rng = np.random.default_rng(seed)
    g = make_group(rng, 10, 9, n, r)
    losses = recover_layer(g, RecoveryConfig(steps=30, ranks=[r] * n)).losses
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
