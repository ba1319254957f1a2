from contextlib import contextmanager

import numpy as np
import pytest

from pydorf.delay_doppler import DopplerMatrix
from pydorf.exceptions import InvalidInputError, NumericError
from pydorf.param_classes import FactorizationConfig
from pydorf.utilities import random_unit_vectors, rotation_from_axis_angle
from pydorf.velocity_factorization import (DirectionSet, FitReport, VelocityTrack, aligned_rmse,
                                           direction_update, dtw_loss, factorize, factorize_joint,
                                           objective, procrustes_align, procrustes_rotation,
                                           velocity_update)

# ------------------------------------------
# Null context manager to include exception testing in test paramaterisation
# ------------------------------------------


@contextmanager
def does_not_raise():
    yield


# ------------------------------------------
# Fixtures: a smooth ground truth track and random directions
# ------------------------------------------


@pytest.fixture(scope='module')
def truth():
    """A smooth 3D velocity track (T'=200) and 20 unit directions."""

    phase = np.linspace(0, 2 * np.pi, 200)
    v_true = np.column_stack([np.sin(phase), 0.8 * np.cos(2 * phase),
                              0.5 * np.sin(0.5 * phase) + 0.3 * np.cos(3 * phase)])
    r_true = random_unit_vectors(20, np.random.default_rng(1))

    return VelocityTrack(v_true), DirectionSet(r_true)


def peak_speed(track):
    return float(np.max(np.linalg.norm(track.v, axis=1)))


# ------------------------------------------
# Testing FactorizationConfig
# ------------------------------------------


@pytest.mark.parametrize(
    'ctrl',
    [dict(args=dict(), cmng=does_not_raise()),
     dict(args=dict(lam=0.0, gamma=0.0), cmng=does_not_raise()),
     dict(args=dict(lam=-0.1), cmng=pytest.raises(InvalidInputError)),
     dict(args=dict(gamma=-0.1), cmng=pytest.raises(InvalidInputError)),
     dict(args=dict(epsilon=0.0), cmng=pytest.raises(InvalidInputError)),
     dict(args=dict(max_iters=0), cmng=pytest.raises(InvalidInputError)),
     dict(args=dict(dtw_band=-2), cmng=pytest.raises(InvalidInputError)),
     dict(args=dict(mode='together'), cmng=pytest.raises(InvalidInputError))]
)
def test_factorization_config(ctrl):

    with ctrl['cmng']:
        FactorizationConfig(**ctrl['args'])


# ------------------------------------------
# Testing the single updates
# ------------------------------------------


def test_velocity_update_exact(truth):

    v_true, r_true = truth
    v = velocity_update(v_true.v @ r_true.r.T, r_true, lam=0.0)

    assert np.allclose(v.v, v_true.v, atol=1e-10)


def test_velocity_update_singular():

    r = DirectionSet(np.tile([0.0, 0.0, 1.0], (5, 1)))

    with pytest.raises(NumericError):
        velocity_update(np.zeros((10, 5)), r, lam=0.0)

    # A ridge weight makes the system solvable
    assert velocity_update(np.zeros((10, 5)), r, lam=0.1).n_windows == 10


def test_direction_update_exact(truth):

    v_true, r_true = truth
    r = direction_update(v_true.v @ r_true.r.T, v_true, gamma=0.0)

    assert np.allclose(r.r, r_true.r, atol=1e-10)
    assert not np.any(r.fallback_mask)


@pytest.mark.parametrize('gamma', [0.0, 0.01])
def test_direction_update_fallback(gamma):

    v_r = np.zeros((10, 4))
    v_r[:, 0] = np.linspace(-1, 1, 10)
    v = VelocityTrack(np.column_stack([np.linspace(-1, 1, 10), np.zeros(10), np.zeros(10)]))

    with pytest.warns(RuntimeWarning, match='zero norm'):
        r = direction_update(v_r, v, gamma=gamma, rng=np.random.default_rng(3))

    assert np.array_equal(r.fallback_mask, [False, True, True, True])
    assert np.allclose(np.linalg.norm(r.r, axis=1), 1.0, atol=1e-12)
    assert np.allclose(r.r[0], [1.0, 0.0, 0.0])


def test_update_shape_errors(truth):

    v_true, r_true = truth

    with pytest.raises(InvalidInputError):
        velocity_update(np.zeros((200, 19)), r_true, lam=0.1)

    with pytest.raises(InvalidInputError):
        direction_update(np.zeros((199, 20)), v_true, gamma=0.1)


def test_direction_set_norms():

    with pytest.raises(InvalidInputError):
        DirectionSet(np.array([[1.0, 1.0, 0.0]]))


# ------------------------------------------
# Testing Procrustes alignment
# ------------------------------------------


def test_procrustes_rotation(truth):

    v_true, _ = truth
    rotation = rotation_from_axis_angle([1.0, 2.0, -0.5], 0.9)
    found = procrustes_rotation(v_true.v @ rotation, v_true.v)

    assert np.allclose(found, rotation.T, atol=1e-10)
    assert np.linalg.det(found) == pytest.approx(1.0)


def test_procrustes_no_reflection(truth):

    v_true, _ = truth
    mirrored = v_true.v * np.array([1.0, 1.0, -1.0])

    assert np.linalg.det(procrustes_rotation(mirrored, v_true.v)) == pytest.approx(1.0)


def test_procrustes_align_keeps_product(truth):

    v_true, r_true = truth
    rotation = rotation_from_axis_angle([0.0, 1.0, 1.0], 2.0)
    v_rot = VelocityTrack(v_true.v @ rotation)
    r_rot = DirectionSet(r_true.r @ rotation)

    v_al, r_al = procrustes_align(v_rot, r_rot, v_true)

    assert np.allclose(v_al.v @ r_al.r.T, v_true.v @ r_true.r.T, atol=1e-10)
    assert np.allclose(v_al.v, v_true.v, atol=1e-10)


def test_aligned_rmse_reflection(truth):

    v_true, _ = truth
    mirrored = v_true.v * np.array([-1.0, 1.0, 1.0])

    assert aligned_rmse(mirrored, v_true) == pytest.approx(0.0, abs=1e-10)
    assert aligned_rmse(v_true.v + 0.1, v_true) > 0


# ------------------------------------------
# Testing dtw_loss
# ------------------------------------------


def test_dtw_identical():

    series = np.random.default_rng(0).standard_normal((30, 4))
    assert dtw_loss(series, series, band=0) == 0.0


def test_dtw_symmetric():

    rng = np.random.default_rng(9)
    first = rng.standard_normal((25, 3))
    second = rng.standard_normal((31, 3))

    for band in (None, 0, 3, 10):
        assert dtw_loss(first, second, band) == pytest.approx(dtw_loss(second, first, band),
                                                              abs=1e-12)


def test_dtw_band():
    """Widening the band lets a shifted series align more cheaply."""

    series = np.sin(np.linspace(0, 4 * np.pi, 40))[:, np.newaxis]
    shifted = np.roll(series, 1, axis=0)

    assert dtw_loss(series, shifted, band=0) > dtw_loss(series, shifted, band=2)


@pytest.mark.parametrize(
    'ctrl',
    [dict(args=(np.zeros((5, 2)), np.zeros((5, 3)), None), cmng=pytest.raises(InvalidInputError)),
     dict(args=(np.zeros((5, 2)), np.zeros((5, 2)), -1), cmng=pytest.raises(InvalidInputError)),
     dict(args=(np.zeros((5, 2)), np.zeros(5), None), cmng=pytest.raises(InvalidInputError)),
     dict(args=(np.zeros((5, 2)), np.zeros((7, 2)), 0), cmng=does_not_raise())]
)
def test_dtw_errors(ctrl):

    with ctrl['cmng']:
        assert dtw_loss(*ctrl['args']) == 0.0


# ------------------------------------------
# Testing factorize
# ------------------------------------------


def test_factorize_noiseless(truth):

    v_true, r_true = truth
    v_r = v_true.v @ r_true.r.T
    cfg = FactorizationConfig(lam=0.0, gamma=0.0, epsilon=1e-9, max_iters=500)

    v, r, report = factorize(v_r, cfg)

    reconstruction = np.linalg.norm(v.v @ r.r.T - v_r) / np.linalg.norm(v_r)
    assert reconstruction <= 1e-3
    assert aligned_rmse(v, v_true) <= 0.01 * peak_speed(v_true)
    assert report.iterations <= 500
    assert report.residual_rms <= 1e-3 * np.sqrt(np.mean(v_r ** 2))


def test_factorize_noisy(truth):

    v_true, r_true = truth
    sigma = 0.05 * peak_speed(v_true)
    rng = np.random.default_rng(12)
    v_r = v_true.v @ r_true.r.T + rng.normal(0.0, sigma, (200, 20))

    with pytest.warns(RuntimeWarning, match='max_iters'):
        v, r, report = factorize(v_r, FactorizationConfig(epsilon=1e-4, max_iters=200))

    assert report.stop_reason == 'max_iters'
    assert aligned_rmse(v, v_true) <= 0.1 * peak_speed(v_true)
    assert np.allclose(np.linalg.norm(r.r, axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize(
    'ctrl',
    [dict(q=rotation_from_axis_angle([1.0, 2.0, 3.0], 0.9)),
     dict(q=rotation_from_axis_angle([0.0, 0.0, 1.0], np.pi)),
     dict(q=-np.eye(3)),
     dict(q=np.diag([1.0, 1.0, -1.0]))]
)
def test_factorize_gauge(truth, ctrl):
    """An orthogonal change of frame in the input only turns the factors."""

    v_true, r_true = truth
    cfg = FactorizationConfig(lam=0.0, gamma=0.0, epsilon=1e-9, max_iters=500)
    v_r = v_true.v @ r_true.r.T

    # The same product written with both factors turned
    turned = (v_true.v @ ctrl['q']) @ (r_true.r @ ctrl['q']).T
    v_a, r_a, _ = factorize(v_r, cfg)
    v_b, r_b, _ = factorize(turned, cfg)

    scale = np.linalg.norm(v_r)
    assert np.linalg.norm(v_b.v @ r_b.r.T - v_a.v @ r_a.r.T) / scale <= 2e-3

    # A turned track seen through the original directions
    moved = (v_true.v @ ctrl['q']) @ r_true.r.T
    v_c, r_c, _ = factorize(moved, cfg)

    assert np.linalg.norm(v_c.v @ r_c.r.T - moved) / scale <= 1e-3
    assert aligned_rmse(v_c, v_true.v @ ctrl['q']) <= 0.01 * peak_speed(v_true)
    assert aligned_rmse(v_c, v_true) <= 0.01 * peak_speed(v_true)


def test_factorize_deterministic(truth):

    v_true, r_true = truth
    v_r = v_true.v @ r_true.r.T + 0.01 * np.random.default_rng(2).standard_normal((200, 20))
    cfg = FactorizationConfig(max_iters=20, epsilon=1e-6, seed=5)

    with pytest.warns(RuntimeWarning):
        first = factorize(v_r, cfg)
        second = factorize(v_r, cfg)

    assert np.array_equal(first[0].v, second[0].v)
    assert np.array_equal(first[1].r, second[1].r)
    assert first[2].losses == second[2].losses


def test_factorize_zero_matrix():

    v, r, report = factorize(np.zeros((24, 6)), FactorizationConfig(seed=4))

    assert np.array_equal(v.v, np.zeros((24, 3)))
    assert report.stop_reason == 'tolerance'
    assert report.iterations == 1
    assert np.array_equal(r.r, random_unit_vectors(6, np.random.default_rng(4)))


def test_factorize_objective(truth):
    """The velocity update never increases the regularised objective."""

    v_true, r_true = truth
    v_r = v_true.v @ r_true.r.T + 0.02 * np.random.default_rng(6).standard_normal((200, 20))
    r = DirectionSet(random_unit_vectors(20, np.random.default_rng(7)))
    v = VelocityTrack(np.zeros((200, 3)))

    before = objective(v_r, v, r, 0.1, 0.01)
    after = objective(v_r, velocity_update(v_r, r, 0.1), r, 0.1, 0.01)

    assert after <= before


def test_factorize_doppler_matrix(truth):

    v_true, r_true = truth
    times = 0.635 + 0.16 * np.arange(200)
    dm = DopplerMatrix(v_true.v @ r_true.r.T, times, 0.12491)

    v, r, _ = factorize(dm, FactorizationConfig(lam=0.0, gamma=0.0, epsilon=1e-6, max_iters=300))

    assert np.array_equal(v.times, times)
    assert r.n_directions == 20


def test_factorize_joint(truth):

    v_true, r_true = truth
    v_r = v_true.v @ r_true.r.T
    times = np.arange(200, dtype=float)
    parts = [DopplerMatrix(v_r[:, :12], times, 0.125, antenna_ids=np.zeros(12)),
             DopplerMatrix(v_r[:, 12:], times, 0.125, antenna_ids=np.ones(8))]

    v, r, _ = factorize_joint(parts, FactorizationConfig(lam=0.0, gamma=0.0, epsilon=1e-9,
                                                         max_iters=500))

    assert r.n_directions == 20
    assert aligned_rmse(v, v_true) <= 0.01 * peak_speed(v_true)


def test_factorize_empty():

    with pytest.raises(InvalidInputError):
        factorize(np.zeros((0, 4)))


# ------------------------------------------
# Testing FitReport
# ------------------------------------------


def test_fit_report_text():

    report = FitReport([0.5, 0.125, 0.004], [3.0, 2.0, 1.5], 'tolerance', 2, 0.0125, 0.5)
    restored = FitReport.from_text(report.to_text())

    assert restored.to_text() == report.to_text()
    assert restored.iterations == 3
    assert restored.final_loss == 0.004

    with pytest.raises(InvalidInputError):
        FitReport.from_text('iterations = 3\n')
