import numpy as np
import pytest

from proxnn.prox import BOX01, BoxConstraint, hardtanh, project_box, prox_quadratic_box, soft_threshold


def brute_force_prox_1d(fun, u, lo=-10.0, hi=10.0, step=1e-4):
    """Grid-search argmin of fun(v) + 0.5 (v - u)^2, the scalar prox oracle."""
    grid = np.arange(lo, hi + step, step)
    vals = fun(grid) + 0.5 * (grid - u) ** 2
    return grid[np.argmin(vals)]


def test_project_box_identity_inside():
    x = np.array([0.2, 0.5, 0.99])
    assert np.array_equal(project_box(x, BOX01), x)


def test_project_box_clamps():
    out = project_box(np.array([-0.5, 0.3, 1.7]), BOX01)
    assert np.array_equal(out, [0.0, 0.3, 1.0])


def test_project_box_idempotent(rng):
    x = rng.normal(size=(3, 5, 5)) * 2
    once = project_box(x, BOX01)
    assert np.array_equal(project_box(once, BOX01), once)


def test_box_requires_order():
    with pytest.raises(ValueError):
        BoxConstraint(1.0, 0.0)


def test_hardtanh_case_split():
    # clamp below, pass-through, clamp above
    out = hardtanh(np.array([-2.0, 0.5, 3.0]), 1.0)
    assert np.array_equal(out, [-1.0, 0.5, 1.0])


def test_hardtanh_zero_radius():
    assert np.array_equal(hardtanh(np.array([3.0, -1.0]), 0.0), [0.0, 0.0])


def test_hardtanh_inf_sentinel(rng):
    u = rng.normal(size=7)
    assert np.array_equal(hardtanh(u, np.inf), u)


def test_moreau_identity(rng):
    u = rng.normal(size=(4, 6, 6)) * 3
    nu = 0.7
    assert np.abs(soft_threshold(u, nu) + hardtanh(u, nu) - u).max() <= 1e-12


def test_soft_threshold_values():
    assert np.array_equal(soft_threshold(np.array([3.0, -0.5]), 1.0), [2.0, 0.0])
    u = np.array([0.3, -2.0, 5.0])
    assert np.array_equal(soft_threshold(u, 0.0), u)


def test_soft_threshold_matches_grid_oracle(rng):
    theta = 0.8
    for u in rng.uniform(-4, 4, size=10):
        want = brute_force_prox_1d(lambda v: theta * np.abs(v), u)
        got = soft_threshold(np.array([u]), theta)[0]
        assert abs(got - want) < 1e-3


def test_prox_quadratic_box_arithmetic():
    out = prox_quadratic_box(np.array([0.6]), 1.0, np.array([0.0]), BOX01)
    assert np.allclose(out, 0.3)
    out = prox_quadratic_box(np.array([3.0]), 1.0, np.array([1.0]), BOX01)
    assert np.allclose(out, 1.0)  # clamped from 2


def test_prox_quadratic_box_matches_grid_oracle(rng):
    box = BOX01
    for _ in range(10):
        v, z, mu = rng.uniform(-2, 2), rng.uniform(0, 1), rng.uniform(0.1, 5)

        def fun(g):
            pen = np.where((g >= box.lo) & (g <= box.hi), 0.0, np.inf)
            return mu * (0.5 * (g - z) ** 2 + pen)

        want = brute_force_prox_1d(fun, v, lo=-2, hi=3)
        got = prox_quadratic_box(np.array([v]), mu, np.array([z]), box)[0]
        assert abs(got - want) < 1e-3


def test_prox_quadratic_box_stays_in_box(rng):
    v = rng.normal(size=(1, 8, 8)) * 4
    z = rng.normal(size=(1, 8, 8))
    out = prox_quadratic_box(v, 2.5, z, BOX01)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_prox_quadratic_box_shape_mismatch():
    with pytest.raises(ValueError):
        prox_quadratic_box(np.zeros(3), 1.0, np.zeros(4), BOX01)


@pytest.mark.parametrize(
    "op",
    [
        lambda a: project_box(a, BOX01),
        lambda a: hardtanh(a, 0.9),
        lambda a: soft_threshold(a, 0.9),
        lambda a: prox_quadratic_box(a, 1.7, np.zeros_like(a), BOX01),
    ],
)
def test_operators_are_nonexpansive(rng, op):
    for _ in range(20):
        a = rng.normal(size=17) * 3
        b = rng.normal(size=17) * 3
        assert np.linalg.norm(op(a) - op(b)) <= np.linalg.norm(a - b) + 1e-12
