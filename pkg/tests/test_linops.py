import numpy as np
import pytest

from conftest import delta_stack
from proxnn.linops import (
    AdjointPolicy,
    BlurOperator,
    ConvStackOperator,
    MatrixOperator,
    TIED,
    adjoint_residual,
    blur_adjoint,
    blur_apply,
    blur_kernel,
    conv_adjoint_apply,
    conv_apply,
    flipped_adjoint_stack,
    grad_stack,
    load_blur_kernel,
    spectral_norm,
)


def test_conv_delta_identity(rng):
    x = rng.normal(size=(1, 6, 6))
    assert np.array_equal(conv_apply(delta_stack(), x), x)


def test_conv_zero_stack(rng):
    x = rng.normal(size=(2, 5, 5))
    out = conv_apply(np.zeros((3, 2, 3, 3)), x)
    assert np.array_equal(out, np.zeros((3, 5, 5)))


def test_conv_horizontal_difference():
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1], k[0, 0, 1, 2] = 1.0, -1.0
    x = np.array([[[1.0, 2.0, 4.0, 8.0]]])
    out = conv_apply(k, x)
    assert np.array_equal(out, [[[-1.0, -2.0, -4.0, 8.0]]])


def test_conv_linearity(rng):
    k = rng.normal(size=(3, 2, 3, 3))
    x, y = rng.normal(size=(2, 7, 7)), rng.normal(size=(2, 7, 7))
    a, b = 1.7, -0.3
    lhs = conv_apply(k, a * x + b * y)
    rhs = a * conv_apply(k, x) + b * conv_apply(k, y)
    assert np.abs(lhs - rhs).max() < 1e-12 * max(1, np.abs(rhs).max())


def test_tied_adjoint_identity_kernel(rng):
    u = rng.normal(size=(1, 5, 5))
    assert np.array_equal(conv_adjoint_apply(delta_stack(), TIED, u), u)


def test_tied_adjoint_inner_product(rng):
    k = rng.normal(size=(4, 3, 3, 3))
    x, u = rng.normal(size=(3, 9, 9)), rng.normal(size=(4, 9, 9))
    lhs = np.vdot(conv_apply(k, x), u)
    rhs = np.vdot(x, conv_adjoint_apply(k, TIED, u))
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


def test_untied_flipped_stack_matches_tied(rng):
    k = rng.normal(size=(4, 2, 3, 3))
    u = rng.normal(size=(4, 6, 6))
    policy = AdjointPolicy("untied", flipped_adjoint_stack(k))
    assert np.array_equal(
        conv_adjoint_apply(k, policy, u), conv_adjoint_apply(k, TIED, u)
    )


def test_adjoint_policy_validation():
    with pytest.raises(ValueError):
        AdjointPolicy("untied", None)
    with pytest.raises(ValueError):
        AdjointPolicy("tied", np.zeros((1, 1, 3, 3)))


def test_adjoint_residual_tied(rng):
    for seed in range(5):
        k = np.random.default_rng(seed).normal(size=(4, 1, 3, 3))
        op = ConvStackOperator(k)
        assert adjoint_residual(op, (1, 8, 8), trials=5, seed=seed) <= 1e-10


def test_adjoint_residual_untied_mismatch():
    r = np.random.default_rng(0)
    k = r.normal(size=(4, 1, 3, 3))
    wrong = AdjointPolicy("untied", r.normal(size=(1, 4, 3, 3)))
    op = ConvStackOperator(k, wrong)
    assert adjoint_residual(op, (1, 8, 8), trials=5, seed=1) > 1e-2


def test_adjoint_residual_zero_stack():
    op = ConvStackOperator(np.zeros((2, 1, 3, 3)))
    assert adjoint_residual(op, (1, 8, 8), trials=3, seed=0) == 0.0


def test_spectral_norm_scaled_delta():
    op = ConvStackOperator(delta_stack(scale=2.0))
    res = spectral_norm(op, (1, 8, 8), tol=1e-10, max_iter=500, seed=0)
    assert abs(res.norm - 2.0) < 1e-8
    assert res.converged


def test_spectral_norm_diagonal_matrix():
    op = MatrixOperator(np.diag([2.0, 1.0]), (2,), (2,))
    res = spectral_norm(op, (2,), tol=1e-10, max_iter=500, seed=0)
    assert abs(res.norm - 2.0) < 1e-8


def test_spectral_norm_vs_dense_svd():
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1], k[0, 0, 1, 2] = 1.0, -1.0
    op = ConvStackOperator(k)
    shape = (1, 1, 8)
    mat = np.zeros((8, 8))
    for i in range(8):
        e = np.zeros(8)
        e[i] = 1.0
        mat[:, i] = op.apply(e.reshape(shape)).ravel()
    want = np.linalg.svd(mat, compute_uv=False)[0]
    got = spectral_norm(op, shape, tol=1e-10, max_iter=2000, seed=0).norm
    assert abs(got - want) / want <= 1e-6


def test_spectral_norm_zero_operator():
    op = ConvStackOperator(np.zeros((2, 1, 3, 3)))
    res = spectral_norm(op, (1, 6, 6), tol=1e-8, max_iter=100, seed=0)
    assert res.norm == 0.0 and res.converged


def test_spectral_norm_dominates_probes(rng):
    k = rng.normal(size=(3, 1, 3, 3))
    op = ConvStackOperator(k)
    n = spectral_norm(op, (1, 8, 8), tol=1e-10, max_iter=2000, seed=0).norm
    for _ in range(100):
        x = rng.standard_normal((1, 8, 8))
        assert np.linalg.norm(op.apply(x)) <= (n + 1e-8) * np.linalg.norm(x)


def test_spectral_norm_matches_adjoint_norm(rng):
    k = rng.normal(size=(4, 2, 3, 3))
    fwd = ConvStackOperator(k)

    class Adj:
        def apply(self, u):
            return fwd.adjoint(u)

        def adjoint(self, x):
            return fwd.apply(x)

    n1 = spectral_norm(fwd, (2, 8, 8), tol=1e-9, max_iter=3000, seed=0).norm
    n2 = spectral_norm(Adj(), (4, 8, 8), tol=1e-9, max_iter=3000, seed=0).norm
    assert abs(n1 - n2) < 1e-6


def test_blur_delta_identity(rng):
    x = rng.uniform(0, 1, (3, 8, 8))
    assert np.array_equal(blur_apply(blur_kernel("delta"), x), x)
    assert abs(spectral_norm(BlurOperator(blur_kernel("delta")), x.shape, tol=1e-9, max_iter=500, seed=0).norm - 1.0) < 1e-7


def test_blur_uniform3_interior_constant():
    x = np.full((1, 8, 8), 0.6)
    out = blur_apply(blur_kernel("uniform3"), x)
    assert np.allclose(out[0, 1:-1, 1:-1], 0.6)
    n = spectral_norm(BlurOperator(blur_kernel("uniform3")), (1, 16, 16), tol=1e-9, max_iter=1000, seed=0).norm
    assert n <= 1.0 + 1e-9


def test_blur_gauss5_adjoint(rng):
    op = BlurOperator(blur_kernel("gauss5-1.0"))
    assert adjoint_residual(op, (1, 12, 12), trials=10, seed=0) <= 1e-10


def test_blur_adjoint_is_exact(rng):
    k = blur_kernel("gauss5-1.0")
    x = rng.normal(size=(2, 9, 9))
    y = rng.normal(size=(2, 9, 9))
    assert abs(np.vdot(blur_apply(k, x), y) - np.vdot(x, blur_adjoint(k, y))) < 1e-12


def test_blur_kernel_names():
    assert blur_kernel("gauss5-1.0").shape == (5, 5)
    assert abs(blur_kernel("gauss5-1.0").sum() - 1.0) < 1e-12
    for bad in ("gauss4-1.0", "gauss5-0", "gauss5", "boxcar"):
        with pytest.raises(ValueError):
            blur_kernel(bad)


def test_blur_kernel_from_file(tmp_path):
    path = tmp_path / "k.txt"
    path.write_text("0.25 0.5 0.25\n0 0 0\n0 0 0\n")
    k = load_blur_kernel(path)
    assert k.shape == (3, 3) and k[0, 1] == 0.5


def test_nonneg_kernel_norm_bound(rng):
    # entries >= 0 summing to s: norm never exceeds s * sqrt(#taps)
    k = np.abs(rng.normal(size=(5, 5)))
    s = k.sum()
    n = spectral_norm(BlurOperator(k), (1, 12, 12), tol=1e-8, max_iter=2000, seed=0).norm
    assert n <= s * np.sqrt(k.size) + 1e-9


def test_grad_stack_shapes():
    k = grad_stack(3)
    assert k.shape == (6, 3, 3, 3)
    x = np.random.default_rng(0).uniform(0, 1, (3, 6, 6))
    out = conv_apply(k, x)
    assert out.shape == (6, 6, 6)
