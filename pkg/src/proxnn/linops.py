"""Linear operators: analysis convolution stacks, blurs, and spectral norms.

Conventions fixed here and relied on everywhere else:

* images are (C, H, W) float64 arrays, feature maps are (J, H, W);
* a convolution stack is a (J, C, 3, 3) kernel array applied by
  cross-correlation (no kernel flip) with zero padding and "same" output;
* the tied adjoint is the exact transpose of that map; an untied stack is
  a second (C, J, 3, 3) kernel array applied by plain correlation from the
  feature space back to the image space.

Every solver and probe in the package talks to operators through the
``apply``/``adjoint`` pair, so dense matrices and blurs plug in the same way.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._kernels import corr3x3_adj, corr3x3_fwd

__all__ = [
    "AdjointPolicy",
    "ConvStackOperator",
    "MatrixOperator",
    "BlurOperator",
    "conv_apply",
    "conv_adjoint_apply",
    "adjoint_residual",
    "SpectralResult",
    "spectral_norm",
    "blur_apply",
    "blur_adjoint",
    "blur_kernel",
    "load_blur_kernel",
    "grad_stack",
    "flipped_adjoint_stack",
]


def _check_stack(kernels):
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ValueError(f"convolution stack must be (J, C, 3, 3), got {kernels.shape}")
    if not np.all(np.isfinite(kernels)):
        raise ValueError("convolution stack has non-finite entries")
    return kernels


@dataclass(frozen=True)
class AdjointPolicy:
    """Tied (exact transpose) or untied (independently parameterized) adjoint.

    The untied stack has shape (C, J, 3, 3) and maps feature maps back to
    images by plain correlation; it mirrors the forward stack's parameter
    count but is generally not the true adjoint.
    """

    mode: str = "tied"
    untied_stack: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("tied", "untied"):
            raise ValueError(f"unknown adjoint mode {self.mode!r}")
        if (self.mode == "untied") != (self.untied_stack is not None):
            raise ValueError("untied stack must be present iff mode='untied'")
        if self.untied_stack is not None:
            object.__setattr__(self, "untied_stack", _check_stack(self.untied_stack))


TIED = AdjointPolicy("tied")


def conv_apply(kernels, x):
    """Apply the analysis stack: (C, H, W) -> (J, H, W)."""
    kernels = _check_stack(kernels)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != kernels.shape[1]:
        raise ValueError(f"image {x.shape} does not match stack {kernels.shape}")
    return corr3x3_fwd(kernels, x)


def conv_adjoint_apply(kernels, policy, u):
    """Map a feature array back to image space, tied or untied."""
    kernels = _check_stack(kernels)
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3 or u.shape[0] != kernels.shape[0]:
        raise ValueError(f"features {u.shape} do not match stack {kernels.shape}")
    if policy.mode == "tied":
        return corr3x3_adj(kernels, u)
    untied = policy.untied_stack
    if untied.shape[1] != kernels.shape[0] or untied.shape[0] != kernels.shape[1]:
        raise ValueError(
            f"untied stack {untied.shape} does not mirror forward stack {kernels.shape}"
        )
    return corr3x3_fwd(untied, u)


def flipped_adjoint_stack(kernels):
    """(C, J, 3, 3) stack whose plain correlation equals the tied adjoint."""
    from ._kernels import flip_transpose

    return flip_transpose(_check_stack(kernels))


class ConvStackOperator:
    """Analysis stack as an apply/adjoint operator on (C, H, W) images."""

    def __init__(self, kernels, policy=TIED):
        self.kernels = _check_stack(kernels)
        self.policy = policy

    def apply(self, x):
        return conv_apply(self.kernels, x)

    def adjoint(self, u):
        return conv_adjoint_apply(self.kernels, self.policy, u)


class MatrixOperator:
    """Dense matrix acting between flattened arrays of declared shapes."""

    def __init__(self, mat, in_shape, out_shape=None):
        self.mat = np.asarray(mat, dtype=np.float64)
        self.in_shape = tuple(in_shape)
        if out_shape is None:
            out_shape = (self.mat.shape[0],)
        self.out_shape = tuple(out_shape)
        if self.mat.shape != (int(np.prod(self.out_shape)), int(np.prod(self.in_shape))):
            raise ValueError("matrix shape does not match declared in/out shapes")

    def apply(self, x):
        return (self.mat @ np.asarray(x, dtype=np.float64).ravel()).reshape(self.out_shape)

    def adjoint(self, u):
        return (self.mat.T @ np.asarray(u, dtype=np.float64).ravel()).reshape(self.in_shape)


def adjoint_residual(op, in_shape, trials=10, seed=0):
    """Largest normalized adjoint defect over random probe pairs.

    ``max |<op x, u> - <x, op^T u>| / (||op x|| ||u|| + tiny)``; tied stacks
    and blurs sit at round-off, untied stacks report their actual mismatch.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(in_shape)
        ox = op.apply(x)
        u = rng.standard_normal(ox.shape)
        lhs = float(np.vdot(ox, u))
        rhs = float(np.vdot(x, op.adjoint(u)))
        denom = float(np.linalg.norm(ox) * np.linalg.norm(u)) + 1e-300
        worst = max(worst, abs(lhs - rhs) / denom)
    return worst


@dataclass
class SpectralResult:
    norm: float
    u1: np.ndarray  # leading left vector, lives in the operator's range
    v1: np.ndarray  # leading right vector, lives in the operator's domain
    iterations: int
    converged: bool

    def __float__(self):
        return self.norm


def spectral_norm(op, in_shape, tol=1e-6, max_iter=500, seed=0, v0=None):
    """Largest singular value of ``op`` by power iteration on ``op^T op``.

    Returns the norm estimate together with the converged singular pair
    (``u1 = op(v1)/||op(v1)||``). ``v0`` warm-starts the iteration. A start
    vector landing in the null space triggers one reseeded restart before
    declaring the operator zero.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    starts = ([np.asarray(v0, dtype=np.float64)] if v0 is not None else []) + [None, None]
    for attempt, start in enumerate(starts):
        if start is None:
            rng = np.random.default_rng(seed + attempt)
            v = rng.standard_normal(in_shape)
        else:
            v = start
        nv = float(np.linalg.norm(v))
        if nv == 0.0:
            continue
        v = v / nv
        est_prev = np.inf
        for it in range(1, max_iter + 1):
            v_used = v
            w = op.apply(v_used)
            s = float(np.linalg.norm(w))
            if s == 0.0:
                break  # null-space start: reseed and retry once
            u = w / s
            if abs(s - est_prev) < tol:
                return SpectralResult(s, u, v_used, it, True)
            est_prev = s
            back = op.adjoint(u)
            nb = float(np.linalg.norm(back))
            if nb == 0.0:
                break  # impossible for s > 0; guard against degenerate ops
            v = back / nb
        else:
            return SpectralResult(s, u, v_used, max_iter, False)
    zero_in = np.zeros(in_shape)
    return SpectralResult(0.0, np.zeros_like(op.apply(zero_in)), zero_in, 0, True)


# --- blur operators ---------------------------------------------------------


def _check_blur(kernel):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ValueError(f"blur kernel must be 2-D with odd sides, got {kernel.shape}")
    if not np.all(np.isfinite(kernel)):
        raise ValueError("blur kernel has non-finite entries")
    return kernel


def blur_apply(kernel, x):
    """Channel-wise cross-correlation with zero padding."""
    kernel = _check_blur(kernel)
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        ndimage.correlate(x[c], kernel, output=out[c], mode="constant", cval=0.0)
    return out


def blur_adjoint(kernel, y):
    """Exact adjoint of :func:`blur_apply` (correlation with flipped kernel)."""
    return blur_apply(np.ascontiguousarray(_check_blur(kernel)[::-1, ::-1]), y)


class BlurOperator:
    def __init__(self, kernel):
        self.kernel = _check_blur(kernel)

    def apply(self, x):
        return blur_apply(self.kernel, x)

    def adjoint(self, y):
        return blur_adjoint(self.kernel, y)


def blur_kernel(name):
    """Named built-ins: ``delta``, ``uniform3``, ``gauss{size}-{std}``."""
    if name == "delta":
        k = np.zeros((1, 1))
        k[0, 0] = 1.0
        return k
    if name == "uniform3":
        return np.full((3, 3), 1.0 / 9.0)
    if name.startswith("gauss"):
        body = name[len("gauss") :]
        try:
            size_s, std_s = body.split("-", 1)
            size, std = int(size_s), float(std_s)
        except ValueError:
            raise ValueError(f"malformed gaussian kernel name {name!r}") from None
        if size % 2 == 0 or size < 1 or std <= 0:
            raise ValueError(f"gaussian kernel needs odd size and std > 0, got {name!r}")
        r = np.arange(size) - size // 2
        g = np.exp(-0.5 * (r / std) ** 2)
        k = np.outer(g, g)
        return k / k.sum()
    raise ValueError(f"unknown blur kernel {name!r}")


def load_blur_kernel(path):
    """Read a kernel from a plain-text matrix file (rows of decimals)."""
    k = np.loadtxt(path, ndmin=2)
    return _check_blur(k)


def grad_stack(channels=1):
    """Finite-difference stack: horizontal and vertical forward differences
    per channel, the TV-style built-in analysis operator."""
    J = 2 * channels
    k = np.zeros((J, channels, 3, 3))
    for c in range(channels):
        k[2 * c, c, 1, 1] = 1.0
        k[2 * c, c, 1, 2] = -1.0  # horizontal: x[p] - x[p + right]
        k[2 * c + 1, c, 1, 1] = 1.0
        k[2 * c + 1, c, 2, 1] = -1.0  # vertical: x[p] - x[p + down]
    return k
