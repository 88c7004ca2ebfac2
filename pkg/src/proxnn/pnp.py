"""Plug-and-play forward-backward deblurring with the unfolded denoisers.

Each outer iteration takes a gradient step on the data term
``0.5 ||A x - y||^2`` and hands the result to the denoiser at clip radius
``nu = lambda * gamma`` with ``lambda = (beta * sigma)**2``. Warm starting
feeds the previous dual state into the next denoiser call; with tied
weights and the theory-compliant step sizes the iterate residuals decrease
monotonically, which :func:`residual_monotonicity` checks.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .images import psnr
from .linops import blur_adjoint, blur_apply
from .pnn import pnn_forward

__all__ = [
    "PnpConfig",
    "PnpTrace",
    "grad_step",
    "pnp_fb",
    "residual_monotonicity",
    "beta_sweep",
]


@dataclass
class PnpConfig:
    """Step size, regularization strength, and iteration budget.

    ``gamma`` must sit in ``(0, 2/||A||^2)`` unless ``unsafe_gamma`` opts
    into the divergent regime on purpose. ``norm_A`` is the operator norm
    used by that guard (computed by the caller, typically power iteration).
    """

    gamma: float
    beta: float = 1.0
    sigma: float = 0.0
    iters: int = 500
    warm_start: bool = True
    unsafe_gamma: bool = False
    norm_A: float = 1.0
    residual_stop: float | None = None  # relative to ||y||; None disables

    @property
    def lam(self):
        return (self.beta * self.sigma) ** 2

    @property
    def nu(self):
        return self.lam * self.gamma

    def validate(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        limit = 2.0 / self.norm_A**2
        if self.gamma >= limit and not self.unsafe_gamma:
            raise ValueError(
                f"gamma = {self.gamma} violates the stability range (0, {limit:.6g}); "
                "pass unsafe_gamma to run the divergent regime anyway"
            )
        if not (self.beta > 0 and self.sigma >= 0 and self.iters >= 1):
            raise ValueError("beta > 0, sigma >= 0, iters >= 1 required")


@dataclass
class PnpTrace:
    psnr: list = field(default_factory=list)  # empty when no ground truth
    residual: list = field(default_factory=list)
    nu: float = 0.0

    def to_csv(self, path):
        from .fileio import write_trace_csv

        rows = [
            (t, self.psnr[t] if self.psnr else math.nan, self.residual[t])
            for t in range(len(self.residual))
        ]
        write_trace_csv(path, ("iter", "psnr", "residual"), rows)


def grad_step(x, kernel, y, gamma):
    """``x - gamma * A^T (A x - y)`` for the blur operator ``A``."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs y {y.shape}")
    return x - gamma * blur_adjoint(kernel, blur_apply(kernel, x) - y)


def pnp_fb(y, kernel, config, model, truth=None):
    """Run the PnP forward-backward loop; returns (restored, trace)."""
    config.validate()
    y = np.asarray(y, dtype=np.float64)
    nu = config.nu
    x = y.copy()
    u = None  # cold dual on the first call: denoiser uses u_0 = D_1 z
    trace = PnpTrace(nu=nu)
    stop = None if config.residual_stop is None else config.residual_stop * float(
        np.linalg.norm(y)
    )
    for _ in range(config.iters):
        z_t = grad_step(x, kernel, y, config.gamma)
        res = pnn_forward(model, z_t, nu, u0=u if config.warm_start else None)
        r = float(np.linalg.norm(res.x - x))
        x = res.x
        u = res.u
        trace.residual.append(r)
        if truth is not None:
            trace.psnr.append(psnr(truth, x))
        if stop is not None and r <= stop:
            break
    return x, trace


def residual_monotonicity(trace, slack=0.0):
    """Check ``r_{t+1} <= r_t + slack`` from the second transition on.

    Returns (ok, index of the first violating residual or None). The first
    transition is excluded: the monotone regime starts after one step.
    """
    r = trace.residual if isinstance(trace, PnpTrace) else list(trace)
    if len(r) < 3:
        raise ValueError("need at least 3 residuals to assess monotonicity")
    for t in range(2, len(r)):
        if r[t] > r[t - 1] + slack:
            return False, t
    return True, None


def beta_sweep(y, kernel, config, model, betas, truth):
    """Run :func:`pnp_fb` per beta; returns (rows, best_beta).

    Rows are (beta, final PSNR) in grid order; ties prefer the smaller beta.
    """
    if not len(betas):
        raise ValueError("beta grid must be nonempty")
    rows = []
    best_beta, best_val = None, -math.inf
    for beta in betas:
        cfg = PnpConfig(
            gamma=config.gamma,
            beta=float(beta),
            sigma=config.sigma,
            iters=config.iters,
            warm_start=config.warm_start,
            unsafe_gamma=config.unsafe_gamma,
            norm_A=config.norm_A,
            residual_stop=config.residual_stop,
        )
        x, _ = pnp_fb(y, kernel, cfg, model, truth=truth)
        val = psnr(truth, x)
        rows.append((float(beta), val))
        if val > best_val or (val == best_val and float(beta) < best_beta):
            best_beta, best_val = float(beta), val
    return rows, best_beta
