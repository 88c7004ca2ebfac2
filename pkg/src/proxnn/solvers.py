"""Reference convex solvers for the box-constrained l1-analysis denoiser.

The objective is ``F(x) = 0.5 ||x - z||^2 + nu ||D x||_1 + i_box(x)``.
Two routes are implemented: forward-backward on the dual (plain and
inertial) and the primal-dual scheme with a strongly convex data term
(plain and accelerated), plus the single joint dual-then-primal step the
unfolded networks are built from. Operators only need ``apply``/``adjoint``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .prox import BOX01, hardtanh, project_box

__all__ = [
    "SolverSchedule",
    "SolverTrace",
    "PrimalDualState",
    "objective_F",
    "difb_schedule",
    "sccp_schedule",
    "ah_schedule",
    "difb_solve",
    "sccp_solve",
    "ah_joint_step",
]

REGIMES = ("dfb", "difb", "cp", "sccp", "ah")


@dataclass
class SolverSchedule:
    """Per-iteration step sizes for one solver regime.

    ``mu`` may hold the ``inf`` sentinel (dual-only regimes); ``rho`` is the
    dual inertia, ``alpha`` the primal inertia. Arrays all have length K.
    """

    regime: str
    tau: np.ndarray
    rho: np.ndarray
    mu: np.ndarray
    alpha: np.ndarray
    a: float = 0.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        self.tau = np.asarray(self.tau, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        K = len(self.tau)
        if not (len(self.rho) == len(self.mu) == len(self.alpha) == K):
            raise ValueError("schedule arrays must share one length")
        if np.any(self.tau <= 0):
            raise ValueError("tau must be positive")
        if self.regime == "dfb" and np.any(self.rho != 0):
            raise ValueError("dfb regime requires rho = 0")
        if self.regime == "cp" and np.any(self.alpha != 1):
            raise ValueError("cp regime requires alpha = 1")
        if self.regime == "ah" and np.any(self.alpha != 0):
            raise ValueError("ah regime requires alpha = 0")
        if self.regime in ("cp", "sccp", "ah") and np.any(np.isinf(self.mu)):
            raise ValueError("mu = inf sentinel is only valid in dfb/difb regimes")

    def __len__(self):
        return len(self.tau)


@dataclass
class SolverTrace:
    """Per-iteration diagnostics; one row per executed iteration."""

    objective: list = field(default_factory=list)
    primal_change: list = field(default_factory=list)
    dual_change: list = field(default_factory=list)

    def append(self, F, dx, du):
        self.objective.append(float(F))
        self.primal_change.append(float(dx))
        self.dual_change.append(float(du))

    def __len__(self):
        return len(self.objective)

    def to_csv(self, path):
        from .fileio import write_trace_csv

        rows = [
            (i, self.objective[i], self.primal_change[i], self.dual_change[i])
            for i in range(len(self))
        ]
        write_trace_csv(path, ("iter", "F", "primal_change", "dual_change"), rows)


@dataclass
class PrimalDualState:
    x: np.ndarray
    u: np.ndarray
    x_prev: np.ndarray | None = None
    u_prev: np.ndarray | None = None
    k: int = 0


def objective_F(x, z, op, nu, box=BOX01, slack=1e-12):
    """``0.5||x-z||^2 + nu ||D x||_1`` if x sits in the box, else +inf."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {z.shape}")
    if not box.contains(x, slack=slack):
        return math.inf
    data = 0.5 * float(np.sum((x - z) ** 2))
    return data + nu * float(np.sum(np.abs(op.apply(x))))


def difb_schedule(a, normD, accelerated, K, k0=1):
    """Dual forward-backward step sizes.

    Plain: ``tau = 1.99 / normD**2`` with zero inertia. Accelerated:
    ``tau = 0.99 / normD**2`` and ``rho_k = (t_k - 1)/t_{k+1}`` with
    ``t_k = (k + a - 1)/a``, requiring ``a > 2``; the iteration counter
    starts at ``k0`` (default 1, making ``rho_1 = 0``).
    """
    if not normD > 0:
        raise ValueError("normD must be > 0")
    if accelerated:
        if not a > 2:
            raise ValueError(f"inertial schedule requires a > 2, got {a}")
        tau = np.full(K, 0.99 / normD**2)
        ks = np.arange(k0, k0 + K, dtype=np.float64)
        t_k = (ks + a - 1.0) / a
        t_k1 = (ks + a) / a
        rho = (t_k - 1.0) / t_k1
        regime = "difb"
    else:
        tau = np.full(K, 1.99 / normD**2)
        rho = np.zeros(K)
        regime = "dfb"
    return SolverSchedule(regime, tau, rho, np.full(K, math.inf), np.zeros(K), a=a)


def sccp_schedule(mu0, normD, accelerated, K):
    """Primal-dual step sizes for the strongly convex data term.

    Plain: constant ``mu``, ``tau = 0.99/(mu*normD**2)``, ``alpha = 1``.
    Accelerated: ``alpha_k = (1+2 mu_k)^{-1/2}``, ``mu_{k+1} = alpha_k mu_k``,
    ``tau_{k+1} = tau_k / alpha_k`` from ``tau_0 = 0.99/(mu_0 normD**2)``.
    """
    if not (mu0 > 0 and normD > 0):
        raise ValueError("mu0 and normD must be > 0")
    if not accelerated:
        tau = np.full(K, 0.99 / (mu0 * normD**2))
        return SolverSchedule("cp", tau, np.zeros(K), np.full(K, mu0), np.ones(K))
    tau = np.empty(K)
    mu = np.empty(K)
    alpha = np.empty(K)
    tau_k, mu_k = 0.99 / (mu0 * normD**2), mu0
    for k in range(K):
        tau[k], mu[k] = tau_k, mu_k
        alpha[k] = 1.0 / math.sqrt(1.0 + 2.0 * mu_k)
        mu_k = alpha[k] * mu_k
        tau_k = tau_k / alpha[k]
    return SolverSchedule("sccp", tau, np.zeros(K), mu, alpha)


def ah_schedule(mu, normD, K):
    """Zero-inertia joint iteration with constant small mu."""
    if not (mu > 0 and normD > 0):
        raise ValueError("mu and normD must be > 0")
    tau = np.full(K, 0.99 / (mu * normD**2))
    return SolverSchedule("ah", tau, np.zeros(K), np.full(K, mu), np.zeros(K))


def _rel_change(new, old):
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(new), 1.0))


def difb_solve(z, op, nu, box=BOX01, schedule=None, K=None, tol=1e-10, trace=True):
    """Forward-backward on the dual problem, from a zero dual start.

    Iterates ``u <- clamp(v + tau * D P(z - D^T v), nu)`` followed by the
    inertial combination ``v <- (1+rho) u - rho u_prev``; the primal
    estimate is ``P(z - D^T u)``. Stops early once the relative primal
    change drops below ``tol``.
    """
    if schedule is None:
        raise ValueError("difb_solve needs a schedule (see difb_schedule)")
    if schedule.regime not in ("dfb", "difb"):
        raise ValueError(f"schedule regime {schedule.regime!r} is not dual forward-backward")
    z = np.asarray(z, dtype=np.float64)
    K = len(schedule) if K is None else min(K, len(schedule))
    u = np.zeros_like(op.apply(z))
    v = u.copy()
    x = project_box(z - op.adjoint(u), box)
    tr = SolverTrace() if trace else None
    for k in range(K):
        u_prev, x_prev = u, x
        u = hardtanh(v + schedule.tau[k] * op.apply(project_box(z - op.adjoint(v), box)), nu)
        v = (1.0 + schedule.rho[k]) * u - schedule.rho[k] * u_prev
        x = project_box(z - op.adjoint(u), box)
        dx, du = _rel_change(x, x_prev), _rel_change(u, u_prev)
        if tr is not None:
            tr.append(objective_F(x, z, op, nu, box), dx, float(np.linalg.norm(u - u_prev)))
        if max(dx, du) < tol:
            break
    return x, tr


def sccp_solve(z, op, nu, box=BOX01, schedule=None, K=None, tol=1e-10, trace=True):
    """Primal-dual iterations from ``x = P(z)``, ``u = 0``.

    Primal step ``x <- P(mu/(1+mu) (z - D^T u) + x/(1+mu))`` then dual step
    ``u <- clamp(u + tau * D((1+alpha) x - alpha x_prev), nu)``.
    """
    if schedule is None:
        raise ValueError("sccp_solve needs a schedule (see sccp_schedule)")
    if schedule.regime not in ("cp", "sccp", "ah"):
        raise ValueError(f"schedule regime {schedule.regime!r} is not primal-dual")
    z = np.asarray(z, dtype=np.float64)
    K = len(schedule) if K is None else min(K, len(schedule))
    x = project_box(z, box)
    u = np.zeros_like(op.apply(z))
    tr = SolverTrace() if trace else None
    for k in range(K):
        mu_k, tau_k, alpha_k = schedule.mu[k], schedule.tau[k], schedule.alpha[k]
        x_prev, u_prev = x, u
        w = mu_k / (1.0 + mu_k)
        x = project_box(w * (z - op.adjoint(u)) + (1.0 - w) * x, box)
        u = hardtanh(u + tau_k * op.apply((1.0 + alpha_k) * x - alpha_k * x_prev), nu)
        dx, du = _rel_change(x, x_prev), _rel_change(u, u_prev)
        if tr is not None:
            tr.append(objective_F(x, z, op, nu, box), dx, float(np.linalg.norm(u - u_prev)))
        if max(dx, du) < tol:
            break
    return x, tr


def ah_joint_step(state, tau_k, mu_k, z, op, nu, box=BOX01):
    """One dual-then-primal joint step; ``mu = inf`` drops the primal memory.

    ``u+ = clamp(u + tau D x, nu)`` then
    ``x+ = P(mu/(1+mu) (z - D^T u+) + x/(1+mu))`` (``P(z - D^T u+)`` at the
    infinite-mu sentinel).
    """
    u_new = hardtanh(state.u + tau_k * op.apply(state.x), nu)
    back = z - op.adjoint(u_new)
    if math.isinf(mu_k):
        x_new = project_box(back, box)
    else:
        w = mu_k / (1.0 + mu_k)
        x_new = project_box(w * back + (1.0 - w) * state.x, box)
    return PrimalDualState(x=x_new, u=u_new, x_prev=state.x, u_prev=state.u, k=state.k + 1)
