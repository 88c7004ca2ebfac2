"""Exact reverse- and forward-mode differentiation of the unfolded networks.

The layers are piecewise linear (clamps) composed with affine maps whose
coefficients depend on a handful of scalars, so gradients are exact:
activation Jacobians are the recorded clip masks (boundary points count as
inactive), kernel gradients are correlation weight-gradients, and the
scalar chains (step sizes through operator norms, inertia through the
``mu`` recursions) are differentiated in closed form. The operator-norm
derivative uses the rank-1 identity ``d||D||/dD = u1 v1^T`` evaluated at
the converged singular pair; ``stop_grad_norm`` freezes that chain.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import corr3x3_adj, corr3x3_fwd, corr3x3_wgrad

__all__ = ["GradPack", "pnn_vjp", "pnn_jvp", "grad_check"]


@dataclass
class GradPack:
    """Gradient mirror of a model's learnable tensors."""

    kernels_fwd: np.ndarray
    kernels_adj: np.ndarray | None = None
    log_mu: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, model):
        return cls(
            kernels_fwd=np.zeros_like(model.kernels_fwd),
            kernels_adj=(
                None if model.kernels_adj is None else np.zeros_like(model.kernels_adj)
            ),
            log_mu=None if model.log_mu is None else np.zeros_like(model.log_mu),
        )

    def named(self):
        out = [("kernels_fwd", self.kernels_fwd)]
        if self.kernels_adj is not None:
            out.append(("kernels_adj", self.kernels_adj))
        if self.log_mu is not None:
            out.append(("log_mu", self.log_mu))
        return out

    def add_(self, other, scale=1.0):
        self.kernels_fwd += scale * other.kernels_fwd
        if self.kernels_adj is not None:
            self.kernels_adj += scale * other.kernels_adj
        if self.log_mu is not None:
            self.log_mu += scale * other.log_mu
        return self

    def scale_(self, s):
        self.kernels_fwd *= s
        if self.kernels_adj is not None:
            self.kernels_adj *= s
        if self.log_mu is not None:
            self.log_mu *= s
        return self

    def max_abs(self):
        m = float(np.max(np.abs(self.kernels_fwd))) if self.kernels_fwd.size else 0.0
        if self.kernels_adj is not None and self.kernels_adj.size:
            m = max(m, float(np.max(np.abs(self.kernels_adj))))
        if self.log_mu is not None and self.log_mu.size:
            m = max(m, float(np.max(np.abs(self.log_mu))))
        return m


def _check_tape(model, tape):
    if tape is None or len(tape.layers) != model.K:
        raise ValueError("tape does not match the model (record_tape on the same forward?)")


def pnn_vjp(model, z, nu, tape, cotangent, cot_u=None, want_params=True, stop_grad_norm=False):
    """Pull the output cotangent back to (parameter gradients, grad wrt z).

    ``cotangent`` weights the primal output ``x_K``; ``cot_u`` optionally
    weights the dual output. Every entry point of ``z`` contributes: the
    ``x_0`` path, the ``u_0 = D_1 z`` path (unless the tape's forward was
    warm-started), and each layer's data-injection term.
    """
    _check_tape(model, tape)
    z = np.asarray(z, dtype=np.float64)
    pack = GradPack.zeros_like(model) if want_params else None
    grad_z = np.zeros_like(z)
    cot_x = np.asarray(cotangent, dtype=np.float64).copy()
    cot_un = np.zeros_like(tape.layers[-1].u_tilde) if cot_u is None else cot_u.copy()

    # per-layer scalar-gradient accumulators, folded through the chains below
    g_tau = np.zeros(model.K)
    g_mu = np.zeros(model.K)
    g_alpha = np.zeros(model.K)

    untied = model.kernels_adj is not None
    for k in range(model.K - 1, -1, -1):
        r = tape.layers[k]
        kern = model.kernels_fwd[k]

        if model.arch == "dcp":
            cot_xt = 2.0 * cot_x
            cot_x_in = -cot_x
        elif model.arch == "dsccp":
            cot_xt = (1.0 + r.alpha) * cot_x
            cot_x_in = -r.alpha * cot_x
            g_alpha[k] = float(np.vdot(cot_x, r.x_tilde - r.x_in))
        else:
            cot_xt = cot_x
            cot_x_in = np.zeros_like(cot_x)

        cot_pre_x = np.where(r.mask_x, cot_xt, 0.0)
        if math.isinf(r.mu):
            grad_z += cot_pre_x
            cot_adj = -cot_pre_x
        else:
            w = r.mu / (1.0 + r.mu)
            grad_z += w * cot_pre_x
            cot_adj = -w * cot_pre_x
            cot_x_in += (1.0 - w) * cot_pre_x
            g_mu[k] = float(np.vdot(cot_pre_x, (z - r.adj_u) - r.x_in)) / (1.0 + r.mu) ** 2

        if untied:
            cot_ut = corr3x3_adj(model.kernels_adj[k], cot_adj)
            if want_params:
                pack.kernels_adj[k] += corr3x3_wgrad(cot_adj, r.u_tilde)
        else:
            cot_ut = corr3x3_fwd(kern, cot_adj)
            if want_params:
                pack.kernels_fwd[k] += corr3x3_wgrad(r.u_tilde, cot_adj)

        if model.arch == "ddifb":
            cot_ut += (1.0 + r.rho) * cot_un
            cot_u_in = -r.rho * cot_un
        else:
            cot_ut += cot_un
            cot_u_in = np.zeros_like(cot_un)

        cot_pre_u = np.where(r.mask_u, cot_ut, 0.0)
        cot_u_in += cot_pre_u
        g_tau[k] = float(np.vdot(cot_pre_u, r.w))
        cot_w = r.tau * cot_pre_u
        if want_params:
            pack.kernels_fwd[k] += corr3x3_wgrad(cot_w, r.x_in)
        cot_x_in += corr3x3_adj(kern, cot_w)

        cot_x, cot_un = cot_x_in, cot_u_in

    grad_z += cot_x  # x_0 = z
    if not tape.u0_external:
        grad_z += corr3x3_adj(model.kernels_fwd[0], cot_un)
        if want_params:
            pack.kernels_fwd[0] += corr3x3_wgrad(cot_un, z)

    if want_params:
        _fold_scalar_chains(model, tape, pack, g_tau, g_mu, g_alpha, stop_grad_norm)
    return pack, grad_z


def _fold_scalar_chains(model, tape, pack, g_tau, g_mu, g_alpha, stop_grad_norm):
    """Route tau/alpha gradients into kernels and log-mu parameters."""
    # inertia chain: alpha_k = (1 + 2 mu_k)^(-1/2)
    if model.arch == "dsccp":
        for k in range(model.K):
            a_k = tape.layers[k].alpha
            g_mu[k] += g_alpha[k] * (-(a_k**3))

    # step-size chain: tau_k = c / (mu? * ||D_k||^2)
    if model.variant == "lno":
        for k in range(model.K):
            r = tape.layers[k]
            if model.arch in ("dcp", "dsccp"):
                g_mu[k] += g_tau[k] * (-r.tau / r.mu)
            if not stop_grad_norm:
                n = r.norm.norm
                if n > 0:
                    dn = g_tau[k] * (-2.0 * r.tau / n)
                    pack.kernels_fwd[k] += dn * corr3x3_wgrad(r.norm.u1, r.norm.v1)

    if model.arch == "dcp":
        mu = tape.layers[0].mu
        pack.log_mu[0] += float(np.sum(g_mu)) * mu
    elif model.arch == "dsccp":
        if model.variant == "lno":
            for k in range(model.K):
                pack.log_mu[k] += g_mu[k] * tape.layers[k].mu
        else:
            # reverse the recursion mu_{k+1} = mu_k (1 + 2 mu_k)^(-1/2)
            g = 0.0
            for k in range(model.K - 1, -1, -1):
                r = tape.layers[k]
                g += g_mu[k]
                if k > 0:
                    prev = tape.layers[k - 1]
                    a_prev = prev.alpha
                    g *= a_prev * (1.0 - prev.mu * a_prev**2)
            pack.log_mu[0] += g * tape.layers[0].mu


def pnn_jvp(model, tape, v):
    """Push a z-direction through the network linearized at the tape.

    Masks and scalars are frozen at the base point, so this is the exact
    Jacobian-vector product wherever the forward map is differentiable.
    """
    _check_tape(model, tape)
    v = np.asarray(v, dtype=np.float64)
    x_d = v.copy()
    if tape.u0_external:
        u_d = np.zeros_like(tape.layers[0].u_in)
    else:
        u_d = corr3x3_fwd(model.kernels_fwd[0], v)
    untied = model.kernels_adj is not None
    for k in range(model.K):
        r = tape.layers[k]
        kern = model.kernels_fwd[k]
        pre_u_d = u_d + r.tau * corr3x3_fwd(kern, x_d)
        ut_d = np.where(r.mask_u, pre_u_d, 0.0)
        if untied:
            adj_d = corr3x3_fwd(model.kernels_adj[k], ut_d)
        else:
            adj_d = corr3x3_adj(kern, ut_d)
        if math.isinf(r.mu):
            pre_x_d = v - adj_d
        else:
            w = r.mu / (1.0 + r.mu)
            pre_x_d = w * (v - adj_d) + (1.0 - w) * x_d
        xt_d = np.where(r.mask_x, pre_x_d, 0.0)

        if model.arch == "ddifb":
            u_next = (1.0 + r.rho) * ut_d - r.rho * u_d
        else:
            u_next = ut_d
        if model.arch == "dcp":
            x_next = 2.0 * xt_d - x_d
        elif model.arch == "dsccp":
            x_next = (1.0 + r.alpha) * xt_d - r.alpha * x_d
        else:
            x_next = xt_d
        x_d, u_d = x_next, u_next
    return x_d


def _flat_params(model):
    """(name, array, flat_index) triples for coordinate addressing."""
    coords = []
    for name, arr in model.named_params():
        coords.extend((name, arr, i) for i in range(arr.size))
    return coords


def grad_check(model, z, nu, n_coords=60, fd_step=1e-5, seed=0, stop_grad_norm=False):
    """Max relative error of the analytic gradient against central differences.

    Checks ``<cot, x_K>`` for a fixed random cotangent on a random parameter
    subset. Coordinates whose finite-difference bracket flips any clip mask
    are excluded (the map is not differentiable across a kink), as are
    brackets whose norm-derived step sizes would be compared across a
    degenerate spectrum.
    """
    from .pnn import pnn_forward

    rng = np.random.default_rng(seed)
    base = pnn_forward(model, z, nu, record_tape=True)
    cot = rng.standard_normal(base.x.shape)
    pack, _ = pnn_vjp(model, z, nu, base.tape, cot, stop_grad_norm=stop_grad_norm)
    grads = dict(pack.named())

    coords = _flat_params(model)
    order = rng.permutation(len(coords))
    pairs = []
    checked = 0
    for idx in order:
        if checked >= n_coords:
            break
        name, arr, i = coords[idx]
        orig = arr.flat[i]
        arr.flat[i] = orig + fd_step
        up = pnn_forward(model, z, nu, record_tape=True)
        arr.flat[i] = orig - fd_step
        dn = pnn_forward(model, z, nu, record_tape=True)
        arr.flat[i] = orig
        stable = all(
            np.array_equal(a.mask_u, b.mask_u) and np.array_equal(a.mask_x, b.mask_x)
            for a, b in zip(up.tape.layers, dn.tape.layers)
        )
        if not stable:
            continue
        g_fd = (float(np.vdot(cot, up.x)) - float(np.vdot(cot, dn.x))) / (2.0 * fd_step)
        pairs.append((float(grads[name].flat[i]), g_fd))
        checked += 1

    if not pairs:
        return 0.0
    scale = max(max(abs(a) for a, _ in pairs), 1e-30)
    worst = 0.0
    for ga, gf in pairs:
        denom = max(abs(ga), abs(gf), 1e-6 * scale, 1e-12)
        worst = max(worst, abs(ga - gf) / denom)
    return worst
