"""Lipschitz certification of denoisers via Jacobian spectral norms.

For a piecewise-linear denoiser the Jacobian at a base point is exact once
the clip masks are frozen: applying it is a masked linear forward sweep and
its adjoint is the matching backward sweep, both driven by one recorded
tape. The certificate is the max norm over a set of probe inputs; the
residual-style upper bound multiplies the norms of every affine stage with
the observation carried through the state, so it dominates the Jacobian
norm for any model (and is typically far larger).
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import pnn_jvp, pnn_vjp
from .fileio import atomic_write_bytes, canonical_json, write_trace_csv
from .linops import spectral_norm
from .pnn import derive_scalars, pnn_forward

__all__ = [
    "JacobianProbe",
    "HMapOperator",
    "jacobian_probe",
    "jacobian_spectral_norm",
    "RobustnessReport",
    "lipschitz_estimate",
    "nonexpansiveness_score",
    "lipschitz_product_bound",
]


class JacobianProbe:
    """J f and its adjoint, frozen at one (z, nu) tape; apply/adjoint protocol."""

    def __init__(self, model, z, nu):
        self.model = model
        self.z = np.asarray(z, dtype=np.float64)
        self.nu = nu
        self.result = pnn_forward(model, self.z, nu, record_tape=True)
        self.in_shape = self.z.shape

    def apply(self, v):
        return pnn_jvp(self.model, self.result.tape, v)

    def adjoint(self, w):
        _, grad_z = pnn_vjp(
            self.model, self.z, self.nu, self.result.tape, w, want_params=False
        )
        return grad_z


class HMapOperator:
    """``2 J - Id`` of a Jacobian-like operator (the residual reflection)."""

    def __init__(self, probe):
        self.probe = probe
        self.in_shape = probe.in_shape

    def apply(self, v):
        return 2.0 * self.probe.apply(v) - v

    def adjoint(self, w):
        return 2.0 * self.probe.adjoint(w) - w


def jacobian_probe(model, z, nu):
    return JacobianProbe(model, z, nu)


def jacobian_spectral_norm(probe_or_model, z=None, nu=None, tol=1e-10, max_iter=2000, seed=0):
    """Spectral norm of the (frozen-mask) Jacobian by power iteration."""
    if z is not None:
        probe = JacobianProbe(probe_or_model, z, nu)
    else:
        probe = probe_or_model
    return spectral_norm(probe, probe.in_shape, tol=tol, max_iter=max_iter, seed=seed).norm


@dataclass
class RobustnessReport:
    """Per-sample Jacobian norms and their summary for one target map."""

    target: str  # "f" or "h"
    norms: list
    max: float
    median: float
    q1: float
    q3: float

    @classmethod
    def from_norms(cls, target, norms):
        arr = np.asarray(norms, dtype=np.float64)
        return cls(
            target=target,
            norms=[float(v) for v in arr],
            max=float(arr.max()),
            median=float(np.median(arr)),
            q1=float(np.quantile(arr, 0.25)),
            q3=float(np.quantile(arr, 0.75)),
        )

    def to_csv(self, path):
        write_trace_csv(path, ("sample", "norm"), list(enumerate(self.norms)))

    def to_json(self, path, extra=None):
        payload = {
            "target": self.target,
            "max": self.max,
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
        }
        if extra:
            payload.update(extra)
        atomic_write_bytes(path, (canonical_json(payload) + "\n").encode("utf-8"))


def _norms_over(model, samples, nu, target, seed):
    norms = []
    for i, z in enumerate(samples):
        nu_i = nu[i] if isinstance(nu, (list, tuple, np.ndarray)) else nu
        probe = JacobianProbe(model, z, nu_i)
        op = probe if target == "f" else HMapOperator(probe)
        norms.append(spectral_norm(op, probe.in_shape, tol=1e-10, max_iter=2000, seed=seed).norm)
    return norms


def lipschitz_estimate(model, samples, nu, seed=0):
    """Certificate report: per-sample ``||J f(z_s)||`` and their max."""
    if not len(samples):
        raise ValueError("need at least one probe sample")
    return RobustnessReport.from_norms("f", _norms_over(model, samples, nu, "f", seed))


def nonexpansiveness_score(model, samples, nu, seed=0):
    """Report for ``h = 2 f - Id``; score below 1 means firmly nonexpansive."""
    if not len(samples):
        raise ValueError("need at least one probe sample")
    return RobustnessReport.from_norms("h", _norms_over(model, samples, nu, "h", seed))


# --- stage-product upper bound -------------------------------------------------


class _StageOperator:
    """Linear map between lists of arrays, expressed on flat vectors."""

    def __init__(self, in_shapes, out_shapes, fwd, adj):
        self.in_shapes = in_shapes
        self.out_shapes = out_shapes
        self._fwd = fwd
        self._adj = adj
        self.in_size = int(sum(np.prod(s) for s in in_shapes))

    def _split(self, vec, shapes):
        out, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(vec[pos : pos + n].reshape(s))
            pos += n
        return out

    def apply(self, vec):
        parts = self._fwd(*self._split(np.asarray(vec).ravel(), self.in_shapes))
        return np.concatenate([p.ravel() for p in parts])

    def adjoint(self, vec):
        parts = self._adj(*self._split(np.asarray(vec).ravel(), self.out_shapes))
        return np.concatenate([p.ravel() for p in parts])


def _stage_norm(stage, seed=0):
    return spectral_norm(stage, (stage.in_size,), tol=1e-9, max_iter=2000, seed=seed).norm


def lipschitz_product_bound(model, in_shape):
    """Product of affine-stage norms dominating ``||J f(z)||`` at that shape.

    Each layer contributes its dual stage, its primal stage, and (when the
    architecture has one) its skip combination, all as joint operators on
    the stacked state with the observation carried through; activations are
    entrywise projections and never increase the bound.
    """
    from ._kernels import corr3x3_adj, corr3x3_fwd

    sc = derive_scalars(model, in_shape)
    kf = model.kernels_fwd
    ka = model.kernels_adj
    xs = tuple(in_shape)
    us = (model.J, in_shape[1], in_shape[2])

    k1 = kf[0]
    bound = _stage_norm(
        _StageOperator(
            [xs],
            [xs, us, xs],
            lambda v: (v, corr3x3_fwd(k1, v), v),
            lambda a, b, c: (a + corr3x3_adj(k1, b) + c,),
        )
    )

    for k in range(model.K):
        kern = kf[k]
        tau = float(sc["tau"][k])
        mu = float(sc["mu"][k])
        alpha = float(sc["alpha"][k])
        rho = float(sc["rho"][k])
        keep_u = model.arch == "ddifb"
        keep_x = model.arch in ("dcp", "dsccp")

        def dual_fwd(x, u, z, _k=kern, _t=tau, _keep=keep_u):
            p = _t * corr3x3_fwd(_k, x) + u
            return (x, p, u, z) if _keep else (x, p, z)

        def dual_adj(*cots, _k=kern, _t=tau, _keep=keep_u):
            if _keep:
                a, b, c, d = cots
                return (a + _t * corr3x3_adj(_k, b), b + c, d)
            a, b, d = cots
            return (a + _t * corr3x3_adj(_k, b), b, d)

        out_shapes = [xs, us, us, xs] if keep_u else [xs, us, xs]
        bound *= _stage_norm(_StageOperator([xs, us, xs], out_shapes, dual_fwd, dual_adj))

        def back_fwd(u, _k=k):
            return corr3x3_fwd(ka[_k], u) if ka is not None else corr3x3_adj(kf[_k], u)

        def back_adj(c, _k=k):
            return corr3x3_adj(ka[_k], c) if ka is not None else corr3x3_fwd(kf[_k], c)

        if keep_u:
            # (x, u~, u_prev, z) -> (q, u~, u_prev, z); q = z - D_P u~
            def primal_fwd(x, ut, up, z):
                return (z - back_fwd(ut), ut, up, z)

            def primal_adj(a, b, c, d):
                return (np.zeros(xs), b - back_adj(a), c, d + a)

            bound *= _stage_norm(
                _StageOperator([xs, us, us, xs], [xs, us, us, xs], primal_fwd, primal_adj)
            )
            # skip: (x, u~, u_prev, z) -> (x, (1+rho) u~ - rho u_prev, z)
            bound *= _stage_norm(
                _StageOperator(
                    [xs, us, us, xs],
                    [xs, us, xs],
                    lambda x, ut, up, z, _r=rho: (x, (1 + _r) * ut - _r * up, z),
                    lambda a, b, d, _r=rho: (a, (1 + _r) * b, -_r * b, d),
                )
            )
        elif keep_x:
            w = mu / (1.0 + mu)

            def primal_fwd(x, u, z, _w=w):
                return (_w * (z - back_fwd(u)) + (1 - _w) * x, u, x, z)

            def primal_adj(a, b, c, d, _w=w):
                return ((1 - _w) * a + c, b - _w * back_adj(a), d + _w * a)

            bound *= _stage_norm(
                _StageOperator([xs, us, xs], [xs, us, xs, xs], primal_fwd, primal_adj)
            )
            # skip: (x~, u, x_prev, z) -> ((1+alpha) x~ - alpha x_prev, u, z)
            bound *= _stage_norm(
                _StageOperator(
                    [xs, us, xs, xs],
                    [xs, us, xs],
                    lambda xt, u, xp, z, _a=alpha: ((1 + _a) * xt - _a * xp, u, z),
                    lambda a, b, d, _a=alpha: ((1 + _a) * a, b, -_a * a, d),
                )
            )
        else:
            # ddfb: (x, u~, z) -> (q, u~, z); q = z - D_P u~ (x is dropped)
            def primal_fwd(x, u, z):
                return (z - back_fwd(u), u, z)

            def primal_adj(a, b, d):
                return (np.zeros(xs), b - back_adj(a), d + a)

            bound *= _stage_norm(_StageOperator([xs, us, xs], [xs, us, xs], primal_fwd, primal_adj))

    return float(bound)
