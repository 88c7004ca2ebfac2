"""Unfolded primal-dual denoising networks.

Four architectures built from one dual-then-primal block:

* ``ddfb``   dual forward-backward layers (no primal memory),
* ``ddifb``  the same with a dual skip connection,
* ``dcp``    primal-dual layers with primal over-relaxation ``2 x~ - x``,
* ``dsccp``  primal-dual layers with inertial primal skip
  ``(1+alpha) x~ - alpha x``;

each in two parameterizations:

* ``lno``  tied adjoints; step sizes derived from the per-layer operator
  norms (``tau = 1.99/||D_k||^2`` for ddfb, ``0.99/||D_k||^2`` for ddifb,
  ``0.99/(mu ||D_k||^2)`` for the primal-dual pair),
* ``lfo``  untied adjoint stacks and unit step absorbed into the kernels.

The forward pass can record an activation tape (inputs, clip masks, and
scalar intermediates per layer) that drives the exact reverse-mode
differentiation and the Jacobian probes in the sibling modules.
"""

import hashlib
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import linalg as sparse_linalg

from . import fileio
from ._kernels import corr3x3_adj, corr3x3_fwd
from ._kernels import raw as kernels_raw
from .linops import ConvStackOperator, SpectralResult, spectral_norm
from .prox import BoxConstraint

__all__ = [
    "ARCHS",
    "VARIANTS",
    "PnnModel",
    "init_pnn",
    "ForwardResult",
    "LayerRecord",
    "Tape",
    "dual_sublayer",
    "primal_sublayer",
    "pnn_forward",
    "param_count",
    "save_model",
    "load_model",
    "model_meta",
]

ARCHS = ("ddfb", "ddifb", "dcp", "dsccp")
VARIANTS = ("lno", "lfo")

# Lanczos residual tolerance for step-size norms: tight enough that the
# rank-1 kernel gradients of the derived tau pass 1e-4 finite-difference
# checks with margin, loose enough for per-step refreshes during training
NORM_EIGSH_TOL = 1e-11


def _leading_pair(kernels, in_shape, v0=None, seed=0):
    """Leading singular pair of a conv stack to Lanczos precision.

    Conv stacks have clustered spectra, so plain power iteration stalls;
    the derived step sizes and their exact rank-1 kernel gradients need the
    converged pair, which Lanczos on ``D^T D`` delivers in a few dozen
    operator applications. Falls back to long power iteration if ARPACK
    fails to settle.
    """
    kern_c = np.ascontiguousarray(kernels, dtype=np.float64)
    n = int(np.prod(in_shape))
    if n >= 3:

        def mv(vec):
            x = vec.reshape(in_shape)
            return kernels_raw.corr3x3_adj(kern_c, kernels_raw.corr3x3_fwd(kern_c, x)).ravel()

        if v0 is None:
            v0 = np.random.default_rng(seed).standard_normal(n)
        else:
            v0 = np.asarray(v0, dtype=np.float64).ravel()
        A = sparse_linalg.LinearOperator((n, n), matvec=mv, dtype=np.float64)
        try:
            vals, vecs = sparse_linalg.eigsh(A, k=1, which="LA", v0=v0, tol=NORM_EIGSH_TOL)
            v1 = vecs[:, 0].reshape(in_shape)
            w = kernels_raw.corr3x3_fwd(kern_c, v1)
            s = float(np.linalg.norm(w))
            if s > 0:
                return SpectralResult(s, w / s, v1, 0, True)
            return SpectralResult(0.0, np.zeros_like(w), v1, 0, True)
        except sparse_linalg.ArpackError:
            pass
    return spectral_norm(ConvStackOperator(kernels), in_shape, tol=1e-13, max_iter=100000, seed=seed)


def _mu_shape(arch, variant, K):
    """Learnable positive-scalar slots per architecture/parameterization."""
    if arch in ("ddfb", "ddifb"):
        return 0
    if arch == "dcp":
        return 1  # one shared mu
    return K if variant == "lno" else 1  # dsccp: per-layer mu, or mu_0 only


class _NormCache:
    """Digest-keyed spectral norms of the per-layer stacks, with warm starts.

    Values are pure functions of the kernel bytes, so concurrent readers
    are safe behind a single lock.
    """

    def __init__(self, maxsize=64):
        self._results = OrderedDict()
        self._warm = {}
        self.maxsize = maxsize
        self._lock = threading.Lock()

    def get(self, kernels, in_shape, warm_key=None):
        key = (hashlib.blake2b(kernels.tobytes(), digest_size=16).digest(), kernels.shape, in_shape)
        with self._lock:
            hit = self._results.get(key)
            if hit is not None:
                self._results.move_to_end(key)
                return hit
            warm = self._warm.get((warm_key, kernels.shape, in_shape))
        res = _leading_pair(
            kernels,
            in_shape,
            v0=warm,
            seed=int.from_bytes(key[0][:4], "little"),
        )
        with self._lock:
            self._results[key] = res
            self._warm[(warm_key, kernels.shape, in_shape)] = res.v1
            while len(self._results) > self.maxsize:
                self._results.popitem(last=False)
        return res


@dataclass
class PnnModel:
    """Architecture kind, parameterization, and all learnable tensors.

    ``kernels_fwd`` is (K, J, C, 3, 3); ``kernels_adj`` is the untied
    (K, C, J, 3, 3) stack and exists only for ``lfo``. Positive scalars are
    carried as ``log_mu`` so unconstrained updates keep ``mu > 0``:
    one shared entry for ``dcp``, per-layer entries for ``dsccp``-``lno``,
    and the starting value of the inertial recursion for ``dsccp``-``lfo``.
    ``a`` is the fixed dual-inertia offset of ``ddifb``.
    """

    arch: str
    variant: str
    K: int
    J: int
    C: int
    kernels_fwd: np.ndarray
    kernels_adj: np.ndarray | None = None
    log_mu: np.ndarray | None = None
    a: float = 3.0
    box: BoxConstraint = field(default_factory=BoxConstraint)
    _norms: _NormCache = field(default_factory=_NormCache, repr=False, compare=False)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown parameterization {self.variant!r}")
        self.kernels_fwd = np.ascontiguousarray(self.kernels_fwd, dtype=np.float64)
        if self.kernels_fwd.shape != (self.K, self.J, self.C, 3, 3):
            raise ValueError(
                f"forward kernels must be {(self.K, self.J, self.C, 3, 3)}, "
                f"got {self.kernels_fwd.shape}"
            )
        if self.variant == "lfo":
            if self.kernels_adj is None:
                raise ValueError("lfo models carry an untied adjoint stack")
            self.kernels_adj = np.ascontiguousarray(self.kernels_adj, dtype=np.float64)
            if self.kernels_adj.shape != (self.K, self.C, self.J, 3, 3):
                raise ValueError(
                    f"untied kernels must be {(self.K, self.C, self.J, 3, 3)}, "
                    f"got {self.kernels_adj.shape}"
                )
        elif self.kernels_adj is not None:
            raise ValueError("lno models tie the adjoint; no untied stack allowed")
        n_mu = _mu_shape(self.arch, self.variant, self.K)
        if n_mu == 0:
            if self.log_mu is not None:
                raise ValueError(f"{self.arch} has no mu parameters")
        else:
            if self.log_mu is None:
                raise ValueError(f"{self.arch}-{self.variant} needs {n_mu} log_mu entries")
            self.log_mu = np.ascontiguousarray(self.log_mu, dtype=np.float64)
            if self.log_mu.shape != (n_mu,):
                raise ValueError(f"log_mu must have shape ({n_mu},), got {self.log_mu.shape}")

    def named_params(self):
        """Learnable tensors in a fixed order (arrays are live references)."""
        out = [("kernels_fwd", self.kernels_fwd)]
        if self.kernels_adj is not None:
            out.append(("kernels_adj", self.kernels_adj))
        if self.log_mu is not None:
            out.append(("log_mu", self.log_mu))
        return out

    def layer_norm(self, k, in_shape):
        """Cached spectral norm record of layer ``k``'s forward stack."""
        return self._norms.get(self.kernels_fwd[k], in_shape, warm_key=k)

    def copy(self):
        return PnnModel(
            arch=self.arch,
            variant=self.variant,
            K=self.K,
            J=self.J,
            C=self.C,
            kernels_fwd=self.kernels_fwd.copy(),
            kernels_adj=None if self.kernels_adj is None else self.kernels_adj.copy(),
            log_mu=None if self.log_mu is None else self.log_mu.copy(),
            a=self.a,
            box=self.box,
        )


def init_pnn(arch, variant, K, J, C, seed=0, box=None, a=3.0):
    """Fresh model: kernels i.i.d. uniform in +-1/sqrt(9 C), mu = 1."""
    rng = np.random.default_rng(seed)
    lim = 1.0 / math.sqrt(9.0 * C)
    kf = rng.uniform(-lim, lim, size=(K, J, C, 3, 3))
    ka = rng.uniform(-lim, lim, size=(K, C, J, 3, 3)) if variant == "lfo" else None
    n_mu = _mu_shape(arch, variant, K)
    log_mu = np.zeros(n_mu) if n_mu else None
    return PnnModel(
        arch=arch,
        variant=variant,
        K=K,
        J=J,
        C=C,
        kernels_fwd=kf,
        kernels_adj=ka,
        log_mu=log_mu,
        a=a,
        box=box if box is not None else BoxConstraint(),
    )


# --- per-layer scalar derivation ------------------------------------------------


def derive_scalars(model, in_shape):
    """Resolve (tau, mu, alpha, rho) per layer plus the norm records.

    Returns a dict of K-vectors; ``mu`` holds ``inf`` for the dual-only
    architectures, ``norms`` is a list of SpectralResult or None (lfo).
    """
    K = model.K
    tau = np.ones(K)
    mu = np.full(K, math.inf)
    alpha = np.zeros(K)
    rho = np.zeros(K)
    norms = [None] * K
    if model.variant == "lno":
        norms = [model.layer_norm(k, in_shape) for k in range(K)]
        n2 = np.array([max(r.norm, 1e-300) ** 2 for r in norms])
    if model.arch == "ddfb":
        if model.variant == "lno":
            tau = 1.99 / n2
    elif model.arch == "ddifb":
        if model.variant == "lno":
            tau = 0.99 / n2
        ks = np.arange(1, K + 1, dtype=np.float64)
        rho = (ks - 1.0) / (ks + model.a)
    elif model.arch == "dcp":
        mu[:] = math.exp(model.log_mu[0])
        alpha[:] = 1.0
        if model.variant == "lno":
            tau = 0.99 / (mu * n2)
    else:  # dsccp
        if model.variant == "lno":
            mu = np.exp(model.log_mu)
            tau = 0.99 / (mu * n2)
        else:
            m = math.exp(model.log_mu[0])
            for k in range(K):
                mu[k] = m
                m = m / math.sqrt(1.0 + 2.0 * m)
        alpha = 1.0 / np.sqrt(1.0 + 2.0 * mu)
    return {"tau": tau, "mu": mu, "alpha": alpha, "rho": rho, "norms": norms}


# --- sublayers -------------------------------------------------------------------


def dual_sublayer(x, u, kernels, tau_k, nu):
    """``clamp(u + tau_k * D x, nu)``: the feature-domain half of a layer."""
    if nu < 0:
        raise ValueError("nu must be >= 0")
    pre = u + tau_k * corr3x3_fwd(kernels, x)
    if math.isinf(nu):
        return pre
    return np.clip(pre, -nu, nu)


def primal_sublayer(x, u, kernels, mu_k, z, box=BoxConstraint(), untied=None):
    """``P_box(mu/(1+mu) (z - D^T u) + x/(1+mu))``; ``mu = inf`` drops ``x``."""
    back = corr3x3_fwd(untied, u) if untied is not None else corr3x3_adj(kernels, u)
    if math.isinf(mu_k):
        pre = z - back
    else:
        w = mu_k / (1.0 + mu_k)
        pre = w * (z - back) + (1.0 - w) * x
    return np.clip(pre, box.lo, box.hi)


# --- forward pass ----------------------------------------------------------------


@dataclass
class LayerRecord:
    """Everything the backward pass needs about one executed layer."""

    x_in: np.ndarray
    u_in: np.ndarray
    w: np.ndarray  # D_k x_in, before the tau scaling
    mask_u: np.ndarray
    u_tilde: np.ndarray
    adj_u: np.ndarray  # image-space pullback of u_tilde
    mask_x: np.ndarray
    x_tilde: np.ndarray
    tau: float
    mu: float
    alpha: float
    rho: float
    norm: object = None  # SpectralResult for lno layers


@dataclass
class Tape:
    z: np.ndarray
    nu: float
    u0_external: bool
    scalars: dict
    layers: list


@dataclass
class ForwardResult:
    x: np.ndarray
    u: np.ndarray
    x_tilde: np.ndarray
    tape: Tape | None = None


def pnn_forward(model, z, nu, u0=None, record_tape=False, scalars=None):
    """Run the K unfolded layers on observation ``z`` at clip radius ``nu``.

    Starts from ``x_0 = z`` and ``u_0 = D_1 z`` unless ``u0`` overrides the
    dual state (warm starts). ``scalars`` injects a precomputed
    (tau, mu, alpha, rho) table, bypassing the model's own derivation; this
    is how schedule degeneracies are exercised.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] != model.C:
        raise ValueError(f"observation {z.shape} does not match model C={model.C}")
    if not (nu >= 0):
        raise ValueError(f"nu must be >= 0, got {nu}")
    if scalars is None:
        scalars = derive_scalars(model, z.shape)
    box = model.box
    x = z.copy()
    u = corr3x3_fwd(model.kernels_fwd[0], z) if u0 is None else np.asarray(u0, dtype=np.float64)
    records = [] if record_tape else None
    x_tilde = x
    for k in range(model.K):
        kern = model.kernels_fwd[k]
        tau_k = float(scalars["tau"][k])
        mu_k = float(scalars["mu"][k])
        alpha_k = float(scalars["alpha"][k])
        rho_k = float(scalars["rho"][k])

        w = corr3x3_fwd(kern, x)
        pre_u = u + tau_k * w
        if math.isinf(nu):
            mask_u = np.ones_like(pre_u, dtype=bool)
            u_tilde = pre_u
        else:
            mask_u = np.abs(pre_u) < nu
            u_tilde = np.clip(pre_u, -nu, nu)

        if model.kernels_adj is not None:
            adj_u = corr3x3_fwd(model.kernels_adj[k], u_tilde)
        else:
            adj_u = corr3x3_adj(kern, u_tilde)
        if math.isinf(mu_k):
            pre_x = z - adj_u
        else:
            wgt = mu_k / (1.0 + mu_k)
            pre_x = wgt * (z - adj_u) + (1.0 - wgt) * x
        mask_x = (pre_x > box.lo) & (pre_x < box.hi)
        x_tilde = np.clip(pre_x, box.lo, box.hi)

        if model.arch == "ddifb":
            u_next = (1.0 + rho_k) * u_tilde - rho_k * u
        else:
            u_next = u_tilde
        if model.arch == "dcp":
            x_next = 2.0 * x_tilde - x
        elif model.arch == "dsccp":
            x_next = (1.0 + alpha_k) * x_tilde - alpha_k * x
        else:
            x_next = x_tilde

        if record_tape:
            records.append(
                LayerRecord(
                    x_in=x,
                    u_in=u,
                    w=w,
                    mask_u=mask_u,
                    u_tilde=u_tilde,
                    adj_u=adj_u,
                    mask_x=mask_x,
                    x_tilde=x_tilde,
                    tau=tau_k,
                    mu=mu_k,
                    alpha=alpha_k,
                    rho=rho_k,
                    norm=scalars["norms"][k],
                )
            )
        x, u = x_next, u_next
    tape = (
        Tape(z=z, nu=nu, u0_external=u0 is not None, scalars=scalars, layers=records)
        if record_tape
        else None
    )
    return ForwardResult(x=x, u=u, x_tilde=x_tilde, tape=tape)


# --- parameter accounting ----------------------------------------------------------

# published per-architecture scalar counts; DDiFB-LFO carries one extra and
# DScCP-LFO carries 2K in the reference totals even though only the mu
# parameters are optimized here (see README on the count convention)
_PUBLISHED_SCALARS = {
    ("ddfb", "lno"): lambda K: 0,
    ("ddifb", "lno"): lambda K: 0,
    ("dcp", "lno"): lambda K: 1,
    ("dsccp", "lno"): lambda K: K,
    ("ddfb", "lfo"): lambda K: 0,
    ("ddifb", "lfo"): lambda K: 1,
    ("dcp", "lfo"): lambda K: 1,
    ("dsccp", "lfo"): lambda K: 2 * K,
}


def param_count(arch, variant, K, J, C):
    """Total parameter count: conv weights plus the per-scheme scalar table."""
    if (arch, variant) not in _PUBLISHED_SCALARS:
        raise ValueError(f"unknown scheme {(arch, variant)!r}")
    conv = K * J * C * 9 * (2 if variant == "lfo" else 1)
    return conv + _PUBLISHED_SCALARS[(arch, variant)](K)


# --- serialization ------------------------------------------------------------------


def model_meta(model):
    meta = {
        "magic": "PNNW1",
        "kind": "pnn-weights",
        "arch": model.arch,
        "variant": model.variant,
        "K": model.K,
        "J": model.J,
        "C": model.C,
        "box": [model.box.lo, model.box.hi],
        "a": model.a,
    }
    if model.log_mu is not None:
        # informational; derived from the float32-rounded values so that
        # save -> load -> save reproduces the manifest byte for byte
        stored = model.log_mu.astype(np.float32).astype(np.float64)
        meta["scalars"] = {"mu": [float(v) for v in np.exp(stored)]}
    return meta


def _model_tensors(model):
    tensors = [(f"layers.{k:03d}.fwd", model.kernels_fwd[k]) for k in range(model.K)]
    if model.kernels_adj is not None:
        tensors += [(f"layers.{k:03d}.adj", model.kernels_adj[k]) for k in range(model.K)]
    if model.log_mu is not None:
        tensors.append(("log_mu", model.log_mu))
    return tensors


def save_model(model, path):
    """Write the weights container (float32 payload, bit-stable round trip)."""
    fileio.write_tensor_container(path, model_meta(model), _model_tensors(model))


def load_model(path):
    meta, tensors = fileio.read_tensor_container(path)
    if meta.get("kind") != "pnn-weights":
        raise fileio.FormatError(f"{path}: not a weights container")
    arch, variant = meta.get("arch"), meta.get("variant")
    if arch not in ARCHS or variant not in VARIANTS:
        raise fileio.FormatError(f"{path}: unknown scheme {arch!r}/{variant!r}")
    K, J, C = meta["K"], meta["J"], meta["C"]
    try:
        kf = np.stack([tensors[f"layers.{k:03d}.fwd"] for k in range(K)])
        ka = (
            np.stack([tensors[f"layers.{k:03d}.adj"] for k in range(K)])
            if variant == "lfo"
            else None
        )
        log_mu = tensors["log_mu"] if _mu_shape(arch, variant, K) else None
    except KeyError as e:
        raise fileio.FormatError(f"{path}: missing tensor {e.args[0]!r}") from None
    try:
        return PnnModel(
            arch=arch,
            variant=variant,
            K=K,
            J=J,
            C=C,
            kernels_fwd=kf,
            kernels_adj=ka,
            log_mu=log_mu,
            a=float(meta.get("a", 3.0)),
            box=BoxConstraint(*meta.get("box", (0.0, 1.0))),
        )
    except ValueError as e:
        raise fileio.FormatError(f"{path}: {e}") from None
