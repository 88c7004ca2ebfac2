"""l2 training of the unfolded denoisers: loss, Adam, and the epoch loop.

The loss is the batch mean of ``0.5 ||clean - f(noisy)||^2`` with the clip
radius tied to the per-sample noise level as ``nu = sigma**2``. Losses and
gradients accumulate in float64 with a fixed reduction order, so a (config,
seed) pair reproduces trained weights byte for byte.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradPack, pnn_vjp
from .fileio import read_tensor_container, write_tensor_container, write_trace_csv
from .images import NoiseSpec, add_noise, derive_seed, psnr
from .pnn import model_meta, pnn_forward

__all__ = [
    "TrainingError",
    "TrainConfig",
    "AdamState",
    "adam_step",
    "loss_and_grad",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Desk-scale training settings.

    ``setting`` is ``fixed`` (one sigma) or ``uniform`` (sigma drawn per
    sample from ``sigma_range`` each batch). With ``resample_noise`` the
    noisy inputs are redrawn every batch from the stored clean images;
    otherwise the dataset's fixed noisy images are used.
    """

    setting: str = "fixed"
    sigma: float = 0.08
    sigma_range: tuple = (0.0, 0.1)
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    resample_noise: bool = True

    def __post_init__(self):
        if self.setting not in ("fixed", "uniform"):
            raise ValueError(f"unknown training setting {self.setting!r}")
        lo, hi = self.sigma_range
        if self.setting == "uniform" and not (0 <= lo < hi):
            raise ValueError(f"sigma range must satisfy 0 <= lo < hi, got {self.sigma_range}")


@dataclass
class AdamState:
    """First/second moments mirroring the model parameters, plus step count."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model):
        m = {name: np.zeros_like(arr) for name, arr in model.named_params()}
        v = {name: np.zeros_like(arr) for name, arr in model.named_params()}
        return cls(m=m, v=v)


def adam_step(state, grads, model, lr):
    """Bias-corrected Adam update applied in place to the model tensors."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    params = dict(model.named_params())
    for name, g in grads.named():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def loss_and_grad(model, batch, stop_grad_norm=False):
    """Batch loss and parameter gradient; ``batch`` holds (clean, noisy, sigma).

    Per-sample cotangent is ``(x_K - clean) / len(batch)``; the reduction
    order is the batch order.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    shape = batch[0][0].shape
    total = GradPack.zeros_like(model)
    loss = 0.0
    inv = 1.0 / len(batch)
    for clean, noisy, sigma in batch:
        if clean.shape != shape or noisy.shape != shape:
            raise ValueError("batch samples have mismatched shapes")
        res = pnn_forward(model, noisy, nu=float(sigma) ** 2, record_tape=True)
        diff = res.x - clean
        loss += 0.5 * float(np.sum(diff * diff)) * inv
        pack, _ = pnn_vjp(
            model, noisy, float(sigma) ** 2, res.tape, diff * inv, stop_grad_norm=stop_grad_norm
        )
        total.add_(pack)
    return loss, total


def train(model, config, dataset, trace_path=None):
    """Optimize ``model`` in place; returns (model, trace rows).

    Trace rows are (epoch, batch, loss, batch train PSNR derived from the
    pre-update loss). A non-finite loss aborts with :class:`TrainingError`.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    state = AdamState.for_model(model)
    order_rng = np.random.default_rng(derive_seed(config.seed, 0xD5))
    sigma_rng = np.random.default_rng(derive_seed(config.seed, 0x51))
    rows = []
    n = len(dataset)
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        for b_idx, start in enumerate(range(0, n, config.batch_size)):
            idxs = perm[start : start + config.batch_size]
            batch = []
            for j, i in enumerate(idxs):
                clean, noisy, sigma = dataset.samples[i]
                if config.setting == "uniform":
                    lo, hi = config.sigma_range
                    sigma = float(sigma_rng.uniform(lo, hi))
                    noisy = add_noise(
                        clean,
                        NoiseSpec(
                            kind="gaussian",
                            sigma=sigma,
                            seed=derive_seed(config.seed, epoch, b_idx, j),
                        ),
                    )
                elif config.resample_noise:
                    sigma = config.sigma
                    noisy = add_noise(
                        clean,
                        NoiseSpec(
                            kind="gaussian",
                            sigma=sigma,
                            seed=derive_seed(config.seed, epoch, b_idx, j),
                        ),
                    )
                batch.append((clean, noisy, sigma))
            loss, grads = loss_and_grad(model, batch)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch} batch {b_idx}")
            if config.lr != 0.0:
                adam_step(state, grads, model, config.lr)
            rows.append((epoch, b_idx, loss, _psnr_from_loss(loss, batch)))
    if trace_path is not None:
        write_trace_csv(trace_path, ("epoch", "batch", "loss", "psnr"), rows)
    return model, rows


def _psnr_from_loss(loss, batch):
    # mean PSNR surrogate from the pre-update loss (exact MSE relation)
    n_entries = batch[0][0].size
    mse = 2.0 * loss / n_entries
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def eval_psnr(model, dataset, nu_of=lambda s: s**2):
    """Mean PSNR of the denoised outputs over a dataset."""
    vals = [
        psnr(clean, pnn_forward(model, noisy, nu=nu_of(sigma)).x)
        for clean, noisy, sigma in dataset.samples
    ]
    return float(np.mean(vals))


def save_checkpoint(path, model, state):
    """Weights plus Adam-state sidecar in the same container format."""
    tensors = []
    for name, arr in model.named_params():
        tensors.append((f"param.{name}", arr))
    for name, arr in state.m.items():
        tensors.append((f"adam.m.{name}", arr))
    for name, arr in state.v.items():
        tensors.append((f"adam.v.{name}", arr))
    meta = model_meta(model)
    meta["kind"] = "pnn-checkpoint"
    meta["adam"] = {"t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
    write_tensor_container(path, meta, tensors)


def load_checkpoint(path, model):
    """Restore Adam state for ``model`` from a checkpoint sidecar."""
    meta, tensors = read_tensor_container(path)
    if meta.get("kind") != "pnn-checkpoint":
        raise ValueError(f"{path}: not a checkpoint container")
    state = AdamState.for_model(model)
    ad = meta["adam"]
    state.t = int(ad["t"])
    for name, arr in model.named_params():
        arr[:] = tensors[f"param.{name}"]
        state.m[name][:] = tensors[f"adam.m.{name}"]
        state.v[name][:] = tensors[f"adam.v.{name}"]
    return state
