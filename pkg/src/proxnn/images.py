"""Images, noise models, quality metrics, and synthetic desk-scale data.

Images are (C, H, W) float64 arrays with nominal range [0, 1] and peak 1
for PSNR. All randomness flows through PCG64 generators built from a
64-bit seed plus an explicit stream key (``numpy.random.SeedSequence``
spawn keys), so datasets rebuild bit-identically on any platform.
"""

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "as_image",
    "stream_rng",
    "NoiseSpec",
    "add_noise",
    "psnr",
    "extract_patches",
    "synth_cartoon",
    "Dataset",
    "derive_seed",
    "synth_dataset",
]

NOISE_KINDS = ("gaussian", "laplace-gauss", "poisson-gauss")


def as_image(arr):
    """Validate and return a (C, H, W) float64 image array."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 3 or a.size == 0:
        raise ValueError(f"image must be non-empty (C, H, W), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image has non-finite entries")
    return a


def stream_rng(seed, *stream):
    """Deterministic per-stream generator: PCG64 over SeedSequence(seed, stream)."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=stream))
    )


@dataclass(frozen=True)
class NoiseSpec:
    """Noise recipe: kind, Gaussian sigma, and the extra non-Gaussian knobs.

    ``poisson_level`` follows the "level/255" convention: the image is scaled
    to counts by ``255 / (level * 255)``, Poisson-sampled, and rescaled, so
    smaller levels mean cleaner images.
    """

    kind: str = "gaussian"
    sigma: float = 0.0
    laplace_scale: float = 0.0
    poisson_level: float = 50.0 / 255.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0 or self.laplace_scale < 0:
            raise ValueError("noise scales must be >= 0")
        if self.kind == "poisson-gauss" and not self.poisson_level > 0:
            raise ValueError("poisson level must be > 0")


def add_noise(img, spec):
    """Corrupt ``img`` according to ``spec``; output deliberately unclipped.

    Draw order per kind is fixed (count/Laplace noise first, Gaussian last)
    so outputs are bit-reproducible for a given seed.
    """
    x = as_image(img)
    rng = stream_rng(spec.seed)
    out = x.copy()
    if spec.kind == "laplace-gauss":
        if spec.laplace_scale > 0:
            out += rng.laplace(0.0, spec.laplace_scale, size=x.shape)
        else:
            rng.laplace(0.0, 1.0, size=x.shape)  # keep the draw order fixed
    elif spec.kind == "poisson-gauss":
        alpha = spec.poisson_level * 255.0
        counts = rng.poisson(np.maximum(x, 0.0) * (255.0 / alpha)).astype(np.float64)
        out = counts * (alpha / 255.0)
    if spec.sigma > 0:
        out += rng.normal(0.0, spec.sigma, size=x.shape)
    return out


def psnr(ref, est):
    """Peak signal-to-noise ratio in dB with peak value 1; +inf when equal."""
    a = np.asarray(ref, dtype=np.float64)
    b = np.asarray(est, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def extract_patches(img, size, count, seed):
    """``count`` square patches at uniform random valid offsets (copies)."""
    x = as_image(img)
    _, H, W = x.shape
    if size > H or size > W:
        raise ValueError(f"patch size {size} exceeds image {H}x{W}")
    rng = stream_rng(seed)
    out = []
    for _ in range(count):
        top = int(rng.integers(0, H - size + 1))
        left = int(rng.integers(0, W - size + 1))
        out.append(x[:, top : top + size, left : left + size].copy())
    return out


def synth_cartoon(h, w, seed):
    """Piecewise-constant 1xHxW test image: 3-8 flat regions on a flat base.

    Regions are axis-aligned rectangles or ellipses painted in draw order,
    each with a constant level in [0, 1], so the image has at most 8
    distinct values and far less gradient mass than noise of the same size.
    """
    if h < 8 or w < 8:
        raise ValueError("cartoon images must be at least 8x8")
    rng = stream_rng(seed)
    n_regions = int(rng.integers(3, 9))
    img = np.full((1, h, w), rng.uniform(0.0, 1.0))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_regions - 1):
        level = rng.uniform(0.0, 1.0)
        shape_kind = rng.integers(0, 2)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry = rng.uniform(h / 8, h / 2)
        rx = rng.uniform(w / 8, w / 2)
        if shape_kind == 0:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[0, mask] = level
    return img


@dataclass
class Dataset:
    """Paired clean/noisy samples plus the sigma actually injected."""

    samples: list = field(default_factory=list)  # (clean, noisy, sigma) triples
    patch_size: int | None = None
    source: str = "synthetic"

    def __post_init__(self):
        for clean, noisy, _sigma in self.samples:
            if clean.shape != noisy.shape:
                raise ValueError("clean/noisy pair with mismatched dimensions")

    def __len__(self):
        return len(self.samples)


def derive_seed(master_seed, *stream):
    """64-bit child seed hashed from (master seed, stream key)."""
    ss = np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1), spawn_key=stream)
    return int(ss.generate_state(1, np.uint64)[0])


def synth_dataset(n, h, w, sigma, master_seed, kind="gaussian", laplace_scale=0.0):
    """Build ``n`` cartoon pairs; per-sample seeds derive from (master, index)."""
    samples = []
    for i in range(n):
        clean = synth_cartoon(h, w, derive_seed(master_seed, i, 0))
        spec = NoiseSpec(
            kind=kind,
            sigma=sigma,
            laplace_scale=laplace_scale,
            seed=derive_seed(master_seed, i, 1),
        )
        samples.append((clean, add_noise(clean, spec), sigma))
    return Dataset(samples=samples, source=f"synth:{n}")
