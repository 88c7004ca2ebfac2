"""Command-line driver: MAP denoising, training, certification, PnP deblurring.

Every command resolves its flags, writes a run manifest (tool version,
resolved flags, seeds, input hashes) *before* computing, then emits CSV/PNG
artifacts. ``proxnn rerun <manifest>`` replays the recorded invocation;
because nothing in the pipeline depends on time or platform entropy, the
replay reproduces every output byte for byte.

Exit codes: 0 success, 1 numerical failure, 2 usage or validation error.
"""

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .fileio import FormatError, atomic_write_bytes, canonical_json, load_image, save_image, write_trace_csv
from .images import Dataset, NoiseSpec, add_noise, derive_seed, psnr, synth_dataset
from .linops import (
    BlurOperator,
    ConvStackOperator,
    blur_kernel,
    grad_stack,
    load_blur_kernel,
    spectral_norm,
)
from .pnn import load_model, pnn_forward, save_model, init_pnn
from .pnp import PnpConfig, beta_sweep, pnp_fb, residual_monotonicity
from .prox import BoxConstraint
from .robustness import (
    HMapOperator,
    JacobianProbe,
    RobustnessReport,
    lipschitz_product_bound,
)
from .solvers import difb_schedule, difb_solve, sccp_schedule, sccp_solve
from .training import TrainConfig, TrainingError, train

__all__ = ["main"]


class UsageError(ValueError):
    pass


def worker_count():
    """Worker cap: PROXNN_THREADS bounds any internal pool."""
    env = os.environ.get("PROXNN_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, min(cap, int(env)))
        except ValueError:
            raise UsageError(f"PROXNN_THREADS must be an integer, got {env!r}") from None
    return cap


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command, argv, flags, inputs):
    manifest = {
        "tool": "proxnn",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "flags": flags,
        "input_hashes": {os.fspath(p): _sha256(p) for p in inputs if p and os.path.exists(p)},
    }
    atomic_write_bytes(path, (canonical_json(manifest) + "\n").encode("utf-8"))


def _parse_box(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
        return BoxConstraint(lo, hi)
    except ValueError as e:
        raise UsageError(f"--box expects 'lo,hi', got {text!r} ({e})") from None


def _load_dataset(spec, size, sigma, seed, count=None):
    """``synth:N`` or a directory holding dataset.json with clean/sigma/seed."""
    if spec.startswith("synth:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"malformed synthetic dataset spec {spec!r}") from None
        return synth_dataset(count or n, size, size, sigma, master_seed=seed)
    manifest_path = os.path.join(spec, "dataset.json")
    if not os.path.isfile(manifest_path):
        raise UsageError(f"{spec!r} is not synth:N and holds no dataset.json")
    with open(manifest_path, "r", encoding="utf-8") as f:
        entries = json.load(f)
    samples = []
    for entry in entries[: count or len(entries)]:
        clean, _ = load_image(os.path.join(spec, entry["clean"]))
        s = float(entry["sigma"])
        noisy = add_noise(clean, NoiseSpec(kind="gaussian", sigma=s, seed=int(entry["seed"])))
        samples.append((clean, noisy, s))
    return Dataset(samples=samples, source=spec)


def _resolve_filters(name, channels):
    if name == "grad":
        return grad_stack(channels)
    model = load_model(name)
    if model.C != channels:
        raise UsageError(
            f"filters from {name!r} expect {model.C} channels, input has {channels}"
        )
    return model.kernels_fwd[0]


def _resolve_blur(name):
    if os.path.exists(name):
        return load_blur_kernel(name)
    return blur_kernel(name)


# --- subcommands -----------------------------------------------------------------


def cmd_denoise_map(args, argv):
    img, bits = load_image(args.infile)
    box = _parse_box(args.box)
    _write_manifest(
        args.manifest or args.out + ".manifest.json",
        "denoise-map",
        argv,
        {
            "in": args.infile,
            "out": args.out,
            "solver": args.solver,
            "nu": args.nu,
            "iters": args.iters,
            "filters": args.filters,
            "box": args.box,
            "trace": args.trace,
            "seed": args.seed,
        },
        [args.infile] + ([args.filters] if os.path.exists(args.filters) else []),
    )
    kernels = _resolve_filters(args.filters, img.shape[0])
    op = ConvStackOperator(kernels)
    norm = spectral_norm(op, img.shape, tol=1e-10, max_iter=2000, seed=args.seed).norm
    if norm == 0.0:
        norm = 1.0  # zero stack: any step size is valid, duals stay zero
    if args.solver in ("dfb", "difb"):
        schedule = difb_schedule(3.0, norm, args.solver == "difb", args.iters)
        x, trace = difb_solve(img, op, args.nu, box, schedule)
    else:
        schedule = sccp_schedule(1.0, norm, args.solver == "sccp", args.iters)
        x, trace = sccp_solve(img, op, args.nu, box, schedule)
    if not np.all(np.isfinite(x)):
        print("error: solver produced non-finite outputs", file=sys.stderr)
        return 1
    save_image(args.out, x, bits=bits)
    if args.trace:
        trace.to_csv(args.trace)
    return 0


def cmd_train(args, argv):
    if args.arch not in ("ddfb", "ddifb", "dcp", "dsccp"):
        raise UsageError(f"unknown architecture {args.arch!r}")
    if args.variant not in ("lno", "lfo"):
        raise UsageError(f"unknown variant {args.variant!r}")
    setting = args.setting
    if setting.startswith("fixed:"):
        cfg = TrainConfig(
            setting="fixed",
            sigma=float(setting.split(":", 1)[1]),
            epochs=args.epochs,
            batch_size=args.batch,
            lr=args.lr,
            seed=args.seed,
        )
    elif setting.startswith("uniform:"):
        lo, hi = (float(v) for v in setting.split(":", 1)[1].split(","))
        cfg = TrainConfig(
            setting="uniform",
            sigma_range=(lo, hi),
            epochs=args.epochs,
            batch_size=args.batch,
            lr=args.lr,
            seed=args.seed,
        )
    else:
        raise UsageError(f"--setting must be fixed:SIGMA or uniform:LO,HI, got {setting!r}")
    _write_manifest(
        args.manifest or args.out + ".manifest.json",
        "train",
        argv,
        {
            "arch": args.arch,
            "variant": args.variant,
            "K": args.K,
            "J": args.J,
            "data": args.data,
            "setting": args.setting,
            "epochs": args.epochs,
            "lr": args.lr,
            "batch": args.batch,
            "size": args.size,
            "seed": args.seed,
            "out": args.out,
        },
        [],
    )
    dataset = _load_dataset(args.data, args.size, cfg.sigma, derive_seed(args.seed, 0xDA7A))
    if len(dataset) == 0:
        raise UsageError(f"dataset {args.data!r} is empty")
    channels = dataset.samples[0][0].shape[0]
    model = init_pnn(args.arch, args.variant, args.K, args.J, channels, seed=args.seed)
    try:
        model, rows = train(model, cfg, dataset, trace_path=args.trace)
    except TrainingError as e:
        dump = args.out + ".diverged.pnnw"
        save_model(model, dump)
        print(f"error: {e}; state dumped to {dump}", file=sys.stderr)
        return 1
    save_model(model, args.out)
    final_psnr = np.mean([r[3] for r in rows[-10:]])
    print(f"trained {args.arch}-{args.variant}: final train PSNR {final_psnr:.2f} dB")
    return 0


def _certify_probe_factory(weights):
    if weights == "stub:half-identity":
        # linear testing stub f = 0.5 Id, so J f = 0.5 Id and 2 J f - Id = 0
        class _Half:
            def __init__(self, shape):
                self.in_shape = shape

            def apply(self, v):
                return 0.5 * v

            def adjoint(self, w):
                return 0.5 * w

        return None, lambda z, nu: _Half(z.shape)
    model = load_model(weights)
    return model, lambda z, nu: JacobianProbe(model, z, nu)


def cmd_certify(args, argv):
    _write_manifest(
        args.manifest or args.out_json + ".manifest.json",
        "certify",
        argv,
        {
            "weights": args.weights,
            "data": args.data,
            "target": args.target,
            "samples": args.samples,
            "sigma": args.sigma,
            "size": args.size,
            "seed": args.seed,
            "out_csv": args.out_csv,
            "out_json": args.out_json,
        },
        [args.weights] if os.path.exists(args.weights) else [],
    )
    dataset = _load_dataset(
        args.data, args.size, args.sigma, derive_seed(args.seed, 0xCE47), count=args.samples
    )
    model, probe_of = _certify_probe_factory(args.weights)
    norms = []
    for _, noisy, sigma in dataset.samples[: args.samples]:
        probe = probe_of(noisy, float(sigma) ** 2)
        op = probe if args.target == "f" else HMapOperator(probe)
        norms.append(
            spectral_norm(op, probe.in_shape, tol=1e-10, max_iter=2000, seed=args.seed).norm
        )
    report = RobustnessReport.from_norms(args.target, norms)
    report.to_csv(args.out_csv)
    extra = {}
    if model is not None:
        shape = dataset.samples[0][0].shape
        extra["product_bound"] = lipschitz_product_bound(model, shape)
    report.to_json(args.out_json, extra=extra)
    print(f"certify target={args.target}: max {report.max:.6g} median {report.median:.6g}")
    return 0


def cmd_pnp(args, argv):
    y, bits = load_image(args.y)
    _write_manifest(
        args.manifest or args.out + ".manifest.json",
        "pnp",
        argv,
        {
            "y": args.y,
            "kernel": args.kernel,
            "weights": args.weights,
            "sigma": args.sigma,
            "beta": args.beta,
            "beta_sweep": args.beta_sweep,
            "gamma": args.gamma,
            "iters": args.iters,
            "warm": args.warm,
            "unsafe_gamma": args.unsafe_gamma,
            "out": args.out,
            "trace": args.trace,
            "truth": args.truth,
        },
        [args.y, args.weights] + ([args.kernel] if os.path.exists(args.kernel) else []),
    )
    kernel = _resolve_blur(args.kernel)
    model = load_model(args.weights)
    norm_A = spectral_norm(BlurOperator(kernel), y.shape, tol=1e-10, max_iter=2000).norm
    gamma = 1.99 / norm_A**2 if args.gamma == "auto" else float(args.gamma)
    config = PnpConfig(
        gamma=gamma,
        beta=args.beta if args.beta is not None else 1.0,
        sigma=args.sigma,
        iters=args.iters,
        warm_start=args.warm == "on",
        unsafe_gamma=args.unsafe_gamma,
        norm_A=norm_A,
    )
    try:
        config.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    truth = load_image(args.truth)[0] if args.truth else None
    if args.beta_sweep:
        if truth is None:
            raise UsageError("--beta-sweep needs --truth to score the candidates")
        betas = [float(v) for v in args.beta_sweep.split(",")]
        with ThreadPoolExecutor(max_workers=min(worker_count(), len(betas))) as ex:
            def run_one(beta):
                cfg = PnpConfig(
                    gamma=gamma, beta=beta, sigma=args.sigma, iters=args.iters,
                    warm_start=config.warm_start, unsafe_gamma=config.unsafe_gamma,
                    norm_A=norm_A,
                )
                x, _ = pnp_fb(y, kernel, cfg, model, truth=truth)
                return psnr(truth, x)
            vals = list(ex.map(run_one, betas))
        rows = list(zip(betas, vals))
        best = min(
            (b for b, v in rows if v == max(vals)),
        )
        write_trace_csv(
            args.out + ".sweep.csv",
            ("beta", "psnr", "best"),
            [(b, v, int(b == best)) for b, v in rows],
        )
        config.beta = float(best)
    x, trace = pnp_fb(y, kernel, config, model, truth=truth)
    if not np.all(np.isfinite(x)):
        print("error: PnP iterations diverged to non-finite values", file=sys.stderr)
        return 1
    save_image(args.out, x, bits=bits)
    if args.trace:
        trace.to_csv(args.trace)
    ok, idx = (True, None)
    if len(trace.residual) >= 3:
        ok, idx = residual_monotonicity(trace, slack=1e-7)
    print(
        f"pnp done: nu={config.nu:.6g} gamma={config.gamma:.6g} "
        f"residual monotone={ok}" + (f" (first violation at {idx})" if not ok else "")
    )
    return 0


def cmd_rerun(args, argv):
    with open(args.manifest, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    stored = manifest.get("argv")
    if not stored:
        raise UsageError(f"{args.manifest}: manifest records no argv")
    return main(stored)


# --- parser ------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="proxnn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("denoise-map", help="MAP denoising via the convex solvers")
    d.add_argument("--in", dest="infile", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--solver", choices=("dfb", "difb", "cp", "sccp"), default="dfb")
    d.add_argument("--nu", type=float, required=True)
    d.add_argument("--iters", type=int, default=2000)
    d.add_argument("--filters", default="grad", help="'grad' or a weights file")
    d.add_argument("--box", default="0,1")
    d.add_argument("--trace", default=None)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--manifest", default=None)
    d.set_defaults(func=cmd_denoise_map)

    t = sub.add_parser("train", help="train an unfolded denoiser")
    t.add_argument("--arch", required=True)
    t.add_argument("--variant", required=True)
    t.add_argument("--K", type=int, default=5)
    t.add_argument("--J", type=int, default=8)
    t.add_argument("--data", required=True, help="synth:N or a dataset directory")
    t.add_argument("--setting", default="fixed:0.08")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--size", type=int, default=32, help="synthetic image side")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--trace", default=None)
    t.add_argument("--manifest", default=None)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", help="Lipschitz / nonexpansiveness certification")
    c.add_argument("--weights", required=True, help="weights file or stub:half-identity")
    c.add_argument("--data", default="synth:16")
    c.add_argument("--target", choices=("f", "h"), default="f")
    c.add_argument("--samples", type=int, default=16)
    c.add_argument("--sigma", type=float, default=0.08)
    c.add_argument("--size", type=int, default=32)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out-csv", dest="out_csv", required=True)
    c.add_argument("--out-json", dest="out_json", required=True)
    c.add_argument("--manifest", default=None)
    c.set_defaults(func=cmd_certify)

    g = sub.add_parser("pnp", help="PnP forward-backward deblurring")
    g.add_argument("--y", required=True, help="degraded observation image")
    g.add_argument("--kernel", required=True, help="builtin name or kernel text file")
    g.add_argument("--weights", required=True)
    g.add_argument("--sigma", type=float, required=True)
    g.add_argument("--beta", type=float, default=None)
    g.add_argument("--beta-sweep", dest="beta_sweep", default=None)
    g.add_argument("--gamma", default="auto")
    g.add_argument("--iters", type=int, default=500)
    g.add_argument("--warm", choices=("on", "off"), default="on")
    g.add_argument("--unsafe-gamma", dest="unsafe_gamma", action="store_true")
    g.add_argument("--out", required=True)
    g.add_argument("--trace", default=None)
    g.add_argument("--truth", default=None)
    g.add_argument("--manifest", default=None)
    g.set_defaults(func=cmd_pnp)

    r = sub.add_parser("rerun", help="replay a recorded run manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_rerun)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args, argv)
    except (UsageError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
