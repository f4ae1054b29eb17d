"""Command-line entry point: ``tsalign <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config, validate
from .correspondence import temper
from .gradcheck import check_feature_gradient, check_similarity_gradient
from .io import FormatError, overlay_image, read_stt1, write_heatmap, write_ppm, write_stt1
from .motion_mask import build_mask, patchify, temporal_saliency
from .stss import SimilarityTensor, compute_stss
from .tensor_core import FeatureVolume, NonFiniteError, l2_normalize_channels

log = logging.getLogger("tsalign")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numerical failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _patch(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected t,h,w integers, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return parts


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.precision is not None:
        cfg.precision = args.precision
    if getattr(args, "align", None):
        cfg.align.kind = args.align
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    return validate(cfg)


def _out_dir(args, default: str) -> Path:
    return Path(args.out_dir if args.out_dir else default)


def _dtype(args):
    return np.float32 if args.precision == "f32" else np.float64


def cmd_gen_data(args) -> int:
    from .toy.scene import make_dataset

    cfg = load_config(args)
    d = cfg.data
    seed = d.seed if args.seed is None else args.seed
    scenes, videos = make_dataset(d.scenes, frames=d.frames, height=d.height, width=d.width,
                                  n_objects=d.objects, bounce=d.bounce, seed=seed)
    out = _out_dir(args, "data")
    lines = []
    for i, (scene, video) in enumerate(zip(scenes, videos)):
        write_stt1(out / f"scene_{i:03d}.stt", video.astype(_dtype(args)))
        for obj in scene.objects:
            lines.append(f"scene {i}: {obj.kind} size={obj.size} pos={obj.position} "
                         f"vel={obj.velocity} color={tuple(round(c, 4) for c in obj.color)}")
    (out / "scenes.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(videos)} videos to {out}")
    return EXIT_OK


def cmd_stss(args) -> int:
    vol = FeatureVolume(read_stt1(args.input))
    r = compute_stss(l2_normalize_channels(vol))
    out = r.per_frame if args.per_frame else r.matrix
    write_stt1(args.output, out.astype(vol.data.dtype))
    return EXIT_OK


def _similarity_from_file(arr, frames, height, width) -> SimilarityTensor:
    if arr.ndim == 3:
        n, f, hw = arr.shape
        if f * hw != n:
            raise UsageError(f"per-frame similarity {arr.shape} is not [N, F, HW] with N = F*HW")
        return SimilarityTensor(arr.reshape(n, n), f, 1, hw)
    if arr.ndim == 2:
        n = arr.shape[0]
        if frames is None:
            raise UsageError("an [N, N] similarity needs --frames")
        if n % frames:
            raise UsageError(f"N={n} is not divisible by --frames {frames}")
        hw = n // frames
        h, w = (height, width) if height and width else (1, hw)
        if h * w != hw:
            raise UsageError(f"--height x --width must equal {hw}")
        return SimilarityTensor(arr, frames, h, w)
    raise UsageError(f"similarity must be rank 2 or 3, got shape {arr.shape}")


def cmd_temper(args) -> int:
    arr = read_stt1(args.input)
    r = _similarity_from_file(arr, args.frames, args.height, args.width)
    fld = temper(r, args.tau)
    write_stt1(args.output, fld.probs.astype(arr.dtype))
    return EXIT_OK


def cmd_mask(args) -> int:
    video = read_stt1(args.input)
    if video.ndim != 4:
        raise UsageError(f"video must be [F', H', W', 3], got shape {video.shape}")
    pt, ph, pw = args.patch
    grid = patchify(video, pt, ph, pw)
    delta = temporal_saliency(grid)
    mask = build_mask(delta, args.k)
    out = _out_dir(args, "mask")
    vol = mask.as_volume()
    write_stt1(out / "mask.stt", vol.astype(_dtype(args)))
    write_stt1(out / "saliency.stt", delta.astype(_dtype(args)))
    pixel_mask = np.repeat(np.repeat(np.repeat(vol, pt, 0), ph, 1), pw, 2)
    rgb = video[..., :3] if video.shape[-1] >= 3 else np.repeat(video[..., :1], 3, axis=-1)
    for f in range(video.shape[0]):
        write_ppm(out / f"overlay_{f:03d}.ppm", overlay_image(rgb[f], pixel_mask[f]))
    print(f"retained {len(mask)} of {delta.size} tokens ({mask.k}% per frame)")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    failures = unresolved = 0
    worst = 0.0

    def record(label, res, tol):
        nonlocal failures, unresolved, worst
        ok = res.passed(tol)
        status = "ok"
        if not ok and not res.resolvable(tol):
            # saturated rows: the true gradient is below float64 difference resolution
            unresolved += 1
            status = "below finite-difference resolution"
        elif not ok:
            failures += 1
            status = "FAIL"
        else:
            worst = max(worst, res.rel_error)
        if status != "ok" or args.verbose:
            print(f"{label}: rel err {res.rel_error:.3e} |grad| {res.grad_norm:.1e} {status}")

    for k in range(args.instances):
        tau = args.tau[k % len(args.tau)]
        frames = int(rng.integers(1, args.max_frames + 1))
        hw_cap = max(1, min(args.max_hw, args.max_n // frames))
        hw = int(rng.integers(1, hw_cap + 1))
        res = check_similarity_gradient(rng, frames, 1, hw, tau, args.step)
        record(f"similarity F={frames} HW={hw} tau={tau}", res, args.tol)
    for k in range(args.feature_instances):
        tau = args.tau[k % len(args.tau)]
        res = check_feature_gradient(rng, int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                                     int(rng.integers(1, 4)), int(rng.integers(2, 6)), tau,
                                     args.feature_step, order=4)
        record(f"features {res.size} tau={tau}", res, args.feature_tol)
    total = args.instances + args.feature_instances
    checked = total - unresolved
    print(f"grad-check: {checked - failures}/{checked} passed, worst relative error "
          f"{worst:.3e}" + (f"; {unresolved} unresolvable instance(s) skipped"
                            if unresolved else ""))
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


def cmd_train(args) -> int:
    from .toy.trainer import train

    cfg = load_config(args)
    out = _out_dir(args, "run")
    run = train(cfg, out)
    print(f"trained {cfg.train.steps} steps ({cfg.align.kind}); final smoothed "
          f"l_diff {run.smoothed('l_diff'):.5f} l_align {run.smoothed('l_align'):.5f}; "
          f"run written to {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .toy.trainer import summary_csv, sweep

    cfg = load_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    _, table = sweep(args.param, values, cfg, _out_dir(args, "sweep"))
    sys.stdout.write(summary_csv(table))
    return EXIT_OK


def latest_checkpoint(run_dir: Path) -> Path:
    ckpts = sorted(p for p in run_dir.glob("ckpt_*") if p.is_dir())
    if not ckpts:
        raise UsageError(f"no checkpoints in {run_dir}")
    return ckpts[-1]


def cmd_eval(args) -> int:
    from .toy.trainer import ToyExperiment, probe

    run_dir = Path(args.run_dir)
    cfg = parse_config(run_dir / "config.snapshot")
    exp = ToyExperiment(cfg)
    ckpt = latest_checkpoint(run_dir)
    exp.load_parameters({p.stem: read_stt1(p) for p in sorted(ckpt.glob("*.stt"))})
    result = probe(exp)
    lines = [f"checkpoint = {ckpt.name}"] + [f"{k} = {v!r}" for k, v in result.items()]
    print("\n".join(lines))
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(args.out_dir) / "eval.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_viz(args) -> int:
    arr = read_stt1(args.input)
    if arr.ndim != 3:
        raise UsageError(f"viz expects an [N, F, HW] field, got shape {arr.shape}")
    n, f, hw = arr.shape
    if args.height * args.width != hw:
        raise UsageError(f"--height x --width must equal HW={hw}")
    if not (0 <= args.query < n and 0 <= args.frame < f):
        raise UsageError("query or frame index out of range")
    row = arr[args.query, args.frame]
    if args.tau is not None:
        r = SimilarityTensor(arr[args.query].reshape(1, -1), f, args.height, args.width,
                             rows=np.array([args.query]))
        row = temper(r, args.tau).probs[0, args.frame]
    write_heatmap(np.clip(row, 0, None), args.height, args.width, args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="RNG seed (train.seed for training)")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"), help="floating point precision")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="tsalign", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="render synthetic videos")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("stss", parents=[common], help="self-similarity of a feature volume")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--per-frame", action="store_true", help="write [N, F, HW] instead of [N, N]")
    s.set_defaults(func=cmd_stss)

    s = sub.add_parser("temper", parents=[common], help="tempered correspondence distributions")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--frames", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.set_defaults(func=cmd_temper)

    s = sub.add_parser("mask", parents=[common], help="motion-saliency mask of a video")
    s.add_argument("input")
    s.add_argument("--k", type=float, default=20.0)
    s.add_argument("--patch", type=_patch, default=(2, 2, 2))
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    s.add_argument("--instances", type=int, default=50)
    s.add_argument("--feature-instances", type=int, default=20)
    s.add_argument("--max-n", type=int, default=64)
    s.add_argument("--max-frames", type=int, default=4)
    s.add_argument("--max-hw", type=int, default=16)
    s.add_argument("--tau", type=_floats, default=[0.05, 0.1, 1.0])
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--feature-step", type=float, default=1e-3,
                   help="step of the five-point stencil used for feature gradients")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--feature-tol", type=float, default=1e-5)
    s.set_defaults(func=cmd_grad_check)

    for name, func, helptext in (("train", cmd_train, "train the toy denoiser"),
                                 ("sweep", cmd_sweep, "ablation sweep over tau, k or layer")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--align", choices=("repa", "stss-l1", "tsa", "m-tsa"))
        s.add_argument("--steps", type=int)
        s.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        s.set_defaults(func=func)
        if name == "sweep":
            s.add_argument("--param", required=True, choices=("tau", "k", "layer"))
            s.add_argument("--values", required=True, help="comma-separated values")

    s = sub.add_parser("eval", parents=[common], help="probe losses of a saved run")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("viz", parents=[common], help="PPM heatmap of one correspondence row")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--query", type=int, default=0)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--tau", type=float, help="temper a similarity row first")
    s.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    from .toy.trainer import NumericalFailure

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalFailure, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, FormatError, ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
