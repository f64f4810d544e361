"""Command-line interface: ``gbill {fit,render,eval,sweep}``.

Exit codes: 0 success, 1 runtime error, 2 usage error.  Settings resolve as
built-in defaults < ``--config`` file (``key=value`` lines) < flags.
"""

from __future__ import annotations

import argparse
import logging
import statistics
import sys
import time
from pathlib import Path

from . import core
from .core import ColorGridConfig, ImagePlaneCamera
from .imageio import (METRICS_FIELDS, SWEEP_FIELDS, ImageReadError, ensure_dir, read_png,
                      write_csv, write_png)
from .metrics import psnr, ssim
from .optim import LearningRates
from .plotting import plot_sweep, plot_training_curve
from .raster import RasterConfig, render, render_random_colors
from .texture import downsample_grid
from .train import TrainConfig, TrainingError, fit

log = logging.getLogger("gbill")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

FIT_DEFAULTS = {
    "splats": 1000,
    "texture_res": 4,
    "sigma": 0.5,
    "iters": 20000,
    "seed": 0,
    "loss": "mse",
    "threads": 1,
    "tile_size": 16,
    "log_every": 100,
    "checkpoint_every": 0,
    "background": "0,0,0",
    "lr_position": None,
    "lr_theta": None,
    "lr_scale": None,
    "lr_opacity": None,
    "lr_color": None,
    "position_lr_final": None,
    "force": False,
}
_LOSS_NAMES = {"mse": "mse", "mse-ssim": "mse_plus_ssim"}


class UsageError(Exception):
    pass


def _parse_triple(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise UsageError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _parse_list(text: str, kind=float) -> list:
    try:
        return [kind(p) for p in str(text).split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; keys may use - or _."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _coerce(key: str, value):
    default = FIT_DEFAULTS.get(key)
    if isinstance(default, bool):
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if key in ("sigma",) or key.startswith("lr_") or key == "position_lr_final":
        return float(value)
    return value


def resolve_settings(args: argparse.Namespace, keys) -> dict:
    settings = {k: FIT_DEFAULTS[k] for k in keys if k in FIT_DEFAULTS}
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            if key not in FIT_DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            settings[key] = value
    for key in keys:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            settings[key] = value
    try:
        return {k: (_coerce(k, v) if v is not None else None) for k, v in settings.items()}
    except ValueError as exc:
        raise UsageError(f"bad setting value: {exc}") from None


def train_config_from(settings: dict, width: int, height: int) -> TrainConfig:
    try:
        grid = ColorGridConfig(n=settings["texture_res"], sigma=settings["sigma"])
        lrs = LearningRates.for_image(
            width, height,
            position=settings["lr_position"], theta=settings["lr_theta"],
            log_scale=settings["lr_scale"], opacity_logit=settings["lr_opacity"],
            color_grid=settings["lr_color"],
        )
        return TrainConfig(
            splat_count=settings["splats"], iterations=settings["iters"],
            loss=_LOSS_NAMES.get(settings["loss"], settings["loss"]), seed=settings["seed"],
            grid=grid, lrs=lrs, position_lr_final=settings["position_lr_final"],
            log_every=settings["log_every"], checkpoint_every=settings["checkpoint_every"],
            raster=RasterConfig(tile_size=settings["tile_size"], threads=settings["threads"]),
            background=_parse_triple(settings["background"]), force=settings["force"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_target(path) -> "np.ndarray":  # noqa: F821
    if not Path(path).is_file():
        raise UsageError(f"image not found: {path}")
    return read_png(path)


# commands -------------------------------------------------------------------

def cmd_fit(args) -> int:
    settings = resolve_settings(args, FIT_DEFAULTS.keys())
    target = _load_target(args.image)
    cfg = train_config_from(settings, target.shape[1], target.shape[0])
    try:
        out = ensure_dir(args.out)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {args.out}: {exc}") from None
    result = fit(target, cfg, out_dir=out)
    core.save(result.splats, out / "splats.gbil")
    write_csv(out / "metrics.csv", METRICS_FIELDS, [r.as_row() for r in result.history])
    write_png(out / "final.png", result.image)
    plot_training_curve(result.history, out / "training_curve.png")
    last = result.history[-1]
    print(f"final psnr {psnr(result.image, target):.2f} dB, ssim {ssim(result.image, target):.4f} "
          f"after {last.iter} iterations -> {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        splats = core.load(args.splats)
    except OSError as exc:
        raise RuntimeError(f"cannot read splat file: {exc}") from None
    if args.mip_level:
        grids = downsample_grid(splats.grids, args.mip_level)
        splats = splats.replace(grids=grids, grid_config=ColorGridConfig(grids.shape[1],
                                                                         splats.grid_config.sigma))
    camera = ImagePlaneCamera(args.width, args.height, _parse_triple(args.background))
    config = RasterConfig(tile_size=args.tile_size, threads=args.threads)
    if args.random_colors is not None:
        image = render_random_colors(splats, camera, args.random_colors, config).color
    else:
        image = render(splats, camera, config).color
    write_png(args.out, image)
    return EXIT_OK


def cmd_eval(args) -> int:
    a = read_png(args.image_a)
    b = read_png(args.image_b)
    if a.shape != b.shape:
        raise RuntimeError(f"image sizes differ: {a.shape[1]}x{a.shape[0]} vs {b.shape[1]}x{b.shape[0]}")
    print(f"{psnr(a, b):.2f},{ssim(a, b):.6f}")
    return EXIT_OK


def sweep_cells(sigmas, ns, base_sigma, base_n, layout: str) -> list[tuple[float, int]]:
    if layout == "product":
        return [(s, n) for s in sigmas for n in ns]
    cells = [(s, base_n) for s in sigmas] + [(base_sigma, n) for n in ns]
    return list(dict.fromkeys(cells))


def summarize(runs: list[dict]) -> list[dict]:
    cells: dict[tuple, list[dict]] = {}
    for r in runs:
        cells.setdefault((r["sigma"], r["n"]), []).append(r)
    return [{"sigma": s, "n": n, "runs": len(rs),
             "median_psnr": statistics.median(r["psnr"] for r in rs),
             "median_ssim": statistics.median(r["ssim"] for r in rs)}
            for (s, n), rs in cells.items()]


def cmd_sweep(args) -> int:
    settings = resolve_settings(args, FIT_DEFAULTS.keys())
    target = _load_target(args.image)
    sigmas = _parse_list(args.sigmas, float)
    ns = _parse_list(args.ns, int)
    if not sigmas or not ns or args.seeds < 1:
        raise UsageError("sweep needs at least one sigma, one N and one seed")
    out = ensure_dir(args.out)
    runs_dir = ensure_dir(out / "runs")
    cells = sweep_cells(sigmas, ns, args.base_sigma, args.base_n, args.layout)
    runs = []
    for sigma, n in cells:
        for seed in range(settings["seed"], settings["seed"] + args.seeds):
            cfg = train_config_from({**settings, "sigma": sigma, "texture_res": n, "seed": seed},
                                    target.shape[1], target.shape[0])
            t0 = time.perf_counter()
            result = fit(target, cfg)
            wall = time.perf_counter() - t0
            stem = f"sigma{sigma:g}_n{n}_seed{seed}"
            core.save(result.splats, runs_dir / f"{stem}.gbil")
            write_png(runs_dir / f"{stem}.png", result.image)
            row = {"sigma": sigma, "n": n, "seed": seed, "psnr": psnr(result.image, target),
                   "ssim": ssim(result.image, target), "wall_seconds": wall}
            runs.append(row)
            print(f"sigma={sigma:g} n={n} seed={seed}: psnr {row['psnr']:.3f} ssim {row['ssim']:.4f} "
                  f"({wall:.1f}s)", flush=True)
            write_csv(out / "sweep.csv", SWEEP_FIELDS, [_csv_row(r) for r in runs])

    summary = summarize(runs)
    write_csv(out / "summary.csv", ("sigma", "n", "runs", "median_psnr", "median_ssim"),
              [{k: (repr(float(v)) if isinstance(v, float) else v) for k, v in c.items()} for c in summary])
    plot_sweep(runs, summary, out / "sweep_sigma.png", "sigma", "ssim", {"n": args.base_n})
    plot_sweep(runs, summary, out / "sweep_n.png", "n", "psnr", {"sigma": args.base_sigma})
    for c in sorted(summary, key=lambda c: (c["n"], c["sigma"])):
        print(f"median sigma={c['sigma']:g} n={c['n']}: psnr {c['median_psnr']:.3f} "
              f"ssim {c['median_ssim']:.4f} over {c['runs']} seeds")
    return EXIT_OK


def _csv_row(r: dict) -> dict:
    return {"sigma": repr(float(r["sigma"])), "n": r["n"], "seed": r["seed"],
            "psnr": repr(float(r["psnr"])), "ssim": repr(float(r["ssim"])), "wall_seconds": f"{r['wall_seconds']:.3f}"}


# parser ---------------------------------------------------------------------

def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _add_fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--image", required=True, help="target PNG")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value settings file (flags take precedence)")
    p.add_argument("--splats", type=_positive_int)
    p.add_argument("--texture-res", type=_positive_int)
    p.add_argument("--sigma", type=_positive_float)
    p.add_argument("--iters", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=sorted(_LOSS_NAMES))
    p.add_argument("--threads", type=_positive_int)
    p.add_argument("--tile-size", type=_positive_int)
    p.add_argument("--log-every", type=_positive_int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--background", help="r,g,b in [0,1]")
    for name in ("position", "theta", "scale", "opacity", "color"):
        p.add_argument(f"--lr-{name}", type=_positive_float)
    p.add_argument("--position-lr-final", type=_positive_float,
                   help="decay the position rate exponentially to this value")
    p.add_argument("--force", action="store_true", help="allow texture resolutions outside 1,2,4,8")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gbill", description="Textured 2D Gaussian splat fitting")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit splats to one image")
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render a splat file to PNG")
    p.add_argument("--splats", required=True)
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--width", type=_positive_int, required=True)
    p.add_argument("--height", type=_positive_int, required=True)
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--mip-level", type=int, default=0,
                   help="box-filter each color grid this many times (large values give one color)")
    p.add_argument("--random-colors", type=int, metavar="SEED")
    p.add_argument("--tile-size", type=_positive_int, default=16)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="print psnr,ssim of two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sigma / texture-resolution ablation")
    _add_fit_options(p)
    p.add_argument("--sigmas", default="0.25,0.5,1.0,2.0")
    p.add_argument("--ns", default="1,2,4,8")
    p.add_argument("--seeds", type=_positive_int, default=3, help="seeds per cell")
    p.add_argument("--base-sigma", type=_positive_float, default=0.5)
    p.add_argument("--base-n", type=_positive_int, default=4)
    p.add_argument("--layout", choices=("ablation", "product"), default="ablation",
                   help="ablation: sigmas at base N plus Ns at base sigma; product: full grid")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gbill {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ImageReadError, core.SplatFileError, TrainingError, RuntimeError, OSError,
            ValueError) as exc:
        print(f"gbill {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
