"""Single-image overfitting with textured splats.

One camera looks straight at the target image; splats live in the image
plane and only rotate about the view axis.  Every iteration rebins,
renders, evaluates a photometric loss, backpropagates and takes one Adam
step.  The splat count is fixed for the whole run.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core
from .core import ColorGridConfig, ImagePlaneCamera, SplatSet
from .imageio import METRICS_FIELDS, ensure_dir, write_csv
from .metrics import WINDOW, psnr, ssim, ssim_with_grad
from .optim import AdamState, LearningRates, NonFiniteGradientError, adam_step
from .raster import RasterConfig, bin_splats, render_backward, render_forward

log = logging.getLogger(__name__)

LOSS_KINDS = ("mse", "mse_plus_ssim")
STANDARD_RESOLUTIONS = (1, 2, 4, 8)
CHECKPOINT_NAME = "checkpoint.gbil"
CHECKPOINT_HISTORY = "checkpoint_history.csv"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    splat_count: int = 1000
    iterations: int = 20000
    loss: str = "mse"
    ssim_weight: float = 0.2
    seed: int = 0
    grid: ColorGridConfig = field(default_factory=ColorGridConfig)
    lrs: LearningRates | None = None       # None: defaults scaled to the target size
    position_lr_final: float | None = None  # enables exponential position-LR decay
    log_every: int = 100
    checkpoint_every: int = 0               # 0: no intermediate checkpoints
    raster: RasterConfig = field(default_factory=RasterConfig)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    force: bool = False

    def __post_init__(self):
        if self.splat_count < 1:
            raise ValueError("splat_count must be at least 1")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.grid.n not in STANDARD_RESOLUTIONS and not self.force:
            raise ValueError(f"texture resolution {self.grid.n} not in {STANDARD_RESOLUTIONS} "
                             "(pass force=True to allow it)")
        if self.log_every < 1:
            raise ValueError("log_every must be at least 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")

    def learning_rates(self, width: int, height: int) -> LearningRates:
        return self.lrs if self.lrs is not None else LearningRates.for_image(width, height)


@dataclass
class HistoryRecord:
    iter: int
    loss: float
    psnr: float
    ssim: float
    wall_ms: float

    def as_row(self) -> dict:
        return {"iter": self.iter, "loss": repr(float(self.loss)), "psnr": repr(float(self.psnr)),
                "ssim": repr(float(self.ssim)), "wall_ms": f"{self.wall_ms:.3f}"}


@dataclass
class FitResult:
    splats: SplatSet
    history: list[HistoryRecord]
    losses: np.ndarray          # loss at every iteration
    image: np.ndarray           # final render of ``splats`` (unclamped)


def camera_for(target: np.ndarray, background=(0.0, 0.0, 0.0)) -> ImagePlaneCamera:
    return ImagePlaneCamera(target.shape[1], target.shape[0], background)


def initial_scale(width: int, height: int, count: int) -> float:
    """Scale whose 3-sigma disk covers about W*H/K pixels."""
    return math.sqrt(width * height / (math.pi * count)) / 3.0


def initialize(target: np.ndarray, cfg: TrainConfig) -> SplatSet:
    target = np.asarray(target)
    if target.ndim != 3 or target.shape[0] == 0 or target.shape[1] == 0:
        raise ValueError(f"target must be a non-empty HxWx3 image, got shape {target.shape}")
    h, w = target.shape[:2]
    k = cfg.splat_count
    n = cfg.grid.n
    if k > w * h:
        log.warning("%d splats for a %dx%d image: more splats than pixels", k, w, h)
    rng = np.random.default_rng(cfg.seed)
    positions = rng.uniform(0.0, 1.0, (k, 2)) * (w, h)
    thetas = rng.uniform(0.0, 2 * math.pi, k)
    scales = initial_scale(w, h, k) * rng.uniform(0.5, 2.0, (k, 2))
    depth = rng.uniform(0.0, 1.0, k)
    # continuous draws collide with probability zero; separate any that did
    while len(np.unique(depth)) < k or np.any(depth <= 0.0):
        depth = rng.uniform(0.0, 1.0, k)
    base = rng.uniform(0.2, 0.8, (k, 1, 1, 3))
    grids = base + rng.normal(0.0, 0.05, (k, n, n, 3))
    return SplatSet(positions, depth, thetas, np.log(scales), np.zeros(k), grids, cfg.grid)


def mse_loss(rendered: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def photometric_loss(rendered, target, cfg: TrainConfig) -> tuple[float, np.ndarray]:
    loss, grad = mse_loss(rendered, target)
    if cfg.loss == "mse_plus_ssim":
        s, s_grad = ssim_with_grad(rendered, target)
        loss += cfg.ssim_weight * (1.0 - s)
        grad = grad - cfg.ssim_weight * s_grad
    return loss, grad


def _logged_ssim(rendered, target) -> float:
    # images below the SSIM window size are still fittable; their SSIM is undefined
    return ssim(rendered, target) if min(target.shape[:2]) >= WINDOW else math.nan


def _position_lr_scale(cfg: TrainConfig, lrs: LearningRates, it: int) -> dict[str, float] | None:
    if cfg.position_lr_final is None:
        return None
    frac = (it - 1) / max(cfg.iterations - 1, 1)
    ratio = cfg.position_lr_final / lrs.position
    return {"positions": ratio ** frac}


def _save_checkpoint(out_dir: Path, splats: SplatSet, history: list[HistoryRecord]) -> None:
    try:
        tmp = out_dir / (CHECKPOINT_NAME + ".tmp")
        core.save(splats.quantized(), tmp)
        tmp.replace(out_dir / CHECKPOINT_NAME)
        write_csv(out_dir / CHECKPOINT_HISTORY, METRICS_FIELDS, [r.as_row() for r in history])
    except OSError as exc:
        raise TrainingError(f"failed to write checkpoint to {out_dir}: {exc}") from exc


def fit(target: np.ndarray, cfg: TrainConfig, out_dir=None) -> FitResult:
    """Fit ``cfg.splat_count`` splats to ``target`` (HxWx3 floats in [0, 1])."""
    target = np.ascontiguousarray(target, dtype=np.float64)
    camera = camera_for(target, cfg.background)
    if cfg.loss == "mse_plus_ssim" and min(camera.width, camera.height) < WINDOW:
        raise ValueError(f"the SSIM loss term needs images of at least {WINDOW}x{WINDOW}")
    lrs = cfg.learning_rates(camera.width, camera.height)
    out_dir = ensure_dir(out_dir) if out_dir is not None else None

    splats = initialize(target, cfg)
    state = AdamState.for_splats(splats)
    history: list[HistoryRecord] = []
    losses = np.empty(cfg.iterations)
    start = time.perf_counter()

    for it in range(1, cfg.iterations + 1):
        binning = bin_splats(splats, camera, cfg.raster)
        out = render_forward(splats, camera, binning, cfg.raster)
        loss, image_grad = photometric_loss(out.color, target, cfg)
        if not math.isfinite(loss):
            where = f"; last good checkpoint kept in {out_dir}" if out_dir and cfg.checkpoint_every else ""
            raise TrainingError(f"non-finite loss at iteration {it}{where}")
        losses[it - 1] = loss
        if it % cfg.log_every == 0 or it == 1 or it == cfg.iterations:
            history.append(HistoryRecord(it, loss, psnr(out.color, target), _logged_ssim(out.color, target),
                                         (time.perf_counter() - start) * 1e3))
            log.info("iter %d loss %.6f psnr %.2f", it, loss, history[-1].psnr)
        grads = render_backward(splats, camera, binning, out, image_grad, cfg.raster)
        try:
            adam_step(splats, grads, state, lrs, _position_lr_scale(cfg, lrs, it))
        except NonFiniteGradientError as exc:
            raise TrainingError(f"iteration {it}: {exc}") from exc
        if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            _save_checkpoint(out_dir, splats, history)

    final = splats.quantized()
    image = render_forward(final, camera, bin_splats(final, camera, cfg.raster), cfg.raster).color
    return FitResult(final, history, losses, image)
