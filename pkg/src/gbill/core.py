"""Domain types shared by the renderer, optimizer and trainer.

A :class:`SplatSet` holds K textured 2D Gaussians in structure-of-arrays
layout.  All parameters are stored *raw* (pre-activation):

* opacity as a logit, activated with a sigmoid,
* scales as logs, activated with ``exp`` (clamped below at ``MIN_SCALE``),
* rotation as an unconstrained angle about the view axis,
* the color grid as unconstrained reals of shape ``(K, N, N, 3)``
  indexed ``[k, i_u, i_v, channel]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

MAGIC = b"GBIL"
FORMAT_VERSION = 1
MIN_SCALE = 1e-8

_HEADER = struct.Struct("<4sIIIf")
PARAM_GROUPS = ("positions", "thetas", "log_scales", "opacity_logits", "grids")


class SplatFileError(ValueError):
    """Raised when a splat file cannot be parsed."""


@dataclass(frozen=True)
class ColorGridConfig:
    n: int = 4
    sigma: float = 0.5
    channels: int = 3

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"texture resolution must be a positive integer, got {self.n}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"grid extent sigma must be positive, got {self.sigma}")
        if self.channels != 3:
            raise ValueError("only RGB color grids are supported")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "sigma", float(self.sigma))


@dataclass(frozen=True)
class ImagePlaneCamera:
    """Orthographic camera looking at the image plane.

    Pixel ``(i, j)`` (column, row) samples the world point ``(i + 0.5, j + 0.5)``.
    """

    width: int
    height: int
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"camera size must be positive, got {self.width}x{self.height}")
        bg = tuple(float(c) for c in self.background)
        if len(bg) != 3:
            raise ValueError("background must be an RGB triple")
        object.__setattr__(self, "background", bg)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World coordinates of every pixel center as two (H, W) arrays."""
        xs = np.arange(self.width, dtype=np.float64) + 0.5
        ys = np.arange(self.height, dtype=np.float64) + 0.5
        return np.meshgrid(xs, ys)


@dataclass
class SplatSet:
    positions: np.ndarray
    depth_keys: np.ndarray
    thetas: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    grids: np.ndarray
    grid_config: ColorGridConfig = field(default_factory=ColorGridConfig)

    def __post_init__(self):
        # always copy: a SplatSet owns its (writable) parameter arrays
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 2)
        k = self.positions.shape[0]
        n = self.grid_config.n
        self.depth_keys = np.array(self.depth_keys, dtype=np.float64).reshape(k)
        self.thetas = np.array(self.thetas, dtype=np.float64).reshape(k)
        self.log_scales = np.array(self.log_scales, dtype=np.float64).reshape(k, 2)
        self.opacity_logits = np.array(self.opacity_logits, dtype=np.float64).reshape(k)
        grids = np.array(self.grids, dtype=np.float64)
        if grids.size != k * n * n * 3:
            raise ValueError(f"color grid has {grids.size} values, expected {k * n * n * 3}")
        self.grids = grids.reshape(k, n, n, 3)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.count

    @classmethod
    def empty(cls, grid_config: ColorGridConfig | None = None) -> "SplatSet":
        cfg = grid_config or ColorGridConfig()
        n = cfg.n
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros((0, 2)),
                   np.zeros(0), np.zeros((0, n, n, 3)), cfg)

    def copy(self) -> "SplatSet":
        return SplatSet(self.positions.copy(), self.depth_keys.copy(), self.thetas.copy(),
                        self.log_scales.copy(), self.opacity_logits.copy(), self.grids.copy(),
                        self.grid_config)

    def replace(self, **changes) -> "SplatSet":
        fields = dict(positions=self.positions, depth_keys=self.depth_keys, thetas=self.thetas,
                      log_scales=self.log_scales, opacity_logits=self.opacity_logits,
                      grids=self.grids, grid_config=self.grid_config)
        fields.update(changes)
        return SplatSet(**{k: (v.copy() if isinstance(v, np.ndarray) else v)
                           for k, v in fields.items()})

    def quantized(self) -> "SplatSet":
        """Copy with every parameter rounded to float32, as stored on disk."""
        return SplatSet(*(getattr(self, name).astype(np.float32) for name in
                          ("positions", "depth_keys", "thetas", "log_scales",
                           "opacity_logits", "grids")), grid_config=self.grid_config)

    def subset(self, index) -> "SplatSet":
        return SplatSet(self.positions[index], self.depth_keys[index], self.thetas[index],
                        self.log_scales[index], self.opacity_logits[index], self.grids[index],
                        self.grid_config)

    # activations -----------------------------------------------------------

    def alphas(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_scales), MIN_SCALE)

    def iter_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in PARAM_GROUPS:
            yield name, getattr(self, name)

    def equals(self, other: "SplatSet") -> bool:
        """Exact (bitwise value) equality of configuration and all parameters."""
        if self.grid_config != other.grid_config or self.count != other.count:
            return False
        return all(np.array_equal(getattr(self, name), getattr(other, name))
                   for name in ("depth_keys",) + PARAM_GROUPS)


@dataclass
class RenderOutput:
    """Composited image plus the per-pixel state the backward pass needs.

    ``n_consumed`` counts how many entries of the pixel's tile list the
    forward pass walked before terminating; ``checksum`` identifies the
    (K, N, tile_size) the image was rendered with.
    """

    color: np.ndarray
    final_transmittance: np.ndarray
    n_consumed: np.ndarray | None = None
    checksum: tuple[int, int, int] | None = None


@dataclass
class GradientBuffer:
    """Gradients w.r.t. raw parameters, laid out like :class:`SplatSet`."""

    positions: np.ndarray
    depth_keys: np.ndarray
    thetas: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    grids: np.ndarray

    @classmethod
    def zeros_like(cls, splats: SplatSet) -> "GradientBuffer":
        return cls(np.zeros_like(splats.positions), np.zeros_like(splats.depth_keys),
                   np.zeros_like(splats.thetas), np.zeros_like(splats.log_scales),
                   np.zeros_like(splats.opacity_logits), np.zeros_like(splats.grids))

    def iter_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in PARAM_GROUPS:
            yield name, getattr(self, name)

    def add_(self, other: "GradientBuffer") -> "GradientBuffer":
        for name in ("depth_keys",) + PARAM_GROUPS:
            getattr(self, name)[...] += getattr(other, name)
        return self


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def activate(splats: SplatSet, index: int) -> tuple[float, float, float]:
    """Activated ``(alpha, s_u, s_v)`` of one splat."""
    if not 0 <= index < splats.count:
        raise IndexError(f"splat index {index} out of range for K={splats.count}")
    alpha = float(sigmoid(splats.opacity_logits[index]))
    s_u, s_v = (max(math.exp(x), MIN_SCALE) for x in splats.log_scales[index])
    return alpha, s_u, s_v


# serialization -------------------------------------------------------------

def _record_dtype(n: int) -> np.dtype:
    return np.dtype([("scalars", "<f4", (7,)), ("grid", "<f4", (n * n * 3,))])


def serialize(splats: SplatSet) -> bytes:
    cfg = splats.grid_config
    k = splats.count
    records = np.zeros(k, dtype=_record_dtype(cfg.n))
    records["scalars"] = np.column_stack([
        splats.positions, splats.depth_keys, splats.thetas,
        splats.log_scales, splats.opacity_logits,
    ]) if k else np.zeros((0, 7))
    records["grid"] = splats.grids.reshape(k, cfg.n * cfg.n * 3)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, k, cfg.n, cfg.sigma)
    return header + records.tobytes()


def parse(data: bytes) -> SplatSet:
    if len(data) < _HEADER.size:
        raise SplatFileError("malformed header: file shorter than header")
    magic, version, k, n, sigma = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SplatFileError(f"malformed header: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SplatFileError(f"version mismatch: file has {version}, expected {FORMAT_VERSION}")
    try:
        cfg = ColorGridConfig(n=n, sigma=sigma)
    except ValueError as exc:
        raise SplatFileError(f"malformed header: {exc}") from None
    dtype = _record_dtype(n)
    body = len(data) - _HEADER.size
    complete = body // dtype.itemsize
    if complete < k:
        raise SplatFileError(f"truncated file: record {complete} missing (declared K={k})")
    if body != k * dtype.itemsize:
        raise SplatFileError(f"trailing data after record {k - 1}")
    records = np.frombuffer(data, dtype=dtype, count=k, offset=_HEADER.size)
    scalars = records["scalars"].astype(np.float64)
    return SplatSet(
        positions=scalars[:, 0:2], depth_keys=scalars[:, 2], thetas=scalars[:, 3],
        log_scales=scalars[:, 4:6], opacity_logits=scalars[:, 6],
        grids=records["grid"].astype(np.float64).reshape(k, n, n, 3), grid_config=cfg,
    )


def save(splats: SplatSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(splats))


def load(path) -> SplatSet:
    with open(path, "rb") as fh:
        return parse(fh.read())

