"""Tile-based rasterization of textured 2D Gaussians and its backward pass.

Splats are binned into square screen tiles by the bounding box of their
cutoff ellipse; every tile keeps its splats sorted by ``(depth_key, index)``.
The forward pass composites front to back.  The backward pass walks each
pixel's list back to front, recovering the transmittance in front of every
splat from the stored final transmittance, so no per-splat state is kept
between the two passes.

Gradient accumulation uses one private buffer per work chunk (a contiguous
range of tiles), summed in chunk order at the end.  For a fixed thread
count the result is bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numba
import numpy as np
from numba import prange

from .core import MIN_SCALE, GradientBuffer, ImagePlaneCamera, RenderOutput, SplatSet
from .texture import bilinear_fused_kernel, bilinear_kernel


@dataclass(frozen=True)
class RasterConfig:
    """Rasterizer knobs.

    ``cutoff`` is the uv radius beyond which a splat is ignored (``None``
    disables it); ``alpha_min`` skips faint contributions; compositing stops
    once transmittance drops below ``t_min``.
    """

    tile_size: int = 16
    cutoff: float | None = 3.0
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    threads: int = 1

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")
        if self.cutoff is not None and self.cutoff <= 0:
            raise ValueError("cutoff must be positive or None")

    @classmethod
    def exact(cls, tile_size: int = 16, threads: int = 1) -> "RasterConfig":
        """No cutoff, no alpha skip, no early termination."""
        return cls(tile_size=tile_size, cutoff=None, alpha_min=0.0, t_min=0.0, threads=threads)

    def with_(self, **changes) -> "RasterConfig":
        return replace(self, **changes)


DEFAULT_CONFIG = RasterConfig()


@dataclass
class TileBinning:
    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray   # (tiles_x * tiles_y + 1,) start of each tile's list in `entries`
    entries: np.ndarray   # splat indices, grouped by tile, depth-sorted within a tile
    width: int
    height: int
    checksum: tuple[int, int, int]
    footprints: np.ndarray  # (K, 4) inclusive pixel box (i0, i1, j0, j1) per splat

    def tile_list(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.entries[self.offsets[t]:self.offsets[t + 1]]


# geometry -------------------------------------------------------------------

def intersect_ortho(pixel, splats: SplatSet, index: int) -> tuple[float, float]:
    """uv coordinates of world point ``pixel`` in splat ``index``'s local frame."""
    su, sv = splats.scales()[index]
    theta = splats.thetas[index]
    dx = pixel[0] - splats.positions[index, 0]
    dy = pixel[1] - splats.positions[index, 1]
    c, s = math.cos(theta), math.sin(theta)
    return (c * dx + s * dy) / su, (-s * dx + c * dy) / sv


def gaussian_weight(u: float, v: float) -> float:
    return math.exp(-0.5 * (u * u + v * v))


def _half_extents(splats: SplatSet, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    su, sv = splats.scales().T
    c, s = np.cos(splats.thetas), np.sin(splats.thetas)
    hx = cutoff * np.sqrt((su * c) ** 2 + (sv * s) ** 2)
    hy = cutoff * np.sqrt((su * s) ** 2 + (sv * c) ** 2)
    return hx, hy


def cull(splats: SplatSet, index: int, camera: ImagePlaneCamera,
         config: RasterConfig = DEFAULT_CONFIG) -> tuple[float, float, float, float] | None:
    """Clipped world-space box ``(x0, x1, y0, y1)`` of a splat, or None if culled."""
    if splats.alphas()[index] < config.alpha_min:
        return None
    if config.cutoff is None:
        return 0.0, float(camera.width), 0.0, float(camera.height)
    one = splats.subset(slice(index, index + 1))
    hx, hy = _half_extents(one, config.cutoff)
    x, y = splats.positions[index]
    x0, x1 = max(x - hx[0], 0.0), min(x + hx[0], float(camera.width))
    y0, y1 = max(y - hy[0], 0.0), min(y + hy[0], float(camera.height))
    if x0 >= x1 or y0 >= y1:
        return None
    return x0, x1, y0, y1


def pixel_footprints(splats: SplatSet, camera: ImagePlaneCamera, config: RasterConfig):
    """Inclusive pixel ranges ``(i0, i1, j0, j1)`` whose centers a splat can touch.

    Culled splats get an empty range (``i0 > i1``).
    """
    k = splats.count
    w, h = camera.width, camera.height
    if config.cutoff is None:
        i0 = np.zeros(k, np.int64); i1 = np.full(k, w - 1, np.int64)
        j0 = np.zeros(k, np.int64); j1 = np.full(k, h - 1, np.int64)
    else:
        hx, hy = _half_extents(splats, config.cutoff)
        x, y = splats.positions.T
        with np.errstate(invalid="ignore"):
            i0 = np.ceil(np.maximum(x - hx, 0.0) - 0.5)
            i1 = np.floor(np.minimum(x + hx, float(w)) - 0.5)
            j0 = np.ceil(np.maximum(y - hy, 0.0) - 0.5)
            j1 = np.floor(np.minimum(y + hy, float(h)) - 0.5)
        bad = ~np.isfinite(i0 + i1 + j0 + j1)
        i0, i1, j0, j1 = (np.where(bad, 0, a).astype(np.int64) for a in (i0, i1, j0, j1))
        i1[bad] = -1
        i0 = np.maximum(i0, 0); j0 = np.maximum(j0, 0)
        i1 = np.minimum(i1, w - 1); j1 = np.minimum(j1, h - 1)
    faint = splats.alphas() < config.alpha_min if k else np.zeros(0, bool)
    i1 = np.where(faint, -1, i1)
    i0 = np.where(faint, 0, i0)
    return i0, i1, j0, j1


def bin_splats(splats: SplatSet, camera: ImagePlaneCamera,
               config: RasterConfig = DEFAULT_CONFIG) -> TileBinning:
    ts = config.tile_size
    tiles_x = -(-camera.width // ts)
    tiles_y = -(-camera.height // ts)
    n_tiles = tiles_x * tiles_y
    k = splats.count
    checksum = (k, splats.grid_config.n, ts)

    i0, i1, j0, j1 = pixel_footprints(splats, camera, config)
    live = (i0 <= i1) & (j0 <= j1)
    idx = np.nonzero(live)[0]
    tx0, tx1 = i0[idx] // ts, i1[idx] // ts
    ty0, ty1 = j0[idx] // ts, j1[idx] // ts
    span_x = tx1 - tx0 + 1
    counts = span_x * (ty1 - ty0 + 1)
    total = int(counts.sum())

    splat_rep = np.repeat(idx, counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total, dtype=np.int64) - starts
    w_rep = np.repeat(span_x, counts)
    tile = (np.repeat(ty0, counts) + local // w_rep) * tiles_x + np.repeat(tx0, counts) + local % w_rep

    order = np.lexsort((splat_rep, splats.depth_keys[splat_rep], tile))
    entries = np.ascontiguousarray(splat_rep[order], dtype=np.int64)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=n_tiles), out=offsets[1:])
    footprints = np.ascontiguousarray(np.column_stack([i0, i1, j0, j1]).reshape(k, 4), dtype=np.int64)
    return TileBinning(ts, tiles_x, tiles_y, offsets, entries, camera.width, camera.height, checksum,
                       footprints)


# kernels --------------------------------------------------------------------
# ``xf[k]`` holds the world->uv transform diag(1/s_u, 1/s_v) R(-theta) as
# (m00, m01, m10, m11) so that u = m00 dx + m01 dy, v = m10 dx + m11 dy.

def _forward_kernel(pos, xf, alpha, grids, n, sigma,
                    offsets, entries, footprints, tiles_x, ts, width, height, bg,
                    cutoff2, alpha_min, t_min, n_chunks,
                    out_color, out_t, out_count):
    # splat-outer within a tile: each splat only visits the pixels of its own
    # footprint box; per-pixel compositing order is still front to back
    n_tiles = offsets.shape[0] - 1
    for chunk in prange(n_chunks):
        c = np.empty(3)
        px_t = np.empty(ts * ts)
        px_acc = np.empty((ts * ts, 3))
        px_count = np.empty(ts * ts, dtype=np.int64)
        px_done = np.empty(ts * ts, dtype=np.bool_)
        for t in range(chunk * n_tiles // n_chunks, (chunk + 1) * n_tiles // n_chunks):
            x_lo = (t % tiles_x) * ts
            y_lo = (t // tiles_x) * ts
            x_hi = min(x_lo + ts, width) - 1
            y_hi = min(y_lo + ts, height) - 1
            start = offsets[t]
            for p in range(ts * ts):
                px_t[p] = 1.0
                px_acc[p, 0] = 0.0
                px_acc[p, 1] = 0.0
                px_acc[p, 2] = 0.0
                px_count[p] = 0
                px_done[p] = False
            active = (x_hi - x_lo + 1) * (y_hi - y_lo + 1)
            for e in range(start, offsets[t + 1]):
                if active == 0:
                    break
                k = entries[e]
                m00 = xf[k, 0]
                m01 = xf[k, 1]
                m10 = xf[k, 2]
                m11 = xf[k, 3]
                ox = pos[k, 0]
                oy = pos[k, 1]
                for py in range(max(footprints[k, 2], y_lo), min(footprints[k, 3], y_hi) + 1):
                    dy = py + 0.5 - oy
                    row = (py - y_lo) * ts - x_lo
                    for px in range(max(footprints[k, 0], x_lo), min(footprints[k, 1], x_hi) + 1):
                        p = row + px
                        if px_done[p]:
                            continue
                        dx = px + 0.5 - ox
                        u = m00 * dx + m01 * dy
                        v = m10 * dx + m11 * dy
                        r2 = u * u + v * v
                        if r2 > cutoff2:
                            continue
                        a = alpha[k] * np.exp(-0.5 * r2)
                        if a < alpha_min:
                            continue
                        bilinear_kernel(u, v, n, sigma, grids, k, c)
                        trans = px_t[p]
                        w = a * trans
                        px_acc[p, 0] += c[0] * w
                        px_acc[p, 1] += c[1] * w
                        px_acc[p, 2] += c[2] * w
                        trans *= 1.0 - a
                        px_t[p] = trans
                        px_count[p] = e - start + 1
                        if trans < t_min:
                            px_done[p] = True
                            active -= 1
            for py in range(y_lo, y_hi + 1):
                for px in range(x_lo, x_hi + 1):
                    p = (py - y_lo) * ts + px - x_lo
                    trans = px_t[p]
                    out_color[py, px, 0] = px_acc[p, 0] + trans * bg[0]
                    out_color[py, px, 1] = px_acc[p, 1] + trans * bg[1]
                    out_color[py, px, 2] = px_acc[p, 2] + trans * bg[2]
                    out_t[py, px] = trans
                    out_count[py, px] = px_count[p]


@numba.njit(cache=True)
def _transmittance_before(px, py, e_stop, start, pos, xf, alpha, entries, footprints,
                          cutoff2, alpha_min):
    # front-to-back product over entries [start, e_stop); only needed when the
    # back-to-front division is impossible (1 - a == 0 or T underflowed)
    trans = 1.0
    for e in range(start, e_stop):
        k = entries[e]
        if (px < footprints[k, 0] or px > footprints[k, 1]
                or py < footprints[k, 2] or py > footprints[k, 3]):
            continue
        dx = px + 0.5 - pos[k, 0]
        dy = py + 0.5 - pos[k, 1]
        u = xf[k, 0] * dx + xf[k, 1] * dy
        v = xf[k, 2] * dx + xf[k, 3] * dy
        r2 = u * u + v * v
        if r2 > cutoff2:
            continue
        a = alpha[k] * np.exp(-0.5 * r2)
        if a < alpha_min:
            continue
        trans *= 1.0 - a
    return trans


def _backward_kernel(pos, xf, aspect, alpha, grids, n, sigma,
                     offsets, entries, footprints, tiles_x, ts, width, height, bg,
                     cutoff2, alpha_min, n_chunks,
                     final_t, counts, image_grad,
                     g_pos, g_theta, g_logscale, g_alpha, g_grid):
    n_tiles = offsets.shape[0] - 1
    n_splats = pos.shape[0]
    for chunk in prange(n_chunks):
        c = np.empty(3)
        # per-pixel state of the current tile, indexed by tile-local position:
        # number of entries the forward pass consumed (0 = nothing to do),
        # image gradient, transmittance in front of the current splat, color
        # composited behind it, and the transmittance product behind it
        px_n = np.empty(ts * ts, dtype=np.int64)
        px_g = np.empty((ts * ts, 3))
        px_t = np.empty(ts * ts)
        px_b = np.empty((ts * ts, 3))
        px_behind = np.empty(ts * ts)
        for t in range(chunk * n_tiles // n_chunks, (chunk + 1) * n_tiles // n_chunks):
            x_lo = (t % tiles_x) * ts
            y_lo = (t // tiles_x) * ts
            x_hi = min(x_lo + ts, width) - 1
            y_hi = min(y_lo + ts, height) - 1
            start = offsets[t]
            longest = 0
            for py in range(y_lo, y_hi + 1):
                for px in range(x_lo, x_hi + 1):
                    p = (py - y_lo) * ts + px - x_lo
                    gc0 = image_grad[py, px, 0]
                    gc1 = image_grad[py, px, 1]
                    gc2 = image_grad[py, px, 2]
                    if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0:
                        px_n[p] = 0
                        continue
                    px_n[p] = counts[py, px]
                    px_g[p, 0] = gc0
                    px_g[p, 1] = gc1
                    px_g[p, 2] = gc2
                    px_t[p] = final_t[py, px]
                    px_b[p, 0] = 0.0
                    px_b[p, 1] = 0.0
                    px_b[p, 2] = 0.0
                    px_behind[p] = 1.0
                    longest = max(longest, counts[py, px])

            for local in range(longest - 1, -1, -1):
                e = start + local
                k = entries[e]
                m00 = xf[k, 0]
                m01 = xf[k, 1]
                m10 = xf[k, 2]
                m11 = xf[k, 3]
                ox = pos[k, 0]
                oy = pos[k, 1]
                opacity = alpha[k]
                gk = chunk * n_splats + k
                acc_alpha = 0.0
                acc_u_dx = 0.0
                acc_v_dx = 0.0
                acc_uhat_v = 0.0
                acc_vhat_u = 0.0
                acc_su = 0.0
                acc_sv = 0.0
                for py in range(max(footprints[k, 2], y_lo), min(footprints[k, 3], y_hi) + 1):
                    dy = py + 0.5 - oy
                    row = (py - y_lo) * ts - x_lo
                    for px in range(max(footprints[k, 0], x_lo), min(footprints[k, 1], x_hi) + 1):
                        p = row + px
                        if local >= px_n[p]:
                            continue
                        dx = px + 0.5 - ox
                        u = m00 * dx + m01 * dy
                        v = m10 * dx + m11 * dy
                        r2 = u * u + v * v
                        if r2 > cutoff2:
                            continue
                        gauss = np.exp(-0.5 * r2)
                        a = opacity * gauss
                        if a < alpha_min:
                            continue
                        one_minus = 1.0 - a
                        trans = px_t[p]
                        if one_minus > 0.0 and trans > 0.0:
                            trans = trans / one_minus
                        else:
                            trans = _transmittance_before(px, py, e, start, pos, xf, alpha, entries,
                                                          footprints, cutoff2, alpha_min)
                        px_t[p] = trans
                        gc0 = px_g[p, 0]
                        gc1 = px_g[p, 1]
                        gc2 = px_g[p, 2]
                        w = a * trans
                        u_hat, v_hat = bilinear_fused_kernel(u, v, n, sigma, grids, k, w * gc0,
                                                             w * gc1, w * gc2, g_grid, gk, c)
                        behind = px_behind[p]
                        b0 = px_b[p, 0]
                        b1 = px_b[p, 1]
                        b2 = px_b[p, 2]
                        a_hat = trans * (gc0 * (c[0] - b0 - bg[0] * behind)
                                         + gc1 * (c[1] - b1 - bg[1] * behind)
                                         + gc2 * (c[2] - b2 - bg[2] * behind))
                        acc_alpha += a_hat * gauss
                        gauss_hat = a_hat * opacity * gauss
                        u_hat -= gauss_hat * u
                        v_hat -= gauss_hat * v
                        acc_u_dx += u_hat
                        acc_v_dx += v_hat
                        acc_uhat_v += u_hat * v
                        acc_vhat_u += v_hat * u
                        acc_su += u_hat * u
                        acc_sv += v_hat * v

                        px_b[p, 0] = a * c[0] + one_minus * b0
                        px_b[p, 1] = a * c[1] + one_minus * b1
                        px_b[p, 2] = a * c[2] + one_minus * b2
                        px_behind[p] = behind * one_minus

                # (u, v) = M (p - pos), so d/dpos = -M^T (u_hat, v_hat);
                # du/dtheta = v s_v/s_u, dv/dtheta = -u s_u/s_v; du/dlog s_u = -u
                g_pos[chunk, k, 0] -= acc_u_dx * m00 + acc_v_dx * m10
                g_pos[chunk, k, 1] -= acc_u_dx * m01 + acc_v_dx * m11
                g_theta[chunk, k] += acc_uhat_v * aspect[k] - acc_vhat_u / aspect[k]
                g_logscale[chunk, k, 0] -= acc_su
                g_logscale[chunk, k, 1] -= acc_sv
                g_alpha[chunk, k] += acc_alpha


_forward_serial = numba.njit(cache=True)(_forward_kernel)
_forward_parallel = numba.njit(cache=True, parallel=True)(_forward_kernel)
_backward_serial = numba.njit(cache=True)(_backward_kernel)
_backward_parallel = numba.njit(cache=True, parallel=True)(_backward_kernel)


# drivers --------------------------------------------------------------------

def _prepare(splats: SplatSet):
    """Per-splat uv transform, aspect ratio s_v/s_u and activated opacity."""
    if splats.count == 0:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0)
    c, s = np.cos(splats.thetas), np.sin(splats.thetas)
    su, sv = splats.scales().T
    xf = np.ascontiguousarray(np.column_stack([c / su, s / su, -s / sv, c / sv]))
    return xf, sv / su, np.ascontiguousarray(splats.alphas())


def _cutoff2(config: RasterConfig) -> float:
    return math.inf if config.cutoff is None else float(config.cutoff) ** 2


def _chunks(config: RasterConfig, binning: TileBinning) -> int:
    n_tiles = binning.tiles_x * binning.tiles_y
    threads = min(config.threads, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(threads)
    return max(1, min(config.threads, n_tiles))


def render_forward(splats: SplatSet, camera: ImagePlaneCamera, binning: TileBinning | None = None,
                   config: RasterConfig = DEFAULT_CONFIG) -> RenderOutput:
    if binning is None:
        binning = bin_splats(splats, camera, config)
    _check_binning(splats, camera, binning)
    h, w = camera.height, camera.width
    color = np.empty((h, w, 3))
    final_t = np.empty((h, w))
    counts = np.empty((h, w), dtype=np.int64)
    xf, _, alpha = _prepare(splats)
    cfg = splats.grid_config
    chunks = _chunks(config, binning)
    kernel = _forward_serial if chunks == 1 else _forward_parallel
    kernel(splats.positions, xf, alpha, splats.grids, cfg.n, cfg.sigma,
           binning.offsets, binning.entries, binning.footprints, binning.tiles_x,
           binning.tile_size, w, h, np.asarray(camera.background, dtype=np.float64),
           _cutoff2(config), float(config.alpha_min), float(config.t_min),
           chunks, color, final_t, counts)
    return RenderOutput(color, final_t, counts, binning.checksum)


def render_backward(splats: SplatSet, camera: ImagePlaneCamera, binning: TileBinning,
                    output: RenderOutput, image_grad: np.ndarray,
                    config: RasterConfig = DEFAULT_CONFIG) -> GradientBuffer:
    """Gradient of ``sum(image_grad * output.color)`` w.r.t. all raw parameters."""
    _check_binning(splats, camera, binning)
    if output.checksum != binning.checksum or output.n_consumed is None:
        raise ValueError(f"render output {output.checksum} does not match binning {binning.checksum}")
    h, w = camera.height, camera.width
    image_grad = np.ascontiguousarray(image_grad, dtype=np.float64)
    if image_grad.shape != (h, w, 3):
        raise ValueError(f"image gradient has shape {image_grad.shape}, expected {(h, w, 3)}")
    k = splats.count
    cfg = splats.grid_config
    chunks = _chunks(config, binning)
    g_pos = np.zeros((chunks, k, 2))
    g_theta = np.zeros((chunks, k))
    g_logscale = np.zeros((chunks, k, 2))
    g_alpha = np.zeros((chunks, k))
    g_grid = np.zeros((chunks * k, cfg.n, cfg.n, 3))
    xf, aspect, alpha = _prepare(splats)
    kernel = _backward_serial if chunks == 1 else _backward_parallel
    kernel(splats.positions, xf, aspect, alpha, splats.grids, cfg.n, cfg.sigma,
           binning.offsets, binning.entries, binning.footprints, binning.tiles_x,
           binning.tile_size, w, h, np.asarray(camera.background, dtype=np.float64),
           _cutoff2(config), float(config.alpha_min), chunks,
           output.final_transmittance, output.n_consumed, image_grad,
           g_pos, g_theta, g_logscale, g_alpha, g_grid)

    grads = GradientBuffer.zeros_like(splats)
    for chunk in range(chunks):
        grads.positions += g_pos[chunk]
        grads.thetas += g_theta[chunk]
        grads.log_scales += g_logscale[chunk]
        grads.opacity_logits += g_alpha[chunk]
        grads.grids += g_grid[chunk * k:(chunk + 1) * k]
    grads.opacity_logits *= alpha * (1.0 - alpha)
    grads.log_scales *= np.exp(splats.log_scales) > MIN_SCALE
    return grads


def render(splats: SplatSet, camera: ImagePlaneCamera,
           config: RasterConfig = DEFAULT_CONFIG) -> RenderOutput:
    return render_forward(splats, camera, bin_splats(splats, camera, config), config)


def render_random_colors(splats: SplatSet, camera: ImagePlaneCamera, seed: int,
                         config: RasterConfig = DEFAULT_CONFIG) -> RenderOutput:
    """Render with every texel replaced by a uniform random color."""
    rng = np.random.default_rng(seed)
    painted = splats.replace(grids=rng.uniform(0.0, 1.0, size=splats.grids.shape))
    return render(painted, camera, config)


def _check_binning(splats: SplatSet, camera: ImagePlaneCamera, binning: TileBinning) -> None:
    if binning.checksum[:2] != (splats.count, splats.grid_config.n):
        raise ValueError(f"binning {binning.checksum} was built for a different splat set")
    if (binning.width, binning.height) != (camera.width, camera.height):
        raise ValueError("binning was built for a different camera")
