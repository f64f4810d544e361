"""Bilinear lookup into a per-splat color grid and its hand-written adjoint.

The grid covers ``[-sigma, +sigma]^2`` of the splat's uv-plane; lookups
outside are border-clamped.  The jitted ``*_kernel`` functions are what the
rasterizer calls per (pixel, splat); the plain functions wrap them for
callers working with single points.
"""

from __future__ import annotations

from typing import NamedTuple

import numba
import numpy as np

from .core import ColorGridConfig


class TexelIndex(NamedTuple):
    i_u: int
    i_v: int
    f_u: float
    f_v: float


@numba.njit(cache=True, inline="always")
def grid_coord(u, n, sigma):
    """Map a uv coordinate to (texel index, fraction) along one axis."""
    if n == 1:
        return 0, 0.0
    g = (u + sigma) * ((n - 1) / (2.0 * sigma))
    if g < 0.0:
        g = 0.0
    elif g > n - 1:
        g = float(n - 1)
    i = int(np.floor(g))
    if i > n - 2:
        i = n - 2
    return i, g - i


@numba.njit(cache=True, inline="always")
def bilinear_kernel(u, v, n, sigma, grids, k, out):
    """Write the color of grid ``grids[k]`` at (u, v) into ``out``."""
    if n == 1:
        for ch in range(3):
            out[ch] = grids[k, 0, 0, ch]
        return
    iu, fu = grid_coord(u, n, sigma)
    iv, fv = grid_coord(v, n, sigma)
    w00 = (1.0 - fu) * (1.0 - fv)
    w10 = fu * (1.0 - fv)
    w01 = (1.0 - fu) * fv
    w11 = fu * fv
    for ch in range(3):
        out[ch] = (grids[k, iu, iv, ch] * w00 + grids[k, iu + 1, iv, ch] * w10
                   + grids[k, iu, iv + 1, ch] * w01 + grids[k, iu + 1, iv + 1, ch] * w11)


@numba.njit(cache=True, inline="always")
def adj_bilinear_kernel(u, v, n, sigma, grids, k, c0, c1, c2, grads, gk):
    """Accumulate d/dgrid of ``grids[k]`` into ``grads[gk]``; return (u_hat, v_hat)."""
    if n == 1:
        grads[gk, 0, 0, 0] += c0
        grads[gk, 0, 0, 1] += c1
        grads[gk, 0, 0, 2] += c2
        return 0.0, 0.0
    iu, fu = grid_coord(u, n, sigma)
    iv, fv = grid_coord(v, n, sigma)
    w00 = (1.0 - fu) * (1.0 - fv)
    w10 = fu * (1.0 - fv)
    w01 = (1.0 - fu) * fv
    w11 = fu * fv
    fu_hat = 0.0
    fv_hat = 0.0
    for ch in range(3):
        chat = c0 if ch == 0 else (c1 if ch == 1 else c2)
        grads[gk, iu, iv, ch] += chat * w00
        grads[gk, iu + 1, iv, ch] += chat * w10
        grads[gk, iu, iv + 1, ch] += chat * w01
        grads[gk, iu + 1, iv + 1, ch] += chat * w11
        c00 = grids[k, iu, iv, ch]
        c10 = grids[k, iu + 1, iv, ch]
        c01 = grids[k, iu, iv + 1, ch]
        c11 = grids[k, iu + 1, iv + 1, ch]
        fu_hat += chat * ((c10 - c00) * (1.0 - fv) + (c11 - c01) * fv)
        fv_hat += chat * ((c01 - c00) * (1.0 - fu) + (c11 - c10) * fu)
    scale = (n - 1) / (2.0 * sigma)
    u_hat = scale * fu_hat if -sigma < u < sigma else 0.0
    v_hat = scale * fv_hat if -sigma < v < sigma else 0.0
    return u_hat, v_hat


@numba.njit(cache=True, inline="always")
def bilinear_fused_kernel(u, v, n, sigma, grids, k, w0, w1, w2, grads, gk, out):
    """Color at (u, v) into ``out`` plus the adjoint for cotangent ``w * (grad_c)``.

    Equivalent to :func:`bilinear_kernel` followed by
    :func:`adj_bilinear_kernel` with ``c_hat = (w0, w1, w2)``, but locates
    and reads the four texels only once.  Returns ``(u_hat, v_hat)``.
    """
    if n == 1:
        for ch in range(3):
            out[ch] = grids[k, 0, 0, ch]
        grads[gk, 0, 0, 0] += w0
        grads[gk, 0, 0, 1] += w1
        grads[gk, 0, 0, 2] += w2
        return 0.0, 0.0
    iu, fu = grid_coord(u, n, sigma)
    iv, fv = grid_coord(v, n, sigma)
    w00 = (1.0 - fu) * (1.0 - fv)
    w10 = fu * (1.0 - fv)
    w01 = (1.0 - fu) * fv
    w11 = fu * fv
    fu_hat = 0.0
    fv_hat = 0.0
    for ch in range(3):
        chat = w0 if ch == 0 else (w1 if ch == 1 else w2)
        c00 = grids[k, iu, iv, ch]
        c10 = grids[k, iu + 1, iv, ch]
        c01 = grids[k, iu, iv + 1, ch]
        c11 = grids[k, iu + 1, iv + 1, ch]
        out[ch] = c00 * w00 + c10 * w10 + c01 * w01 + c11 * w11
        grads[gk, iu, iv, ch] += chat * w00
        grads[gk, iu + 1, iv, ch] += chat * w10
        grads[gk, iu, iv + 1, ch] += chat * w01
        grads[gk, iu + 1, iv + 1, ch] += chat * w11
        fu_hat += chat * ((c10 - c00) * (1.0 - fv) + (c11 - c01) * fv)
        fv_hat += chat * ((c01 - c00) * (1.0 - fu) + (c11 - c10) * fu)
    scale = (n - 1) / (2.0 * sigma)
    u_hat = scale * fu_hat if -sigma < u < sigma else 0.0
    v_hat = scale * fv_hat if -sigma < v < sigma else 0.0
    return u_hat, v_hat


def _check_grid(grid, cfg: ColorGridConfig) -> np.ndarray:
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if grid.size != cfg.n * cfg.n * 3:
        raise ValueError(f"grid has {grid.size} values, expected {cfg.n * cfg.n * 3}")
    return grid.reshape(cfg.n, cfg.n, 3)


def uv_to_grid(u: float, v: float, cfg: ColorGridConfig) -> TexelIndex:
    iu, fu = grid_coord(float(u), cfg.n, cfg.sigma)
    iv, fv = grid_coord(float(v), cfg.n, cfg.sigma)
    return TexelIndex(iu, iv, fu, fv)


def bilinear(u: float, v: float, cfg: ColorGridConfig, grid) -> np.ndarray:
    out = np.empty(3)
    bilinear_kernel(float(u), float(v), cfg.n, cfg.sigma, _check_grid(grid, cfg)[None], 0, out)
    return out


def adj_bilinear(u: float, v: float, cfg: ColorGridConfig, grid, c_hat):
    """Adjoint of :func:`bilinear`: returns ``(grid_grad, u_hat, v_hat)``."""
    grid = _check_grid(grid, cfg)
    c0, c1, c2 = (float(c) for c in c_hat)
    grid_grad = np.zeros((1,) + grid.shape)
    u_hat, v_hat = adj_bilinear_kernel(float(u), float(v), cfg.n, cfg.sigma, grid[None], 0,
                                       c0, c1, c2, grid_grad, 0)
    return grid_grad[0], u_hat, v_hat


def downsample_grid(grid: np.ndarray, levels: int) -> np.ndarray:
    """Box-filter the trailing ``(N, N, 3)`` axes ``levels`` times.

    Each level halves N by averaging 2x2 blocks.  When ``2**levels >= N``
    the result is the 1x1 grid mean.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if levels < 0:
        raise ValueError("mip level must be non-negative")
    n = grid.shape[-2]
    if grid.shape[-3] != n or grid.shape[-1] != 3:
        raise ValueError(f"expected trailing (N, N, 3) axes, got {grid.shape}")
    if levels == 0:
        return grid.copy()
    if 2 ** levels >= n:
        return grid.mean(axis=(-3, -2), keepdims=True)
    if n % (2 ** levels):
        raise ValueError(f"N={n} is not divisible by 2**{levels}")
    for _ in range(levels):
        half = grid.shape[-2] // 2
        grid = grid.reshape(grid.shape[:-3] + (half, 2, half, 2, 3)).mean(axis=(-4, -2))
    return grid
