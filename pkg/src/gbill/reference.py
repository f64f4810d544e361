"""Slow, direct oracles for the rasterizer.

Nothing here shares code with :mod:`gbill.raster` or the jitted texture
kernels: the compositing loop, the bilinear lookup and the activations are
written again in plain numpy, vectorized over pixels and over a batch of
parameter vectors so that finite differences over every parameter of a
small scene stay affordable.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import MIN_SCALE, ColorGridConfig, GradientBuffer, ImagePlaneCamera, RenderOutput, SplatSet

# raw parameter blocks in the flat vector, in order, with per-splat widths
_BLOCKS = (("positions", 2), ("depth_keys", 1), ("thetas", 1), ("log_scales", 2),
           ("opacity_logits", 1))


def flatten(splats: SplatSet) -> np.ndarray:
    k = splats.count
    parts = [getattr(splats, name).reshape(k, width) for name, width in _BLOCKS]
    parts.append(splats.grids.reshape(k, splats.grid_config.n ** 2 * 3))
    return np.concatenate(parts, axis=1).ravel()


def _unflatten_batch(vectors: np.ndarray, k: int, n: int) -> dict[str, np.ndarray]:
    b = vectors.shape[0]
    per = vectors.reshape(b, k, 7 + n * n * 3)
    out, col = {}, 0
    for name, width in _BLOCKS:
        block = per[:, :, col:col + width]
        out[name] = block if width > 1 else block[:, :, 0]
        col += width
    out["grids"] = per[:, :, col:].reshape(b, k, n, n, 3)
    return out


def unflatten(vector: np.ndarray, like: SplatSet) -> SplatSet:
    p = _unflatten_batch(vector[None], like.count, like.grid_config.n)
    return SplatSet(grid_config=like.grid_config, **{name: a[0] for name, a in p.items()})


def _bilinear_np(u, v, grids, n, sigma):
    """Bilinear lookup for a batch: u, v (B, P); grids (B, N, N, 3) -> (B, P, 3)."""
    if n == 1:
        return np.broadcast_to(grids[:, None, 0, 0, :], u.shape + (3,))
    gu = np.clip((n - 1) * (u + sigma) / (2 * sigma), 0, n - 1)
    gv = np.clip((n - 1) * (v + sigma) / (2 * sigma), 0, n - 1)
    iu = np.minimum(np.floor(gu), n - 2).astype(np.int64)
    iv = np.minimum(np.floor(gv), n - 2).astype(np.int64)
    fu = (gu - iu)[..., None]
    fv = (gv - iv)[..., None]
    b = np.arange(grids.shape[0])[:, None]
    return (grids[b, iu, iv] * (1 - fu) * (1 - fv) + grids[b, iu + 1, iv] * fu * (1 - fv)
            + grids[b, iu, iv + 1] * (1 - fu) * fv + grids[b, iu + 1, iv + 1] * fu * fv)


def _composite_batch(p: dict[str, np.ndarray], cfg: ColorGridConfig, camera: ImagePlaneCamera):
    xs, ys = camera.pixel_centers()
    xs, ys = xs.ravel(), ys.ravel()
    b, k = p["depth_keys"].shape
    npix = xs.size
    trans = np.ones((b, npix))
    acc = np.zeros((b, npix, 3))
    order = np.argsort(p["depth_keys"], axis=1, kind="stable")
    rows = np.arange(b)
    for rank in range(k):
        idx = order[:, rank]
        px, py = p["positions"][rows, idx].T
        theta = p["thetas"][rows, idx]
        su, sv = np.maximum(np.exp(p["log_scales"][rows, idx]), MIN_SCALE).T
        alpha = 1.0 / (1.0 + np.exp(-p["opacity_logits"][rows, idx]))
        dx = xs[None] - px[:, None]
        dy = ys[None] - py[:, None]
        cos, sin = np.cos(theta)[:, None], np.sin(theta)[:, None]
        u = (cos * dx + sin * dy) / su[:, None]
        v = (-sin * dx + cos * dy) / sv[:, None]
        a = alpha[:, None] * np.exp(-0.5 * (u * u + v * v))
        color = _bilinear_np(u, v, p["grids"][rows, idx], cfg.n, cfg.sigma)
        acc += color * (a * trans)[..., None]
        trans = trans * (1 - a)
    color = acc + trans[..., None] * np.asarray(camera.background)
    h, w = camera.height, camera.width
    return color.reshape(b, h, w, 3), trans.reshape(b, h, w)


def render_naive(splats: SplatSet, camera: ImagePlaneCamera) -> RenderOutput:
    """Composite every splat at every pixel in global depth order, no shortcuts."""
    vec = flatten(splats)[None]
    color, trans = _composite_batch(_unflatten_batch(vec, splats.count, splats.grid_config.n),
                                    splats.grid_config, camera)
    return RenderOutput(color[0], trans[0])


def render_naive_batch(vectors: np.ndarray, like: SplatSet, camera: ImagePlaneCamera) -> np.ndarray:
    """Render many flat parameter vectors shaped like ``like``; returns (B, H, W, 3)."""
    p = _unflatten_batch(np.atleast_2d(vectors), like.count, like.grid_config.n)
    return _composite_batch(p, like.grid_config, camera)[0]


def gradient_fd(splats: SplatSet, camera: ImagePlaneCamera,
                loss: Callable[[np.ndarray], float], step: float = 1e-3,
                batch: int = 256) -> GradientBuffer:
    """Central finite differences of ``loss(render_naive(...).color)`` over every raw parameter."""
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    base = flatten(splats)
    dim = base.size
    grad = np.empty(dim)
    for lo in range(0, dim, batch):
        hi = min(lo + batch, dim)
        m = hi - lo
        vecs = np.repeat(base[None], 2 * m, axis=0)
        cols = np.arange(lo, hi)
        vecs[np.arange(m), cols] += step
        vecs[m + np.arange(m), cols] -= step
        images = render_naive_batch(vecs, splats, camera)
        plus = np.array([loss(img) for img in images[:m]])
        minus = np.array([loss(img) for img in images[m:]])
        grad[lo:hi] = (plus - minus) / (2 * step)
    g = unflatten(grad, splats)
    return GradientBuffer(g.positions, g.depth_keys, g.thetas, g.log_scales,
                          g.opacity_logits, g.grids)


# scene sampling for gradient checks -----------------------------------------

def random_scene(rng: np.random.Generator, k: int, grid: ColorGridConfig,
                 camera: ImagePlaneCamera, scale_range=(1.5, 4.0)) -> SplatSet:
    """Random splats well inside the image with moderate, pixel-sized scales."""
    w, h = camera.width, camera.height
    return SplatSet(
        positions=np.column_stack([rng.uniform(0.2 * w, 0.8 * w, k), rng.uniform(0.2 * h, 0.8 * h, k)]),
        depth_keys=rng.permutation(k) + rng.uniform(0.1, 0.9, k),
        thetas=rng.uniform(-np.pi, np.pi, k),
        log_scales=np.log(rng.uniform(*scale_range, (k, 2))),
        opacity_logits=rng.uniform(-1.5, 2.0, k),
        grids=rng.uniform(0.0, 1.0, (k, grid.n, grid.n, 3)),
        grid_config=grid,
    )


def kink_distance(splats: SplatSet, camera: ImagePlaneCamera) -> np.ndarray:
    """Per-pixel distance (in uv units) to the nearest texel or clamp boundary of any splat.

    Returns ``inf`` everywhere for N=1, where the lookup has no kinks.
    """
    cfg = splats.grid_config
    xs, ys = camera.pixel_centers()
    dist = np.full(xs.shape, np.inf)
    if cfg.n == 1:
        return dist
    kinks = -cfg.sigma + np.arange(cfg.n) * (2 * cfg.sigma / (cfg.n - 1))
    su, sv = splats.scales().T
    for k in range(splats.count):
        dx = xs - splats.positions[k, 0]
        dy = ys - splats.positions[k, 1]
        c, s = np.cos(splats.thetas[k]), np.sin(splats.thetas[k])
        u = (c * dx + s * dy) / su[k]
        v = (-s * dx + c * dy) / sv[k]
        for coord in (u, v):
            dist = np.minimum(dist, np.abs(coord[..., None] - kinks).min(axis=-1))
    return dist
