"""Spatial kernels: convolution, pooling, bilinear sampling and the fused
multi-scale deformable sampling used by the attention layers."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, _result


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """2-D cross-correlation of a single C_in x H x W map via im2col."""
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[0]}, kernel expects {c_in}")
    if padding is None:
        padding = k // 2
    _, h, wd = x.shape
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(wd, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (Ho*Wo, C_in*k*k)
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c_in * k * k)
    wm = w.data.reshape(c_out, -1)
    y = cols @ wm.T
    if b is not None:
        y = y + b.data
    out = np.ascontiguousarray(y.T).reshape(c_out, ho, wo)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = g.reshape(c_out, ho * wo)
        if w.requires_grad:
            w._accumulate((gm @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(gm.sum(axis=1))
        if x.requires_grad:
            dcols = (gm.T @ wm).reshape(ho, wo, c_in, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                        dcols[:, :, :, i, j].transpose(2, 0, 1)
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    return _result(out, parents, backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))

    def backward(g):
        up = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        x._accumulate(up)

    return _result(out, (x,), backward)


def _corners(px: np.ndarray, py: np.ndarray, h: int, w: int):
    """Bilinear corner indices/weights for pixel-space coordinates.

    Pixel (i, j) has its centre at (j, i). Corners outside the map get a zero
    weight (zero padding) instead of being clamped.
    """
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        # derivative of the corner weight w.r.t. px / py
        dwx = (1.0 if dx else -1.0) * wy
        dwy = (1.0 if dy else -1.0) * wx
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, yi * w + xi, 0)
        out.append((idx, wx * wy * valid, dwx * valid, dwy * valid))
    return out


def bilinear_sample(fmap: Tensor, points: Tensor) -> Tensor:
    """Sample a C x H x W map at P normalised (x, y) points in [0, 1].

    A point at ``((j + 0.5) / W, (i + 0.5) / H)`` lands exactly on pixel
    (i, j). Returns a P x C tensor; differentiable w.r.t. both arguments.
    """
    c, h, w = fmap.shape
    flat = fmap.data.reshape(c, h * w)
    px = points.data[:, 0] * w - 0.5
    py = points.data[:, 1] * h - 0.5
    corners = _corners(px, py, h, w)
    out = np.zeros((points.shape[0], c), dtype=fmap.dtype)
    for idx, wt, _, _ in corners:
        out += wt[:, None] * flat[:, idx].T

    def backward(g):
        if fmap.requires_grad:
            gflat = np.zeros((h * w, c), dtype=fmap.dtype)
            for idx, wt, _, _ in corners:
                np.add.at(gflat, idx, wt[:, None] * g)
            fmap._accumulate(gflat.T.reshape(c, h, w))
        if points.requires_grad:
            gp = np.zeros(points.shape, dtype=points.dtype)
            for idx, _, dwx, dwy in corners:
                v = (flat[:, idx].T * g).sum(axis=1)
                gp[:, 0] += dwx * v * w
                gp[:, 1] += dwy * v * h
            points._accumulate(gp)

    return _result(out, (fmap, points), backward)


def ms_deform_sample(value: Tensor, shapes: Sequence[tuple[int, int]], locations: Tensor,
                     weights: Tensor) -> Tensor:
    """Fused multi-scale deformable sampling.

    value:      (S, M, d) tokens of all levels concatenated, M heads of width d
    shapes:     per-level grid (h_l, w_l); sum of h_l * w_l == S
    locations:  (Q, M, L, K, 2) normalised sampling points per level
    weights:    (Q, M, L, K) attention weights

    Returns (Q, M * d): for each query and head, the weighted sum of the
    bilinear samples over levels and points.
    """
    s_total, m, d = value.shape
    q, m2, n_lvl, k, _ = locations.shape
    if m2 != m or n_lvl != len(shapes):
        raise ValueError(f"ms_deform_sample: heads/levels mismatch {locations.shape} vs {value.shape}, {shapes}")
    if sum(h * w for h, w in shapes) != s_total:
        raise ValueError("ms_deform_sample: level shapes do not cover value tokens")
    starts = np.concatenate([[0], np.cumsum([h * w for h, w in shapes])[:-1]])
    # per-head value matrix, rows = head * S + token
    vh = np.ascontiguousarray(value.data.transpose(1, 0, 2)).reshape(m * s_total, d)
    head_off = (np.arange(m) * s_total)[None, :, None]

    rows, cols, vals = [], [], []
    per_level = []
    row_ids = (np.arange(m)[None, :] * q + np.arange(q)[:, None])  # (Q, M)
    row_ids = np.broadcast_to(row_ids[:, :, None], (q, m, k))
    for lvl, (h, w) in enumerate(shapes):
        loc = locations.data[:, :, lvl]  # (Q, M, K, 2)
        px = loc[..., 0] * w - 0.5
        py = loc[..., 1] * h - 0.5
        corners = _corners(px, py, h, w)
        aw = weights.data[:, :, lvl]  # (Q, M, K)
        gidx = []
        for idx, wt, dwx, dwy in corners:
            g = idx + starts[lvl] + head_off
            gidx.append((g, wt, dwx, dwy))
            rows.append(row_ids.ravel())
            cols.append(g.ravel())
            vals.append((wt * aw).ravel())
        per_level.append((h, w, gidx))
    amat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m * q, m * s_total),
        dtype=value.dtype,
    )
    out = (amat @ vh).reshape(m, q, d).transpose(1, 0, 2).reshape(q, m * d)

    def backward(g):
        gh = np.ascontiguousarray(g.reshape(q, m, d).transpose(1, 0, 2)).reshape(m * q, d)
        if value.requires_grad:
            gv = (amat.T @ gh).reshape(m, s_total, d).transpose(1, 0, 2)
            value._accumulate(gv)
        if weights.requires_grad or locations.requires_grad:
            g3 = g.reshape(q, m, 1, d)
            gw = np.zeros(weights.shape, dtype=weights.dtype)
            gl = np.zeros(locations.shape, dtype=locations.dtype)
            for lvl, (h, w, gidx) in enumerate(per_level):
                aw = weights.data[:, :, lvl]
                for gi, wt, dwx, dwy in gidx:
                    # <value at corner, upstream grad> per (Q, M, K)
                    dot = (vh[gi] * g3).sum(axis=-1)
                    gw[:, :, lvl] += wt * dot
                    gl[:, :, lvl, :, 0] += aw * dwx * dot * w
                    gl[:, :, lvl, :, 1] += aw * dwy * dot * h
            if weights.requires_grad:
                weights._accumulate(gw)
            if locations.requires_grad:
                locations._accumulate(gl)

    return _result(out.astype(value.dtype), (value, locations, weights), backward)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a (C, H, W) array (no autograd)."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)
