"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public names (``im2col``, ``col2im``, ``cell_mean_abs_diff``,
``discounted_returns``) are bound to one of the two variants according to
``UNREAL_NUMBA``. Both variants stay importable for benchmarking and for
cross-checking each other in the tests.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit


def out_size(size, k, stride):
    return (size - k) // stride + 1


# --- im2col -----------------------------------------------------------------


def im2col_numpy(x, kh, kw, stride):
    n, c, h, w = x.shape
    ho, wo = out_size(h, kh, stride), out_size(w, kw, stride)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, c, ho, wo, kh, kw) -> (n, ho, wo, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)


@njit
def _im2col_loops(x, kh, kw, stride):
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.empty((n, ho, wo, c * kh * kw), dtype=x.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                col = 0
                for ch in range(c):
                    for p in range(kh):
                        row = i * stride + p
                        for q in range(kw):
                            out[b, i, j, col] = x[b, ch, row, j * stride + q]
                            col += 1
    return out


def im2col_numba(x, kh, kw, stride):
    return _im2col_loops(np.ascontiguousarray(x), kh, kw, stride)


# --- col2im (scatter-add adjoint of im2col) ---------------------------------


def col2im_numpy(cols, c, h, w, kh, kw, stride):
    n, ho, wo, _ = cols.shape
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for p in range(kh):
        for q in range(kw):
            out[:, :, p:p + hspan:stride, q:q + wspan:stride] += cols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    return out


@njit
def _col2im_loops(cols, c, h, w, kh, kw, stride):
    n, ho, wo, _ = cols.shape
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                col = 0
                for ch in range(c):
                    for p in range(kh):
                        row = i * stride + p
                        for q in range(kw):
                            out[b, ch, row, j * stride + q] += cols[b, i, j, col]
                            col += 1
    return out


def col2im_numba(cols, c, h, w, kh, kw, stride):
    return _col2im_loops(np.ascontiguousarray(cols), c, h, w, kh, kw, stride)


# --- pixel-change pseudo rewards ----------------------------------------------


def _crop_origin(size, crop):
    return (size - crop) // 2


def cell_mean_abs_diff_numpy(prev, cur, crop, grid):
    c, h, w = cur.shape
    cell = crop // grid
    top, left = _crop_origin(h, crop), _crop_origin(w, crop)
    d = np.abs(cur[:, top:top + crop, left:left + crop] - prev[:, top:top + crop, left:left + crop])
    return d.reshape(c, grid, cell, grid, cell).mean(axis=(0, 2, 4))


@njit
def _cell_mean_abs_diff_loops(prev, cur, top, left, grid, cell):
    c = cur.shape[0]
    out = np.zeros((grid, grid))
    norm = 1.0 / (c * cell * cell)
    for i in range(grid):
        for j in range(grid):
            acc = 0.0
            for ch in range(c):
                for p in range(cell):
                    r = top + i * cell + p
                    for q in range(cell):
                        s = left + j * cell + q
                        acc += abs(cur[ch, r, s] - prev[ch, r, s])
            out[i, j] = acc * norm
    return out


def cell_mean_abs_diff_numba(prev, cur, crop, grid):
    _, h, w = cur.shape
    return _cell_mean_abs_diff_loops(
        np.ascontiguousarray(prev, dtype=np.float64),
        np.ascontiguousarray(cur, dtype=np.float64),
        _crop_origin(h, crop), _crop_origin(w, crop), grid, crop // grid,
    )


# --- discounted returns -------------------------------------------------------


def discounted_returns_numpy(rewards, bootstrap, gamma):
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = np.array(bootstrap, dtype=np.float64)
    for t in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@njit
def _discounted_returns_loops(rewards, bootstrap, gamma):
    t_len, m = rewards.shape
    out = np.empty_like(rewards)
    for k in range(m):
        acc = bootstrap[k]
        for t in range(t_len - 1, -1, -1):
            acc = rewards[t, k] + gamma * acc
            out[t, k] = acc
    return out


def discounted_returns_numba(rewards, bootstrap, gamma):
    rewards = np.asarray(rewards, dtype=np.float64)
    tail = rewards.shape[1:]
    flat = np.ascontiguousarray(rewards.reshape(rewards.shape[0], -1))
    boot = np.broadcast_to(np.asarray(bootstrap, dtype=np.float64), tail).reshape(-1).copy()
    return _discounted_returns_loops(flat, boot, float(gamma)).reshape(rewards.shape)


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    cell_mean_abs_diff = cell_mean_abs_diff_numba
    discounted_returns = discounted_returns_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    cell_mean_abs_diff = cell_mean_abs_diff_numpy
    discounted_returns = discounted_returns_numpy
