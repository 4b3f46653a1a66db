"""Independent oracles shared by the tests.

Nothing here calls into the autodiff machinery: gradients are central
finite differences over raw numpy arrays.
"""

import numpy as np

FD_STEP = 1e-6  # small enough that probes rarely straddle a ReLU kink


def numeric_grad(f, arrays, h=FD_STEP, coords=None):
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place.

    ``coords`` optionally maps array index -> list of flat indices to probe;
    other entries are left as NaN.
    """
    grads = []
    for i, a in enumerate(arrays):
        g = np.full(a.shape, np.nan)
        flat_a, flat_g = a.reshape(-1), g.reshape(-1)
        probe = range(a.size) if coords is None else coords[i]
        for j in probe:
            old = flat_a[j]
            flat_a[j] = old + h
            up = f()
            flat_a[j] = old - h
            down = f()
            flat_a[j] = old
            flat_g[j] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-10:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / scale)


def conv2d_loops(x, w, stride):
    """Direct valid convolution, one output element at a time."""
    c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((f, ho, wo))
    for o in range(f):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = np.sum(x[:, i * stride:i * stride + kh, j * stride:j * stride + kw] * w[o])
    return out


def cell_change_loops(prev, cur, crop, grid):
    """Per-cell mean absolute difference by explicit scalar loops."""
    c, h, w = cur.shape
    top, left = (h - crop) // 2, (w - crop) // 2
    cell = crop // grid
    out = np.zeros((grid, grid))
    for i in range(grid):
        for j in range(grid):
            total = 0.0
            for ch in range(c):
                for p in range(cell):
                    for q in range(cell):
                        r, s = top + i * cell + p, left + j * cell + q
                        total += abs(float(cur[ch, r, s]) - float(prev[ch, r, s]))
            out[i, j] = total / (c * cell * cell)
    return out


def returns_by_sums(rewards, bootstrap, gamma):
    """R_i = sum_k gamma^k r_{i+k} + gamma^(n-i) bootstrap, expanded explicitly."""
    n = len(rewards)
    return [sum(gamma ** k * rewards[i + k] for k in range(n - i)) + gamma ** (n - i) * bootstrap for i in range(n)]
