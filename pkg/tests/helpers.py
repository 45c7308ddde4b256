"""Shared oracles and numeric helpers used across the test modules."""

import numpy as np


def area_resize_bruteforce(arr, new_w, new_h):
    """Resample by literally integrating pixel areas over each output cell.

    Treats the image as a piecewise-constant function on a grid of unit
    squares and averages it over each output rectangle by accumulating
    overlap * value one source pixel at a time.
    """
    in_h, in_w = arr.shape
    sy = in_h / new_h
    sx = in_w / new_w
    out = np.zeros((new_h, new_w))
    for i in range(new_h):
        y0, y1 = i * sy, (i + 1) * sy
        for j in range(new_w):
            x0, x1 = j * sx, (j + 1) * sx
            acc = 0.0
            area = 0.0
            for r in range(int(np.floor(y0)), min(int(np.ceil(y1)), in_h)):
                oy = min(y1, r + 1.0) - max(y0, float(r))
                if oy <= 0:
                    continue
                for c in range(int(np.floor(x0)), min(int(np.ceil(x1)), in_w)):
                    ox = min(x1, c + 1.0) - max(x0, float(c))
                    if ox <= 0:
                        continue
                    acc += oy * ox * arr[r, c]
                    area += oy * ox
            out[i, j] = acc / area
    return out


def ssim_map_bruteforce(x, y, window, c1, c2):
    """Per-window SSIM via numpy's own mean/var/cov, one window at a time."""
    h, w = x.shape
    oh, ow = h - window + 1, w - window + 1
    out = np.empty((oh, ow))
    for i in range(oh):
        for j in range(ow):
            xw = x[i : i + window, j : j + window].ravel()
            yw = y[i : i + window, j : j + window].ravel()
            mx, my = xw.mean(), yw.mean()
            vx = xw.var(ddof=1)
            vy = yw.var(ddof=1)
            cxy = float(np.dot(xw - mx, yw - my)) / (xw.size - 1)
            out[i, j] = ((2 * mx * my + c1) * (2 * cxy + c2)) / (
                (mx * mx + my * my + c1) * (vx + vy + c2)
            )
    return out


def conv2d_bruteforce(x, weight, bias=None, stride=1, padding=0):
    """Seven-loop convolution (cross-correlation) oracle in double precision."""
    b, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    y = np.zeros((b, cout, oh, ow))
    for bi in range(b):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    weight[o, c, u, v]
                                    * xp[bi, c, i * stride + u, j * stride + v]
                                )
                    y[bi, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return y


def finite_difference_grad(fn, x, eps=1e-6):
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = fn(x)
        flat[k] = orig - eps
        lo = fn(x)
        flat[k] = orig
        gflat[k] = (hi - lo) / (2 * eps)
    return g


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)
