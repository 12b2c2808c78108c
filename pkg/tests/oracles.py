"""Independent reference implementations used by the tests."""

import numpy as np


def naive_conv2d(x, k, stride=1, padding="valid"):
    """Quadruple loop cross-correlation on a single (C, H, W) input."""
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    if padding == "same":
        # total padding k - 1, the extra row/column (even k) at the bottom/right
        top, left = (kh - 1) // 2, (kw - 1) // 2
        xp = np.zeros((cin, h + kh - 1, w + kw - 1))
        xp[:, top:top + h, left:left + w] = x
    else:
        xp = np.asarray(x, dtype=np.float64)
    oh = (xp.shape[1] - kh) // stride + 1
    ow = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(cin):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i * stride + a, j * stride + b] * k[o, c, a, b]
                out[o, i, j] = acc
    return out


def central_difference(f, x, h=1e-3):
    """Gradient of scalar ``f`` at float64 array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
