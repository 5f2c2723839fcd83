"""Independent reference implementations used by the tests."""

import numpy as np


def conv2d_loops(x, k, stride=1):
    """Zero-padded cross-correlation by explicit loops."""
    c_in, h, w = x.shape
    c_out, _, ks, _ = k.shape
    p = (ks - 1) // 2
    ho, wo = -(-h // stride), -(-w // stride)
    out = np.zeros((c_out, ho, wo))
    for co in range(c_out):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ci in range(c_in):
                    for i in range(ks):
                        for j in range(ks):
                            yy, xx = oy * stride + i - p, ox * stride + j - p
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += k[co, ci, i, j] * x[ci, yy, xx]
                out[co, oy, ox] = acc
    return out


def conv2d_transpose_loops(x, k, stride=2):
    """Scatter form: each input pixel spreads its kernel onto the upsampled grid."""
    c_in, h, w = x.shape
    c_out, _, ks, _ = k.shape
    p = (ks - 1) // 2
    ho, wo = h * stride, w * stride
    out = np.zeros((c_out, ho, wo))
    for ci in range(c_in):
        for iy in range(h):
            for ix in range(w):
                for co in range(c_out):
                    for i in range(ks):
                        for j in range(ks):
                            yy, xx = iy * stride + i - p, ix * stride + j - p
                            if 0 <= yy < ho and 0 <= xx < wo:
                                out[co, yy, xx] += k[co, ci, i, j] * x[ci, iy, ix]
    return out


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at ``x`` (float64 array) by central differences."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def bd_rate_trapezoid(anchor_rate, anchor_q, test_rate, test_q, samples=200001):
    """BD-rate from the same cubic fits, integrated numerically."""
    pa = np.polyfit(anchor_q, np.log10(anchor_rate), 3)
    pt = np.polyfit(test_q, np.log10(test_rate), 3)
    lo = max(min(anchor_q), min(test_q))
    hi = min(max(anchor_q), max(test_q))
    q = np.linspace(lo, hi, samples)
    diff = np.polyval(pt, q) - np.polyval(pa, q)
    avg = np.sum((diff[1:] + diff[:-1]) * 0.5 * np.diff(q)) / (hi - lo)
    return (10 ** avg - 1) * 100


def bt709_limited_to_rgb(y, cb, cr):
    """Direct matrix form of the limited-range BT.709 inverse, float64."""
    kr, kb = 0.2126, 0.0722
    kg = 1 - kr - kb
    m = np.array([
        [1.0, 0.0, 2 * (1 - kr)],
        [1.0, -2 * (1 - kb) * kb / kg, -2 * (1 - kr) * kr / kg],
        [1.0, 2 * (1 - kb), 0.0],
    ])
    v = np.stack([(np.asarray(y, float) - 16) / 219, (np.asarray(cb, float) - 128) / 224,
                  (np.asarray(cr, float) - 128) / 224])
    return np.clip(np.tensordot(m, v, axes=1), 0, 1)


def central_difference_terms(terms, x, h=1e-5):
    """Gradient of ``sum(terms(x))`` by central differences taken term by term.

    Unaffected terms cancel exactly before summation, so round-off scales with
    the perturbed terms only rather than with the whole loss.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        tp = np.asarray(terms(x), dtype=np.float64)
        flat[i] = old - h
        tm = np.asarray(terms(x), dtype=np.float64)
        flat[i] = old
        gflat[i] = np.sum(tp - tm) / (2 * h)
    return g
