"""Independent reference implementations shared by the unit and acceptance tests."""

import math

import numpy as np


def j0_series(x: float, terms: int = 60) -> float:
    """Bessel J0 from its power series, independent of scipy."""
    total, term = 0.0, 1.0
    for k in range(terms):
        if k:
            term *= -(x * x / 4) / (k * k)
        total += term
    return total


def naive_psnr(a, b):
    total, n = 0, 0
    for x, y in zip(a.pixels.ravel().tolist(), b.pixels.ravel().tolist()):
        total += (x - y) ** 2
        n += 1
    m = total / n
    return math.inf if m == 0 else 10 * math.log10(255 * 255 / m)


def naive_ssim(a, b):
    """Loop-based reference: BT.601 luma, 11x11 Gaussian(1.5) window, valid positions."""
    def luma(img):
        p = img.pixels.astype(float)
        return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]
    x, y = luma(a), luma(b)
    g = [math.exp(-((i - 5) ** 2) / (2 * 1.5**2)) for i in range(11)]
    s = sum(g)
    w = np.outer(g, g) / s / s
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = np.sum(w * px), np.sum(w * py)
            vx = np.sum(w * (px - mx) ** 2)
            vy = np.sum(w * (py - my) ** 2)
            cxy = np.sum(w * (px - mx) * (py - my))
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))
