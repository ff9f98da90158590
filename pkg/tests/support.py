"""Helpers shared by the test modules: micro problems and scalar-loop metric references."""

import math

from dvsm.checks import micro_problem as setup, random_micro_config, ring_cameras

__all__ = ["setup", "random_micro_config", "ring_cameras", "ref_psnr", "ref_ssim"]


# -- scalar-loop references ----------------------------------------------------------

def ref_psnr(a, b):
    total, n = 0.0, 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) ** 2
        n += 1
    return 10 * math.log10(1.0 / (total / n))


def ref_ssim(a, b):
    def luma(img):
        H, W = img.shape[1:]
        return [[0.299 * img[0, i, j] + 0.587 * img[1, i, j] + 0.114 * img[2, i, j] for j in range(W)]
                for i in range(H)]

    x, y = luma(a), luma(b)
    H, W = len(x), len(x[0])
    g = [math.exp(-((k - 5) ** 2) / (2 * 1.5 ** 2)) for k in range(11)]
    s = sum(g)
    g = [v / s for v in g]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(H - 10):
        for j in range(W - 10):
            mx = my = xx = yy = xy = 0.0
            for u in range(11):
                for v in range(11):
                    w = g[u] * g[v]
                    p, q = x[i + u][j + v], y[i + u][j + v]
                    mx += w * p
                    my += w * q
                    xx += w * p * p
                    yy += w * q * q
                    xy += w * p * q
            sx, sy, sxy = xx - mx * mx, yy - my * my, xy - mx * my
            vals.append((2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sx + sy + c2)))
    return sum(vals) / len(vals)
