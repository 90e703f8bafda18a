"""Pure-numpy versions of the compiled kernels (same signatures, same results)."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def _matvec(neigh, degree, x):
    padded = np.append(x, 0.0)
    return degree * x - padded[neigh].sum(axis=1)


def poisson_cg(neigh, degree, b, x0, tol, max_iter, history=None):
    neigh = np.asarray(neigh, dtype=np.int64)
    b = np.asarray(b, dtype=np.float64)
    x = np.array(x0, dtype=np.float64, copy=True)
    r = b - _matvec(neigh, degree, x)
    rmax = np.abs(r).max(initial=0.0)
    p = r.copy()
    rs = r @ r
    it = 0
    while rmax > tol and it < max_iter:
        ap = _matvec(neigh, degree, p)
        pap = p @ ap
        if pap <= 0.0:
            break
        alpha = rs / pap
        x += alpha * p
        r -= alpha * ap
        rmax = np.abs(r).max()
        it += 1
        if history is not None:
            history.append(float(rmax))
        if rmax <= tol:
            r = b - _matvec(neigh, degree, x)
            rmax = np.abs(r).max()
            if rmax <= tol:
                break
            p = r.copy()
            rs = r @ r
            continue
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    r = b - _matvec(neigh, degree, x)
    return x, it, float(np.abs(r).max(initial=0.0))


def ssim_at_centers(a, b, window, rows, cols, c1, c2):
    # correlate with mode="constant"; only fully-inside centers are read back
    def filt(img):
        return ndimage.correlate(img, window, mode="constant", cval=0.0)

    mx, my = filt(a), filt(b)
    sxx, syy, sxy = filt(a * a), filt(b * b), filt(a * b)
    mx, my = mx[rows, cols], my[rows, cols]
    vx = sxx[rows, cols] - mx * mx
    vy = syy[rows, cols] - my * my
    cxy = sxy[rows, cols] - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
