"""Poisson (seamless-cloning) blending of a generated patch into a target slice.

For each pixel ``q`` of the region, with ``N(q)`` its in-image 4-neighbours::

    |N(q)| f_q - sum_{r in N(q), r in region} f_r
        = sum_{r in N(q), r not in region} target_r + sum_{r in N(q)} (source_q - source_r)

The system is symmetric positive definite whenever every connected piece of the
region touches at least one pixel outside it; it is solved by conjugate
gradients in :mod:`artinp._core`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _core
from ._core import _fallback

_OFFSETS = ((-1, 0), (1, 0), (0, -1), (0, 1))


class BlendError(RuntimeError):
    pass


@dataclass
class BlendProblem:
    source: np.ndarray
    target: np.ndarray
    region: np.ndarray

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.region = np.asarray(self.region).astype(bool)
        if not (self.source.shape == self.target.shape == self.region.shape):
            raise ValueError(
                f"shape mismatch: source {self.source.shape}, target {self.target.shape}, "
                f"region {self.region.shape}")


@dataclass
class PoissonSystem:
    coords: tuple[np.ndarray, np.ndarray]
    neigh: np.ndarray  # (n, 4) int64, index of a region neighbour or -1
    degree: np.ndarray
    rhs: np.ndarray


def assemble(p: BlendProblem) -> PoissonSystem:
    region = p.region
    h, w = region.shape
    rows, cols = np.nonzero(region)
    n = rows.size
    index = np.full(region.shape, -1, dtype=np.int64)
    index[rows, cols] = np.arange(n)
    neigh = np.full((n, 4), -1, dtype=np.int64)
    degree = np.zeros(n)
    rhs = np.zeros(n)
    src = p.source[rows, cols]
    for k, (dr, dc) in enumerate(_OFFSETS):
        rr, cc = rows + dr, cols + dc
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rr_i, cc_i = rr[inside], cc[inside]
        degree[inside] += 1.0
        rhs[inside] += src[inside] - p.source[rr_i, cc_i]
        nb = index[rr_i, cc_i]
        in_region = nb >= 0
        col = np.full(inside.sum(), -1, dtype=np.int64)
        col[in_region] = nb[in_region]
        neigh[inside, k] = col
        boundary = np.flatnonzero(inside)[~in_region]
        rhs[boundary] += p.target[rr_i[~in_region], cc_i[~in_region]]
    return PoissonSystem((rows, cols), neigh, degree, rhs)


def _check_anchored(region):
    labels, n = ndimage.label(region)
    if n == 0:
        return
    outside = ~region
    touching = ndimage.binary_dilation(outside) & region
    anchored = np.unique(labels[touching])
    if np.setdiff1d(np.arange(1, n + 1), anchored).size:
        raise BlendError("a region component has no pixels outside it; Poisson system is singular")


def apply_operator(system: PoissonSystem, x: np.ndarray) -> np.ndarray:
    padded = np.append(x, 0.0)
    return system.degree * x - padded[system.neigh].sum(axis=1)


def laplacian_residual(f, p: BlendProblem) -> float:
    """Max-norm of ``A f - b`` over the region (0 for an empty region)."""
    if not p.region.any():
        return 0.0
    system = assemble(p)
    rows, cols = system.coords
    x = np.asarray(f, dtype=np.float64)[rows, cols]
    return float(np.abs(apply_operator(system, x) - system.rhs).max())


def blend(p: BlendProblem, tol: float = 1e-6, *, max_iter: int | None = None,
          init: str | int = "target", history_csv=None) -> np.ndarray:
    """Solve the blend problem; pixels outside the region come back bit-identical.

    ``init`` picks the CG starting point: ``"target"``, ``"source"`` or an
    integer seed for a random start.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    out = p.target.copy()
    if not p.region.any():
        return out
    _check_anchored(p.region)
    system = assemble(p)
    rows, cols = system.coords
    n = rows.size
    if init == "target":
        x0 = p.target[rows, cols]
    elif init == "source":
        x0 = p.source[rows, cols]
    else:
        x0 = np.random.default_rng(int(init)).uniform(p.target.min(), p.target.max(), n)
    max_iter = 10 * n if max_iter is None else max_iter
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    if history_csv is None:
        x, iters, resid = _core.poisson_cg(system.neigh, system.degree, system.rhs,
                                           x0, float(tol), int(max_iter))
    else:
        # the compiled loop does not record per-iteration residuals
        history = []
        x, iters, resid = _fallback.poisson_cg(system.neigh, system.degree, system.rhs,
                                               x0, float(tol), int(max_iter), history)
        with open(history_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "residual_inf"])
            writer.writerows(enumerate(history, start=1))
    if resid > tol:
        raise BlendError(f"CG did not converge in {iters} iterations (residual {resid:.3e} > {tol:.1e})")
    out[rows, cols] = x
    return out


def poisson_blend(source, target, region, tol: float = 1e-6, **kwargs) -> np.ndarray:
    return blend(BlendProblem(source, target, region), tol, **kwargs)
