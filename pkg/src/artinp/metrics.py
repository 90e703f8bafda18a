"""Masked MAE%, PSNR and SSIM, slice-wise over the body region."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _core
from .volume_io import HU_MIN, HU_RANGE, VolumeHU, body_mask

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03

# HU window width and the window max on a nonnegative (HU + 1024) scale
DEFAULT_RANGE = float(HU_RANGE)
DEFAULT_IMAX = float(HU_RANGE)


class MetricError(ValueError):
    pass


def _prep(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    mask = np.ones(a.shape, bool) if mask is None else np.asarray(mask).astype(bool)
    if mask.shape != a.shape:
        raise MetricError(f"mask shape {mask.shape} does not match image {a.shape}")
    if not mask.any():
        raise MetricError("empty mask")
    return a, b, mask


def mae_pct(ref, est, mask=None, value_range=DEFAULT_RANGE) -> float:
    if value_range <= 0:
        raise MetricError("range must be positive")
    a, b, mask = _prep(ref, est, mask)
    n = mask.sum()
    return float(100.0 / (n * value_range) * np.abs(a[mask] - b[mask]).sum())


def psnr(ref, est, mask=None, i_max=DEFAULT_IMAX) -> float:
    """PSNR in dB; identical inputs give the capped value ``PSNR_CAP``."""
    a, b, mask = _prep(ref, est, mask)
    mse = np.mean((a[mask] - b[mask]) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(i_max * i_max / mse)))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_centers(mask, size=SSIM_WINDOW):
    """Row/col indices of mask pixels whose window lies fully inside the image."""
    half = size // 2
    valid = np.zeros(mask.shape, bool)
    valid[half:mask.shape[0] - half, half:mask.shape[1] - half] = True
    rows, cols = np.nonzero(valid & mask)
    return rows.astype(np.int64), cols.astype(np.int64)


def ssim(ref, est, mask=None, data_range=DEFAULT_RANGE, *, window=SSIM_WINDOW,
         sigma=SSIM_SIGMA) -> float:
    """Gaussian-windowed SSIM averaged over windows centred inside ``mask``."""
    a, b, mask = _prep(ref, est, mask)
    rows, cols = ssim_centers(mask, window)
    if rows.size == 0:
        raise MetricError("mask holds no complete SSIM window")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    vals = _core.ssim_at_centers(np.ascontiguousarray(a), np.ascontiguousarray(b),
                                 gaussian_window(window, sigma), rows, cols, c1, c2)
    return float(np.mean(vals))


@dataclass
class MetricReport:
    per_slice: list[dict] = field(default_factory=list)
    mask_method: str = ""
    value_range: float = DEFAULT_RANGE
    i_max: float = DEFAULT_IMAX
    label: str = ""

    METRICS = ("mae_pct", "psnr_db", "ssim")

    def aggregates(self) -> dict:
        out = {}
        for m in self.METRICS:
            vals = np.array([r[m] for r in self.per_slice], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            by_patient = {}
            for r in self.per_slice:
                if np.isfinite(r[m]):
                    by_patient.setdefault(r["patient"], []).append(r[m])
            pmeans = np.array([np.mean(v) for v in by_patient.values()])
            out[m] = {
                "mean": float(vals.mean()) if vals.size else float("nan"),
                "std_slices": float(vals.std()) if vals.size else float("nan"),
                "std_patients": float(pmeans.std()) if pmeans.size else float("nan"),
                "n_slices": int(vals.size),
                "n_patients": len(by_patient),
            }
        return out

    def extend(self, other: "MetricReport") -> "MetricReport":
        self.per_slice.extend(other.per_slice)
        self.mask_method = self.mask_method or other.mask_method
        return self

    def to_json(self) -> dict:
        return {"label": self.label, "mask_method": self.mask_method, "R": self.value_range,
                "I_MAX": self.i_max, "aggregates": self.aggregates(),
                "n_rows": len(self.per_slice)}

    def write(self, directory, stem="metrics", extra: dict | None = None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        fields = ["patient", "index", "mae_pct", "psnr_db", "ssim", "psnr_capped", "mask_pixels"]
        with open(directory / f"{stem}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.per_slice)
        payload = self.to_json()
        if extra:
            payload.update(extra)
        (directory / f"{stem}.json").write_text(json.dumps(payload, indent=2))

    def summary_row(self) -> str:
        agg = self.aggregates()
        return "{:<24s} {:>6.2f} ± {:<5.2f} {:>6.2f} ± {:<5.2f} {:>6.3f} ± {:<6.3f}".format(
            self.label or "model",
            agg["mae_pct"]["mean"], agg["mae_pct"]["std_slices"],
            agg["psnr_db"]["mean"], agg["psnr_db"]["std_slices"],
            agg["ssim"]["mean"], agg["ssim"]["std_slices"])


def summary_table(reports) -> str:
    head = "{:<24s} {:^14s} {:^14s} {:^16s}".format("MODEL", "MAE%", "PSNR", "SSIM")
    return "\n".join([head, "-" * len(head)] + [r.summary_row() for r in reports])


def evaluate_pair(ct, sct, masks=None, *, patient="", value_range=DEFAULT_RANGE,
                  i_max=DEFAULT_IMAX, label="") -> MetricReport:
    """Per-axial-slice metrics between a CT and a synthetic CT volume.

    ``masks`` is an ``(X, Y, Z)`` boolean array; by default body masks are
    computed from the CT. Slices with empty masks are skipped. Values are
    shifted onto ``HU + 1024`` before SSIM so luminance terms are nonnegative.
    """
    ct_data = ct.data if isinstance(ct, VolumeHU) else np.asarray(ct)
    sct_data = sct.data if isinstance(sct, VolumeHU) else np.asarray(sct)
    if ct_data.shape != sct_data.shape:
        raise MetricError(f"misaligned volumes {ct_data.shape} vs {sct_data.shape}")
    patient = patient or getattr(ct, "patient_id", "")
    method = "supplied"
    report = MetricReport(value_range=value_range, i_max=i_max, label=label)
    for k in range(ct_data.shape[2]):
        a = ct_data[:, :, k].astype(np.float64)
        b = sct_data[:, :, k].astype(np.float64)
        if masks is None:
            bm = body_mask(ct_data[:, :, k])
            m, method = bm.mask, bm.method_tag
        else:
            m = np.asarray(masks[:, :, k]).astype(bool)
        if not m.any():
            continue
        p = psnr(a, b, m, i_max)
        try:
            s = ssim(a - HU_MIN, b - HU_MIN, m, value_range)
        except MetricError:
            s = float("nan")
        report.per_slice.append({
            "patient": patient, "index": k,
            "mae_pct": mae_pct(a, b, m, value_range), "psnr_db": p, "ssim": s,
            "psnr_capped": bool(np.array_equal(a[m], b[m])), "mask_pixels": int(m.sum()),
        })
    report.mask_method = method
    return report
