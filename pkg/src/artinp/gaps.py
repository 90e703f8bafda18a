"""Artificial vertical-strip gaps for CBCT slices and volumes."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .volume_io import (COMPLETION_SIZE, SliceImage, VolumeHU, frame_geometry,
                        frame_region_to_native)

MIN_WIDTH = 48
MAX_WIDTH = 96
PER_SLICE = "per_slice"
PER_PATIENT = "per_patient"


class GapError(ValueError):
    pass


@dataclass(frozen=True)
class GapSpec:
    x_start: int
    width: int
    scope: str = PER_SLICE
    seed: int | None = None

    def mask(self, shape) -> np.ndarray:
        h, w = shape
        if self.x_start < 0 or self.x_start + self.width > w:
            raise GapError(f"gap [{self.x_start}, {self.x_start + self.width}) does not fit width {w}")
        m = np.zeros((h, w), dtype=np.uint8)
        m[:, self.x_start:self.x_start + self.width] = 1
        return m


def _rng(rng_state):
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def sample_gap(image_width: int, rng_state=None, scope=PER_SLICE,
               min_width=MIN_WIDTH, max_width=MAX_WIDTH) -> GapSpec:
    """Width uniform on the integers ``[min_width, max_width]``, start uniform over valid placements."""
    if image_width < max_width:
        raise GapError(f"image width {image_width} < maximum gap width {max_width}")
    rng = _rng(rng_state)
    width = int(rng.integers(min_width, max_width + 1))
    x_start = int(rng.integers(0, image_width - width + 1))
    seed = rng_state if isinstance(rng_state, (int, np.integer)) else None
    return GapSpec(x_start, width, scope, None if seed is None else int(seed))


def apply_gap(img, spec: GapSpec, fill: float):
    """Return ``(gapped, mask)``; pixels outside the strip are untouched."""
    pixels = img.pixels if isinstance(img, SliceImage) else np.asarray(img)
    mask = spec.mask(pixels.shape)
    gapped = pixels.copy()
    gapped[mask.astype(bool)] = fill
    if isinstance(img, SliceImage):
        gapped = SliceImage(gapped, img.domain, img.plane, img.index, img.norm)
    return gapped, mask


def patient_gap(vol: VolumeHU, seed, fill: int, *, sagittal_mode="crop",
                frame=(COMPLETION_SIZE, COMPLETION_SIZE)):
    """Sample one gap per patient and cut it out of every sagittal slice.

    The strip is drawn in the completion frame and mapped back to native
    voxels, so in crop mode it covers frame rows only. Returns
    ``(gapped_vol, mask_vol, spec)``.
    """
    geom = frame_geometry(vol.shape, sagittal_mode, frame)
    spec = sample_gap(frame[1], seed, scope=PER_PATIENT)
    native = frame_region_to_native(spec.mask(frame).astype(bool), geom)
    mask_vol = np.broadcast_to(native, vol.shape).astype(np.uint8)
    data = vol.data.copy()
    data[mask_vol.astype(bool)] = fill
    gapped = VolumeHU(data, vol.spacing, vol.patient_id, vol.modality,
                      {**vol.meta, "gap": asdict(spec)})
    return gapped, mask_vol, spec


def gap_manifest(patient: str, spec: GapSpec) -> dict:
    return {"patient": patient, "scope": spec.scope, "x_start": spec.x_start,
            "width": spec.width, "seed": spec.seed}


def write_manifest(entries, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(list(entries), indent=2))
    return path


def read_manifest(path) -> list[dict]:
    return json.loads(Path(path).read_text())
