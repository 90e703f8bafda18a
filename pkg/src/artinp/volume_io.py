"""Volume ingest, intensity normalization, slicing, body masks and patient splits.

Volumes are indexed ``(X, Y, Z)``: axial slice ``k`` is ``data[:, :, k]`` and
sagittal slice ``i`` is ``data[i, :, :]`` with rows along Y and columns along Z
(the cranio-caudal axis). Sagittal slices are brought to a fixed completion
frame (160x160 by default) by center-crop or by resampling.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

HU_MIN = -1024
HU_MAX = 3071
HU_RANGE = HU_MAX - HU_MIN  # 4095

HU16 = "HU16"
UNIT01 = "UNIT01"
SIGNED11 = "SIGNED11"
AXIAL = "axial"
SAGITTAL = "sagittal"
MODALITIES = ("CBCT", "CT", "sCBCT", "sCT")

COMPLETION_SIZE = 160
AXIAL_SIZE = 256


class VolumeError(ValueError):
    """Raised for malformed volumes, slices or slice geometry."""


@dataclass
class VolumeHU:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    patient_id: str = ""
    modality: str = "CT"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise VolumeError(f"expected a 3-D volume, got {self.data.ndim}-D")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be strictly positive, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise VolumeError(f"unknown modality {self.modality!r}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class SliceImage:
    pixels: np.ndarray
    domain: str = HU16
    plane: str = AXIAL
    index: int = 0
    norm: dict | None = None

    @property
    def size(self):
        return self.pixels.shape


@dataclass
class DatasetSplit:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int

    def to_json(self) -> dict:
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSplit":
        return cls(list(obj["train"]), list(obj["val"]), list(obj["test"]), int(obj["seed"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class BodyMask:
    mask: np.ndarray
    method_tag: str
    empty: bool = False


@dataclass
class SliceGeometry:
    """How completion-frame slices map back onto the native volume.

    ``base`` keeps the untouched volume, and ``frames`` the slices exactly as
    extracted, so reinsertion only rewrites voxels whose frame pixels changed.
    """

    plane: str
    volume_shape: tuple[int, int, int]
    mode: str | None = None  # None (no reframing), "crop" or "resize"
    frame_size: tuple[int, int] | None = None
    offsets: tuple[int, int] = (0, 0)
    base: np.ndarray | None = None
    frames: list[np.ndarray] | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    patient_id: str = ""
    modality: str = "CT"


# --------------------------------------------------------------------------- ingest


def load_volume(path, *, modality="CT", patient_id=None, strict_spacing=True,
                spacing_tol=1e-3) -> VolumeHU:
    import nibabel as nib

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        img = nib.load(str(path))
        raw = np.asarray(img.dataobj)
    except Exception as exc:  # nibabel raises several unrelated types
        raise VolumeError(f"cannot read volume {path}: {exc}") from exc
    if raw.ndim != 3:
        raise VolumeError(f"{path}: expected 3-D data, got shape {raw.shape}")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    if any(abs(s - 1.0) > spacing_tol for s in spacing):
        msg = f"{path}: anisotropic spacing {spacing}; expected isotropic 1 mm"
        if strict_spacing:
            raise VolumeError(msg)
        warnings.warn(msg)
    if patient_id is None:
        patient_id = path.parent.name
    return volume_from_array(raw, spacing=spacing, patient_id=patient_id, modality=modality)


def volume_from_array(raw, *, spacing=(1.0, 1.0, 1.0), patient_id="", modality="CT") -> VolumeHU:
    """Round to integer HU, clamp into the window and record the original extrema."""
    raw = np.asarray(raw)
    rounded = np.rint(raw.astype(np.float64)) if raw.dtype.kind == "f" else raw.astype(np.int64)
    lo, hi = float(rounded.min()), float(rounded.max())
    clamped = np.clip(rounded, HU_MIN, HU_MAX).astype(np.int16)
    meta = {
        "original_min": lo,
        "original_max": hi,
        "clamped": bool(lo < HU_MIN or hi > HU_MAX),
        "axis_order": "XYZ",
    }
    return VolumeHU(clamped, tuple(spacing), str(patient_id), modality, meta)


def save_volume(vol: VolumeHU, path, description: str = "") -> Path:
    import nibabel as nib

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(vol.data.astype(np.int16), np.diag([*vol.spacing, 1.0]))
    img.header.set_zooms(vol.spacing)
    if description:
        img.header["descrip"] = description[:79].encode()
    nib.save(img, str(path))
    return path


# ------------------------------------------------------------------ normalization


def _affine(target):
    if target == UNIT01:
        return 1.0 / HU_RANGE, -HU_MIN / HU_RANGE
    if target == SIGNED11:
        return 2.0 / HU_RANGE, -2.0 * HU_MIN / HU_RANGE - 1.0
    raise ValueError(f"unknown target domain {target!r}")


def normalize(img: SliceImage, target: str) -> SliceImage:
    if img.domain != HU16:
        raise VolumeError(f"normalize expects an HU16 slice, got {img.domain}")
    scale, shift = _affine(target)
    pixels = img.pixels.astype(np.float64) * scale + shift
    norm = {"domain": target, "scale": scale, "shift": shift, "window": [HU_MIN, HU_MAX]}
    return SliceImage(pixels, target, img.plane, img.index, norm)


def normalize_array(hu, target=UNIT01) -> np.ndarray:
    scale, shift = _affine(target)
    return np.asarray(hu, dtype=np.float64) * scale + shift


def denormalize_array(x, target=UNIT01) -> np.ndarray:
    scale, shift = _affine(target)
    hu = np.rint((np.asarray(x, dtype=np.float64) - shift) / scale)
    return np.clip(hu, HU_MIN, HU_MAX).astype(np.int16)


def denormalize(img: SliceImage) -> SliceImage:
    if img.norm is None:
        raise VolumeError("slice carries no normalization metadata")
    scale, shift = img.norm["scale"], img.norm["shift"]
    hu = np.rint((img.pixels.astype(np.float64) - shift) / scale)
    hu = np.clip(hu, HU_MIN, HU_MAX).astype(np.int16)
    return SliceImage(hu, HU16, img.plane, img.index, None)


# ------------------------------------------------------------------------ slicing


def _crop_offsets(shape2d, frame):
    h, w = shape2d
    fh, fw = frame
    if h < fh or w < fw:
        raise VolumeError(f"sagittal slice {h}x{w} is smaller than the crop target {fh}x{fw}")
    return (h - fh) // 2, (w - fw) // 2


def _resample(img, shape, order=1):
    img = np.asarray(img, dtype=np.float64)
    zoom = (shape[0] / img.shape[0], shape[1] / img.shape[1])
    out = ndimage.zoom(img, zoom, order=order, mode="nearest", grid_mode=True)
    if out.shape != tuple(shape):  # zoom rounds the output shape
        out = out[: shape[0], : shape[1]]
    return out


def _to_frame(sl, geom: SliceGeometry):
    if geom.mode == "crop":
        oy, oz = geom.offsets
        fh, fw = geom.frame_size
        return sl[oy:oy + fh, oz:oz + fw].copy()
    if geom.mode == "resize":
        return np.rint(_resample(sl, geom.frame_size)).astype(np.int16)
    return sl.copy()


def frame_region_to_native(region, geom: SliceGeometry) -> np.ndarray:
    """Map a boolean frame-space region onto the native sagittal slice grid."""
    region = np.asarray(region, dtype=bool)
    native = np.zeros(geom.volume_shape[1:], dtype=bool)
    if geom.mode == "crop":
        oy, oz = geom.offsets
        fh, fw = geom.frame_size
        native[oy:oy + fh, oz:oz + fw] = region
        return native
    if geom.mode == "resize":
        return _resample(region.astype(np.float64), native.shape, order=1) > 0.0
    return region.copy()


def native_region_to_frame(region, geom: SliceGeometry) -> np.ndarray:
    region = np.asarray(region, dtype=bool)
    if geom.mode == "crop":
        oy, oz = geom.offsets
        fh, fw = geom.frame_size
        return region[oy:oy + fh, oz:oz + fw].copy()
    if geom.mode == "resize":
        return _resample(region.astype(np.float64), geom.frame_size, order=0) > 0.5
    return region.copy()


def frame_geometry(vol_shape, mode="crop", frame=(COMPLETION_SIZE, COMPLETION_SIZE)) -> SliceGeometry:
    """Geometry of the sagittal completion frame without extracting any slices."""
    geom = SliceGeometry(SAGITTAL, tuple(vol_shape), mode, tuple(frame))
    if mode == "crop":
        geom.offsets = _crop_offsets(vol_shape[1:], frame)
    elif mode != "resize":
        raise ValueError(f"unknown sagittal mode {mode!r}")
    return geom


def extract_slices(vol: VolumeHU, plane: str, *, sagittal_mode="crop",
                   frame=(COMPLETION_SIZE, COMPLETION_SIZE)):
    """Return ``(slices, geometry)``.

    Axial slices are returned at native size. Sagittal slices are reframed to
    ``frame`` (center-crop by default, or ``sagittal_mode="resize"``).
    """
    if vol.data.size == 0:
        raise VolumeError("empty volume")
    data = vol.data
    if plane == AXIAL:
        geom = SliceGeometry(AXIAL, data.shape, None, None, (0, 0), data.copy(), None,
                             vol.spacing, vol.patient_id, vol.modality)
        slices = [SliceImage(data[:, :, k].copy(), HU16, AXIAL, k) for k in range(data.shape[2])]
        geom.frames = [s.pixels for s in slices]
        return slices, geom
    if plane != SAGITTAL:
        raise ValueError(f"unknown plane {plane!r}")
    geom = frame_geometry(data.shape, sagittal_mode, frame)
    geom.base = data.copy()
    geom.spacing, geom.patient_id, geom.modality = vol.spacing, vol.patient_id, vol.modality
    slices = [SliceImage(_to_frame(data[i], geom), HU16, SAGITTAL, i) for i in range(data.shape[0])]
    geom.frames = [s.pixels.copy() for s in slices]
    return slices, geom


def stack_slices(slices, geometry: SliceGeometry | None = None, *, modality=None,
                 patient_id=None) -> VolumeHU:
    """Inverse of :func:`extract_slices`.

    With a geometry, only voxels whose frame pixels differ from the extracted
    frames are rewritten; everything else is copied bit-exactly from the base.
    """
    if not slices:
        raise VolumeError("no slices to stack")
    idx = [s.index for s in slices]
    if idx != list(range(idx[0], idx[0] + len(idx))):
        raise VolumeError(f"slice indices are not contiguous: {idx[:5]}...")
    if any(s.domain != HU16 for s in slices):
        raise VolumeError("stack_slices expects HU16 slices")
    shapes = {s.pixels.shape for s in slices}
    if len(shapes) != 1:
        raise VolumeError(f"inconsistent slice sizes {sorted(shapes)}")
    plane = slices[0].plane

    if geometry is None:
        if plane == SAGITTAL and any(s.pixels.shape != slices[0].pixels.shape for s in slices):
            raise VolumeError("missing geometry")
        arr = np.stack([s.pixels for s in slices], axis=2 if plane == AXIAL else 0)
        return VolumeHU(arr.astype(np.int16), patient_id=patient_id or "",
                        modality=modality or "CT")

    if geometry.base is None:
        raise VolumeError("geometry has no base volume")
    out = geometry.base.copy()
    if geometry.plane == AXIAL:
        for s in slices:
            out[:, :, s.index] = s.pixels
    else:
        if geometry.mode is not None and slices[0].pixels.shape != tuple(geometry.frame_size):
            raise VolumeError("slice size does not match the recorded frame geometry")
        for s in slices:
            ref = geometry.frames[s.index] if geometry.frames is not None else None
            if ref is not None and np.array_equal(ref, s.pixels):
                continue
            out[s.index] = _from_frame(s.pixels, ref, out[s.index], geometry)
    return VolumeHU(out, geometry.spacing, patient_id or geometry.patient_id,
                    modality or geometry.modality)


def _from_frame(frame, ref, native, geom: SliceGeometry):
    native = native.copy()
    changed = np.ones(frame.shape, bool) if ref is None else frame != ref
    region = frame_region_to_native(changed, geom)
    if geom.mode == "crop":
        oy, oz = geom.offsets
        fh, fw = geom.frame_size
        window = native[oy:oy + fh, oz:oz + fw]
        window[changed] = frame[changed]
        return native
    if geom.mode == "resize":
        back = np.clip(np.rint(_resample(frame, native.shape)), HU_MIN, HU_MAX).astype(np.int16)
        native[region] = back[region]
        return native
    native[changed] = frame[changed]
    return native


# --------------------------------------------------------------------- body mask

BODY_THRESHOLD = -500
CLOSING_RADIUS = 3


def _disk(radius):
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return xx * xx + yy * yy <= radius * radius


def body_mask(img, threshold=BODY_THRESHOLD, radius=CLOSING_RADIUS) -> BodyMask:
    """Threshold, keep the largest connected component, then close with a disk."""
    pixels = img.pixels if isinstance(img, SliceImage) else np.asarray(img)
    tag = f"threshold>{threshold}HU;largest-cc;closing-disk-r{radius}"
    fg = pixels > threshold
    labels, n = ndimage.label(fg)
    if n == 0:
        return BodyMask(np.zeros(pixels.shape, bool), tag, empty=True)
    sizes = np.bincount(labels.ravel())[1:]
    keep = labels == (int(np.argmax(sizes)) + 1)
    # pad so closing is not clipped at the image border
    padded = np.pad(keep, radius + 1)
    closed = ndimage.binary_closing(padded, structure=_disk(radius))
    closed = closed[radius + 1:-radius - 1, radius + 1:-radius - 1]
    # closing can bridge into separate blobs; keep the component that holds the body
    labels, n = ndimage.label(closed)
    if n > 1:
        sizes = np.bincount(labels.ravel())[1:]
        closed = labels == (int(np.argmax(sizes)) + 1)
    return BodyMask(closed, tag, empty=False)


# ------------------------------------------------------------------------ splits


def make_split(patient_ids, seed: int, fractions=(0.8, 0.1, 0.1)) -> DatasetSplit:
    ids = sorted(set(patient_ids))
    n = len(ids)
    if n < 10:
        raise ValueError(f"need at least 10 patients for a split, got {n}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(n)]
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = n - n_val - n_test
    return DatasetSplit(
        sorted(order[:n_train]),
        sorted(order[n_train:n_train + n_val]),
        sorted(order[n_train + n_val:]),
        int(seed),
    )


def make_small_split(patient_ids, seed: int) -> DatasetSplit:
    """Split for cohorts under 10 patients (phantom runs): at least one val and one test id."""
    ids = sorted(set(patient_ids))
    if len(ids) >= 10:
        return make_split(ids, seed)
    if len(ids) < 3:
        raise ValueError("need at least 3 patients")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_test = max(1, int(round(len(ids) * 0.1)))
    n_val = max(1, int(round(len(ids) * 0.1)))
    n_train = len(ids) - n_val - n_test
    return DatasetSplit(sorted(order[:n_train]), sorted(order[n_train:n_train + n_val]),
                        sorted(order[n_train + n_val:]), int(seed))


# --------------------------------------------------------------------- slice store


def slice_filename(patient, plane, index) -> str:
    return f"{patient}_{plane}_{index}.tiff"


def write_slice_tiff(img: SliceImage, directory, patient) -> Path:
    import tifffile

    if img.domain != HU16:
        raise VolumeError("only HU16 slices are stored")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / slice_filename(patient, img.plane, img.index)
    tifffile.imwrite(path, img.pixels.astype(np.int16))
    return path


def read_slice_tiff(path) -> SliceImage:
    import tifffile

    path = Path(path)
    stem = path.stem
    patient, plane, index = stem.rsplit("_", 2)
    pixels = tifffile.imread(path)
    return SliceImage(pixels.astype(np.int16), HU16, plane, int(index))


def read_slice_stack(directory, patient, plane) -> np.ndarray:
    """All stored slices of one patient and plane as an ``(n, H, W)`` int16 array."""
    import tifffile

    files = sorted(Path(directory).glob(f"{patient}_{plane}_*.tiff"),
                   key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    if not files:
        raise FileNotFoundError(f"no {plane} slices for {patient} in {directory}")
    return np.stack([tifffile.imread(f) for f in files]).astype(np.int16)
