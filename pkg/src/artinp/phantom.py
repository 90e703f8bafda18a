"""Layered-ellipsoid head phantoms with a degraded pseudo-CBCT twin.

The CT side is a clean piecewise-constant head (skin, skull shell, brain,
ventricle, a few lesions). The pseudo-CBCT adds Gaussian noise, a smooth
multiplicative bias field and radial streaks on the identical voxel grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume_io import HU_MAX, HU_MIN, VolumeHU, save_volume

DEFAULT_LEVELS = {"air": -1000, "soft": 40, "bone": 1000, "brain": 30,
                  "ventricle": 8, "lesion": 65}


@dataclass
class Degradation:
    noise_sigma: float = 20.0
    bias_amplitude: float = 0.03
    streaks: int = 6
    streak_amplitude: float = 40.0

    def is_identity(self) -> bool:
        return (self.noise_sigma == 0 and self.bias_amplitude == 0
                and (self.streaks == 0 or self.streak_amplitude == 0))


@dataclass
class PhantomSpec:
    size: tuple[int, int, int] = (64, 64, 64)
    n_patients: int = 4
    levels: dict = field(default_factory=lambda: dict(DEFAULT_LEVELS))
    degradation: Degradation = field(default_factory=Degradation)
    seed: int = 0


@dataclass
class PhantomCase:
    ct: VolumeHU
    cbct: VolumeHU
    labels: np.ndarray  # 0 air, 1 skin, 2 bone, 3 brain, 4 ventricle, 5 lesion
    head: dict


def _grid(size):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in size), indexing="ij")


def ellipsoid(size, center, semi_axes) -> np.ndarray:
    x, y, z = _grid(size)
    return (((x - center[0]) / semi_axes[0]) ** 2 + ((y - center[1]) / semi_axes[1]) ** 2
            + ((z - center[2]) / semi_axes[2]) ** 2) <= 1.0


def head_geometry(size, rng) -> dict:
    size = np.asarray(size, dtype=np.float64)
    center = (size - 1) / 2.0 + rng.uniform(-0.03, 0.03, 3) * size
    semi = size * np.array([0.38, 0.44, 0.40]) * rng.uniform(0.93, 1.05, 3)
    skin = max(1.5, 0.035 * size.min())
    bone = max(2.0, 0.06 * size.min()) * rng.uniform(0.85, 1.15)
    return {"center": center, "semi_axes": semi, "skin": skin, "bone": bone}


def _labels(size, head, rng):
    c, s = head["center"], head["semi_axes"]
    labels = np.zeros(size, dtype=np.uint8)
    labels[ellipsoid(size, c, s)] = 1
    inner = s - head["skin"]
    labels[ellipsoid(size, c, inner)] = 2
    brain = inner - head["bone"]
    labels[ellipsoid(size, c, brain)] = 3
    labels[ellipsoid(size, c + np.array([0, -0.1, 0.05]) * brain, brain * [0.18, 0.35, 0.25])] = 4
    for _ in range(int(rng.integers(1, 4))):
        off = rng.uniform(-0.5, 0.5, 3) * brain
        r = brain.min() * rng.uniform(0.08, 0.16)
        blob = ellipsoid(size, c + off, [r, r, r]) & (labels == 3)
        labels[blob] = 5
    return labels


def _bias_field(size, amplitude, rng):
    if amplitude == 0:
        return np.ones(size)
    x, y, z = _grid(size)
    field_ = np.zeros(size)
    for _ in range(3):
        k = rng.uniform(0.5, 1.5, 3) * np.pi / np.asarray(size)
        phase = rng.uniform(0, 2 * np.pi, 3)
        field_ += np.cos(k[0] * x + phase[0]) * np.cos(k[1] * y + phase[1]) * np.cos(k[2] * z + phase[2])
    field_ /= np.abs(field_).max() or 1.0
    return 1.0 + amplitude * field_


def _streaks(size, count, amplitude, center, rng):
    if count == 0 or amplitude == 0:
        return np.zeros(size)
    x, y = np.meshgrid(np.arange(size[0], dtype=float), np.arange(size[1], dtype=float), indexing="ij")
    theta = np.arctan2(y - center[1], x - center[0])
    width = 0.04
    plane = np.zeros(size[:2])
    for ang, sign in zip(rng.uniform(-np.pi, np.pi, count), rng.choice([-1.0, 1.0], count)):
        d = np.angle(np.exp(1j * (theta - ang)))
        plane += sign * np.exp(-(d ** 2) / (2 * width ** 2))
    return amplitude * np.repeat(plane[:, :, None], size[2], axis=2)


def degrade(ct: np.ndarray, deg: Degradation, center, rng) -> np.ndarray:
    if deg.is_identity():
        return ct.copy()
    size = ct.shape
    shifted = (ct.astype(np.float64) - HU_MIN) * _bias_field(size, deg.bias_amplitude, rng) + HU_MIN
    shifted += _streaks(size, deg.streaks, deg.streak_amplitude, center, rng)
    if deg.noise_sigma > 0:
        shifted += rng.normal(0.0, deg.noise_sigma, size)
    return np.clip(np.rint(shifted), HU_MIN, HU_MAX).astype(np.int16)


def generate_case(spec: PhantomSpec, index: int) -> PhantomCase:
    size = tuple(int(s) for s in spec.size)
    rng = np.random.default_rng([spec.seed, index])
    head = head_geometry(size, rng)
    labels = _labels(size, head, rng)
    lv = spec.levels
    lut = np.array([lv["air"], lv["soft"], lv["bone"], lv["brain"], lv["ventricle"], lv["lesion"]])
    ct = np.clip(lut[labels], HU_MIN, HU_MAX).astype(np.int16)
    cbct = degrade(ct, spec.degradation, head["center"], rng)
    pid = f"P{index:03d}"
    return PhantomCase(VolumeHU(ct, (1.0, 1.0, 1.0), pid, "CT"),
                       VolumeHU(cbct, (1.0, 1.0, 1.0), pid, "CBCT"), labels, head)


def _validate(spec):
    if min(spec.size) < 64:
        raise ValueError(f"phantom size must be at least 64^3, got {spec.size}")
    if spec.n_patients < 1:
        raise ValueError("n_patients must be positive")


def generate(spec: PhantomSpec) -> list[tuple[VolumeHU, VolumeHU]]:
    _validate(spec)
    return [(c.ct, c.cbct) for c in (generate_case(spec, i) for i in range(spec.n_patients))]


def write_dataset(spec: PhantomSpec, root) -> list[str]:
    """Write ``<root>/<patient>/{ct,cbct}.nii.gz`` and return the patient ids."""
    _validate(spec)
    root = Path(root)
    ids = []
    for i in range(spec.n_patients):
        case = generate_case(spec, i)
        pid = case.ct.patient_id
        save_volume(case.ct, root / pid / "ct.nii.gz")
        save_volume(case.cbct, root / pid / "cbct.nii.gz")
        ids.append(pid)
    return ids
