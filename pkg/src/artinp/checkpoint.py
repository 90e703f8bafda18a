"""Checkpoint container and CSV training log shared by both networks."""
from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import torch


def params_hash(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, network: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if network is not None and payload.get("network") != network:
        raise ValueError(f"{path} holds a {payload.get('network')!r} checkpoint, expected {network!r}")
    return payload


class CSVLog:
    def __init__(self, path, fields, network: str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fields = ["network", *fields]
        self.network = network
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.fields)

    def write(self, **row):
        row["network"] = self.network
        with open(self.path, "a", newline="") as fh:
            csv.DictWriter(fh, fieldnames=self.fields, extrasaction="ignore").writerow(row)
