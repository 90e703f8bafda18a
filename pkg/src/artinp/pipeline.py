"""End-to-end orchestration: data preparation, gaps, training, inference, evaluation.

Every stage writes into its own directory under ``out_root`` together with a
``provenance.json`` carrying the config hash. Stages refuse to overwrite an
existing output directory unless ``force`` is set.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gaps, volume_io as vio
from .config import PipelineConfig
from .metrics import MetricReport, evaluate_pair, summary_table

log = logging.getLogger(__name__)

MODES = ("full", "no-completion")


class PipelineError(RuntimeError):
    pass


class ProvenanceError(PipelineError):
    pass


# ------------------------------------------------------------------- provenance


def guard_output(directory, cfg: PipelineConfig, force: bool) -> Path:
    directory = Path(directory)
    prov = directory / "provenance.json"
    if prov.exists() and not force:
        old = json.loads(prov.read_text()).get("config_hash")
        same = "the same" if old == cfg.hash() else f"a different ({old})"
        raise ProvenanceError(f"{directory} already holds outputs from {same} config hash; "
                              "pass --force to overwrite")
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def write_provenance(directory, stage: str, cfg: PipelineConfig, **extra) -> dict:
    payload = {"stage": stage, "config_hash": cfg.hash(), "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
               "config": cfg.to_dict(), **extra}
    Path(directory, "provenance.json").write_text(json.dumps(payload, indent=2, default=str))
    return payload


def read_provenance(directory) -> dict:
    path = Path(directory) / "provenance.json"
    if not path.exists():
        raise PipelineError(f"missing {path}; run the producing stage first")
    return json.loads(path.read_text())


def stage_dir(cfg: PipelineConfig, name: str) -> Path:
    return Path(cfg.out_root) / name


# ---------------------------------------------------------------------- data prep


def discover_patients(data_root) -> dict[str, dict[str, Path]]:
    """Patients laid out as ``<root>/<id>/{cbct,ct}.nii[.gz]``."""
    root = Path(data_root)
    if not root.is_dir():
        raise PipelineError(f"data root {root} does not exist")
    found = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = {}
        for mod in ("cbct", "ct"):
            for ext in (".nii.gz", ".nii"):
                if (d / f"{mod}{ext}").exists():
                    files[mod] = d / f"{mod}{ext}"
                    break
        if len(files) == 2:
            found[d.name] = files
    if not found:
        raise PipelineError(f"no patients with cbct/ct NIfTI pairs under {root}")
    return found


def load_pair(cfg: PipelineConfig, files: dict, pid: str):
    cbct = vio.load_volume(files["cbct"], modality="CBCT", patient_id=pid,
                           strict_spacing=cfg.strict_spacing)
    ct = vio.load_volume(files["ct"], modality="CT", patient_id=pid, strict_spacing=cfg.strict_spacing)
    if cbct.shape != ct.shape:
        raise PipelineError(f"{pid}: CBCT {cbct.shape} and CT {ct.shape} are not aligned")
    return cbct, ct


def prepare_data(cfg: PipelineConfig, force=False) -> dict:
    out = guard_output(stage_dir(cfg, "prepared"), cfg, force)
    patients = discover_patients(cfg.data_root)
    ids = sorted(patients)
    split = vio.make_split(ids, cfg.seed) if len(ids) >= 10 else vio.make_small_split(ids, cfg.seed)
    split.save(out / "split.json")
    frame = (cfg.frame_size, cfg.frame_size)
    sums, count = 0.0, 0
    axial_counts, shapes = {}, {}
    for pid in ids:
        cbct, ct = load_pair(cfg, patients[pid], pid)
        shapes[pid] = list(cbct.shape)
        axial_counts[pid] = int(cbct.shape[2])
        if pid in split.train_ids:
            sums += float(cbct.data.astype(np.float64).sum())
            count += cbct.data.size
        for vol, mod in ((cbct, "cbct"), (ct, "ct")):
            for plane in (vio.AXIAL, vio.SAGITTAL):
                slices, _ = vio.extract_slices(vol, plane, sagittal_mode=cfg.sagittal_mode, frame=frame)
                for s in slices:
                    vio.write_slice_tiff(s, out / "slices" / mod, pid)
    stats = {"fill_hu": int(round(sums / count)), "axial_slices": axial_counts, "shapes": shapes,
             "sagittal_mode": cfg.sagittal_mode, "frame_size": cfg.frame_size}
    (out / "stats.json").write_text(json.dumps(stats, indent=2))
    write_provenance(out, "prepare-data", cfg, split=split.to_json())
    log.info("prepared %d patients (%s)", len(ids), split.to_json())
    return {"split": split, "stats": stats, "dir": out}


def load_prepared(cfg: PipelineConfig):
    d = stage_dir(cfg, "prepared")
    read_provenance(d)
    return vio.DatasetSplit.load(d / "split.json"), json.loads((d / "stats.json").read_text()), d


def make_gaps(cfg: PipelineConfig, force=False, ids=None) -> list[dict]:
    """Patient-wise gaps for the test patients (or ``ids``)."""
    split, stats, _ = load_prepared(cfg)
    out = guard_output(stage_dir(cfg, "gaps"), cfg, force)
    patients = discover_patients(cfg.data_root)
    entries = []
    for i, pid in enumerate(ids if ids is not None else split.test_ids):
        cbct, _ = load_pair(cfg, patients[pid], pid)
        seed = cfg.gap.test_seed * 1000 + i
        gapped, mask, spec = gaps.patient_gap(cbct, seed, stats["fill_hu"],
                                              sagittal_mode=cfg.sagittal_mode,
                                              frame=(cfg.frame_size, cfg.frame_size))
        vio.save_volume(gapped, out / pid / "cbct_gapped.nii.gz", f"artinp {cfg.hash()}")
        vio.save_volume(vio.VolumeHU(mask.astype(np.int16), cbct.spacing, pid, "CBCT"),
                        out / pid / "gap_mask.nii.gz", f"artinp {cfg.hash()}")
        entries.append(gaps.gap_manifest(pid, spec))
    gaps.write_manifest(entries, out / "manifest.json")
    write_provenance(out, "make-gaps", cfg, patients=[e["patient"] for e in entries])
    return entries


# ------------------------------------------------------------------------ training


def _frames(directory, pid, plane):
    return vio.read_slice_stack(directory, pid, plane)


def load_completion_data(cfg: PipelineConfig):
    from .completion import CompletionData

    split, stats, d = load_prepared(cfg)

    def gather(ids):
        cts, cbs = [], []
        for pid in ids:
            ct = _frames(d / "slices" / "ct", pid, vio.SAGITTAL)
            cb = _frames(d / "slices" / "cbct", pid, vio.SAGITTAL)
            keep = (ct > vio.BODY_THRESHOLD).any(axis=(1, 2))
            cts.append(ct[keep])
            cbs.append(cb[keep])
        ct = vio.normalize_array(np.concatenate(cts), vio.UNIT01).astype(np.float32)
        cb = vio.normalize_array(np.concatenate(cbs), vio.UNIT01).astype(np.float32)
        return ct, cb

    ct, cb = gather(split.train_ids)
    vct, vcb = gather(split.val_ids) if split.val_ids else (None, None)
    fill = float(vio.normalize_array(stats["fill_hu"], vio.UNIT01))
    return CompletionData(ct, cb, fill, vct, vcb)


def load_translation_data(cfg: PipelineConfig):
    from .translation import TranslationData

    split, _, d = load_prepared(cfg)

    def gather(ids):
        cb = np.concatenate([_frames(d / "slices" / "cbct", pid, vio.AXIAL) for pid in ids])
        ct = np.concatenate([_frames(d / "slices" / "ct", pid, vio.AXIAL) for pid in ids])
        return (vio.normalize_array(cb, vio.SIGNED11).astype(np.float32),
                vio.normalize_array(ct, vio.SIGNED11).astype(np.float32))

    cb, ct = gather(split.train_ids)
    size = 2 ** cfg.translation.num_downs
    if cb.shape[1:] != (size, size):
        raise PipelineError(f"axial slices are {cb.shape[1:]}, translation network expects "
                            f"{size}x{size} (translation.num_downs={cfg.translation.num_downs})")
    vcb, vct = gather(split.val_ids) if split.val_ids else (None, None)
    return TranslationData(cb, ct, vcb, vct)


def train_completion_stage(cfg: PipelineConfig, force=False) -> dict:
    from .completion import train_completion

    out = guard_output(stage_dir(cfg, "completion"), cfg, force)
    summary = train_completion(cfg.completion, load_completion_data(cfg), out,
                               config_hash=cfg.hash(), run_config=cfg.to_dict())
    write_provenance(out, "train-completion", cfg, best=summary["best"])
    return summary


def train_translation_stage(cfg: PipelineConfig, force=False) -> dict:
    from .translation import train_translation

    out = guard_output(stage_dir(cfg, "translation"), cfg, force)
    summary = train_translation(cfg.translation, load_translation_data(cfg), out,
                                config_hash=cfg.hash(), run_config=cfg.to_dict())
    write_provenance(out, "train-translation", cfg, best=summary["best"])
    return summary


# ----------------------------------------------------------------------- inference


def complete_volume(cfg: PipelineConfig, cbct_gapped: vio.VolumeHU, ct: vio.VolumeHU,
                    gap_mask: np.ndarray, completer) -> vio.VolumeHU:
    """Inpaint every sagittal slice that intersects the gap and re-stack the volume."""
    gap_mask = np.asarray(gap_mask).astype(bool)
    frame = (cfg.frame_size, cfg.frame_size)
    cb_slices, geom = vio.extract_slices(cbct_gapped, vio.SAGITTAL, sagittal_mode=cfg.sagittal_mode,
                                         frame=frame)
    ct_slices, _ = vio.extract_slices(ct, vio.SAGITTAL, sagittal_mode=cfg.sagittal_mode, frame=frame)
    jobs = [i for i in range(gap_mask.shape[0]) if gap_mask[i].any()]

    def work(i):
        fmask = vio.native_region_to_frame(gap_mask[i], geom)
        if not fmask.any():
            return None
        out = completer.inpaint(vio.normalize_array(ct_slices[i].pixels, vio.UNIT01),
                                vio.normalize_array(cb_slices[i].pixels, vio.UNIT01),
                                fmask, cfg.blend_tol)
        return vio.denormalize_array(out, vio.UNIT01)

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        results = list(pool.map(work, jobs))  # map keeps submission order
    for i, frame_hu in zip(jobs, results):
        if frame_hu is not None:
            cb_slices[i] = vio.SliceImage(frame_hu, vio.HU16, vio.SAGITTAL, i)
    stacked = vio.stack_slices(cb_slices, geom)
    data = np.where(gap_mask, stacked.data, cbct_gapped.data).astype(np.int16)
    return vio.VolumeHU(data, cbct_gapped.spacing, cbct_gapped.patient_id, "CBCT",
                        {"inpainted": True})


def translate_volume(cbct: vio.VolumeHU, translator, batch: int = 16) -> vio.VolumeHU:
    axial = np.moveaxis(cbct.data, 2, 0)
    out = np.concatenate([translator.translate_batch(axial[s:s + batch])
                          for s in range(0, axial.shape[0], batch)])
    return vio.VolumeHU(np.moveaxis(out, 0, 2).astype(np.int16), cbct.spacing,
                        cbct.patient_id, "sCT")


def run_inference(cfg: PipelineConfig, cbct_vol, planning_ct_vol, gap_mask, *,
                  completion_ckpt=None, translation_ckpt=None, mode="full", translator=None,
                  completer=None):
    """Returns ``(inpainted_cbct, sct)``; in ``no-completion`` mode the CBCT is translated as-is."""
    if mode not in MODES:
        raise PipelineError(f"unknown mode {mode!r}")
    if cbct_vol.shape != planning_ct_vol.shape:
        raise PipelineError(f"misaligned volumes {cbct_vol.shape} vs {planning_ct_vol.shape}")
    if translator is None:
        if translation_ckpt is None:
            raise PipelineError("missing --translation-ckpt")
        from .translation import Translator
        translator = Translator(translation_ckpt)
    if mode == "full":
        if completer is None:
            if completion_ckpt is None:
                raise PipelineError("full mode requires --completion-ckpt")
            from .completion import Completer
            completer = Completer(completion_ckpt)
        if gap_mask is None:
            raise PipelineError("full mode requires a gap mask")
        inpainted = complete_volume(cfg, cbct_vol, planning_ct_vol, gap_mask, completer)
    else:
        inpainted = cbct_vol
    return inpainted, translate_volume(inpainted, translator)


def infer_stage(cfg: PipelineConfig, mode: str, completion_ckpt=None, translation_ckpt=None,
                force=False) -> Path:
    if mode == "full" and not completion_ckpt:
        raise PipelineError("full mode requires --completion-ckpt")
    if not translation_ckpt:
        raise PipelineError("missing --translation-ckpt")
    for p in filter(None, (completion_ckpt, translation_ckpt)):
        if not Path(p).exists():
            raise PipelineError(f"checkpoint not found: {p}")
    split, _, _ = load_prepared(cfg)
    patients = discover_patients(cfg.data_root)
    out = guard_output(stage_dir(cfg, "infer") / mode, cfg, force)
    from .translation import Translator
    translator = Translator(translation_ckpt)
    completer = None
    if mode == "full":
        from .completion import Completer
        completer = Completer(completion_ckpt)
        gap_dir = stage_dir(cfg, "gaps")
        read_provenance(gap_dir)
    for pid in split.test_ids:
        cbct, ct = load_pair(cfg, patients[pid], pid)
        mask = None
        if mode == "full":
            cbct = vio.load_volume(gap_dir / pid / "cbct_gapped.nii.gz", modality="CBCT", patient_id=pid)
            mask = vio.load_volume(gap_dir / pid / "gap_mask.nii.gz", patient_id=pid).data.astype(bool)
        inpainted, sct = run_inference(cfg, cbct, ct, mask, mode=mode, translator=translator,
                                       completer=completer)
        tag = f"artinp {cfg.hash()}"
        if mode == "full":
            vio.save_volume(inpainted, out / pid / "cbct_inpainted.nii.gz", tag)
        vio.save_volume(sct, out / pid / "sct.nii.gz", tag)
    write_provenance(out, "infer", cfg, mode=mode, completion_ckpt=str(completion_ckpt or ""),
                     translation_ckpt=str(translation_ckpt), patients=split.test_ids)
    return out


# ---------------------------------------------------------------------- evaluation


def run_eval(cfg: PipelineConfig, sct_vol, ct_vol, label="") -> MetricReport:
    return evaluate_pair(ct_vol, sct_vol, None, value_range=cfg.metrics.value_range,
                         i_max=cfg.metrics.i_max, label=label)


def evaluate_stage(cfg: PipelineConfig, modes=MODES, allow_hash_mismatch=False, force=False):
    split, stats, _ = load_prepared(cfg)
    patients = discover_patients(cfg.data_root)
    out = guard_output(stage_dir(cfg, "eval"), cfg, force)
    reports = []
    labels = {"no-completion": "ARTInp w/o Completion", "full": "ARTInp"}
    for mode in modes:
        d = stage_dir(cfg, "infer") / mode
        if not (d / "provenance.json").exists():
            continue
        prov = read_provenance(d)
        if prov["config_hash"] != cfg.hash() and not allow_hash_mismatch:
            raise ProvenanceError(f"{d} was produced with config hash {prov['config_hash']}, "
                                  f"current is {cfg.hash()}; pass --allow-hash-mismatch to override")
        report = MetricReport(value_range=cfg.metrics.value_range, i_max=cfg.metrics.i_max,
                              label=labels[mode])
        for pid in split.test_ids:
            _, ct = load_pair(cfg, patients[pid], pid)
            sct = vio.load_volume(d / pid / "sct.nii.gz", modality="sCT", patient_id=pid)
            report.extend(run_eval(cfg, sct, ct, labels[mode]))
        expected = sum(stats["axial_slices"][p] for p in split.test_ids)
        report.write(out, mode, {"mode": mode, "config_hash": cfg.hash(),
                                 "n_axial_slices": expected, "patients": split.test_ids})
        reports.append(report)
    if not reports:
        raise PipelineError("no inference outputs found; run `infer` first")
    table = summary_table(reports)
    (out / "summary.txt").write_text(table + "\n")
    write_provenance(out, "evaluate", cfg, modes=[r.label for r in reports])
    return reports, table
