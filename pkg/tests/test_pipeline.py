import json
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from artinp import config as cf
from artinp import pipeline as pl
from artinp import volume_io as vio
from conftest import run_cli


def _cfg(run):
    return cf.load_config(preset="smoke", overrides={"data_root": str(run["data"]),
                                                     "out_root": str(run["out"])})


def test_all_stages_exit_zero(smoke_run):
    assert smoke_run["codes"] == {k: 0 for k in smoke_run["codes"]}


def test_outputs_shapes_and_confinement(smoke_run):
    cfg = _cfg(smoke_run)
    split, stats, _ = pl.load_prepared(cfg)
    assert split.test_ids
    for pid in split.test_ids:
        cbct = vio.load_volume(smoke_run["data"] / pid / "cbct.nii.gz")
        gapped = vio.load_volume(smoke_run["out"] / "gaps" / pid / "cbct_gapped.nii.gz")
        mask = vio.load_volume(smoke_run["out"] / "gaps" / pid / "gap_mask.nii.gz").data.astype(bool)
        inpainted = vio.load_volume(smoke_run["out"] / "infer" / "full" / pid / "cbct_inpainted.nii.gz")
        assert mask.any()
        assert np.array_equal(inpainted.data[~mask], cbct.data[~mask])
        assert np.array_equal(gapped.data[~mask], cbct.data[~mask])
        for mode in pl.MODES:
            sct = vio.load_volume(smoke_run["out"] / "infer" / mode / pid / "sct.nii.gz")
            assert sct.shape == cbct.shape


def test_evaluation_outputs(smoke_run):
    cfg = _cfg(smoke_run)
    split, stats, _ = pl.load_prepared(cfg)
    ev = smoke_run["out"] / "eval"
    summary = (ev / "summary.txt").read_text()
    assert "ARTInp w/o Completion" in summary and "ARTInp " in summary
    for mode in pl.MODES:
        js = json.loads((ev / f"{mode}.json").read_text())
        assert js["n_axial_slices"] == sum(stats["axial_slices"][p] for p in split.test_ids)
        rows = (ev / f"{mode}.csv").read_text().splitlines()[1:]
        assert 0 < len(rows) <= js["n_axial_slices"]
        assert js["aggregates"]["mae_pct"]["n_slices"] == len(rows)


def test_force_guard(smoke_run, capsys):
    code = run_cli("prepare-data", *smoke_run["common"])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ProvenanceError" and "--force" in err["message"]
    assert "the same" in err["message"]


def test_missing_completion_ckpt(smoke_run, capsys):
    code = run_cli("infer", *smoke_run["common"], "--mode", "full",
                   "--translation-ckpt", smoke_run["translation_ckpt"], "--force")
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["command"] == "infer" and "--completion-ckpt" in err["message"]


def test_nonexistent_ckpt(smoke_run, capsys):
    code = run_cli("infer", *smoke_run["common"], "--mode", "no-completion",
                   "--translation-ckpt", smoke_run["root"] / "nope.pt", "--force")
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_no_completion_never_imports_completion(smoke_run, tmp_path):
    out = tmp_path / "out"
    import shutil
    shutil.copytree(smoke_run["out"] / "prepared", out / "prepared")
    script = textwrap.dedent(f"""
        import sys
        from artinp.cli import main
        code = main(["infer", "--preset", "smoke", "--data-root", {str(smoke_run["data"])!r},
                     "--out-root", {str(out)!r}, "--mode", "no-completion",
                     "--translation-ckpt", {str(smoke_run["translation_ckpt"])!r}])
        assert code == 0, code
        print("loaded" if "artinp.completion" in sys.modules else "clean")
    """)
    res = subprocess.run([sys.executable, "-c", script], capture_output=True, text=True, timeout=300)
    assert res.returncode == 0, res.stderr
    assert res.stdout.strip().splitlines()[-1] == "clean"


def test_empty_gap_gives_identical_sct(smoke_run):
    from artinp.completion import Completer
    from artinp.translation import Translator

    cfg = _cfg(smoke_run)
    split, _, _ = pl.load_prepared(cfg)
    pid = split.test_ids[0]
    cbct = vio.load_volume(smoke_run["data"] / pid / "cbct.nii.gz")
    ct = vio.load_volume(smoke_run["data"] / pid / "ct.nii.gz")
    tr, cm = Translator(smoke_run["translation_ckpt"]), Completer(smoke_run["completion_ckpt"])
    zero = np.zeros(cbct.shape, bool)
    inp_full, sct_full = pl.run_inference(cfg, cbct, ct, zero, mode="full", translator=tr, completer=cm)
    inp_nc, sct_nc = pl.run_inference(cfg, cbct, ct, None, mode="no-completion", translator=tr)
    assert np.array_equal(inp_full.data, cbct.data)
    assert np.array_equal(sct_full.data, sct_nc.data)


def test_inference_order_sagittal_then_axial(smoke_run):
    """Completion sees sagittal frames and translation sees axial slices of the re-stacked volume."""
    cfg = _cfg(smoke_run)
    seen = {}

    class SpyCompleter:
        def inpaint(self, ct, cbct, mask, tol):
            seen.setdefault("completion", []).append(cbct.shape)
            return np.where(mask, 0.5, cbct)

    class SpyTranslator:
        def translate_batch(self, hu):
            seen.setdefault("translation", []).append(hu.shape[1:])
            seen["restacked"] = hu.copy() if "restacked" not in seen else seen["restacked"]
            return hu

    vol = vio.VolumeHU(np.full((64, 64, 64), 40, np.int16))
    mask = np.zeros(vol.shape, bool)
    mask[:, :, 20:40] = True
    inp, sct = pl.run_inference(cfg, vol, vol, mask, mode="full", translator=SpyTranslator(),
                                completer=SpyCompleter())
    assert set(seen["completion"]) == {(cfg.frame_size, cfg.frame_size)}
    assert set(seen["translation"]) == {(64, 64)}
    assert np.array_equal(sct.data, inp.data)
    assert (inp.data[mask] != 40).all() and (inp.data[~mask] == 40).all()


def test_misaligned_and_bad_mode(smoke_run):
    cfg = _cfg(smoke_run)
    a = vio.VolumeHU(np.zeros((64, 64, 64), np.int16))
    b = vio.VolumeHU(np.zeros((64, 64, 32), np.int16))
    with pytest.raises(pl.PipelineError, match="misaligned"):
        pl.run_inference(cfg, a, b, None, mode="no-completion", translator=object())
    with pytest.raises(pl.PipelineError, match="unknown mode"):
        pl.run_inference(cfg, a, a, None, mode="other", translator=object())


def test_evaluate_hash_mismatch(smoke_run, capsys):
    common = smoke_run["common"]
    code = run_cli("evaluate", *common, "--force", "--seed", "99")
    # the seed changes the config hash, so earlier inference outputs no longer match
    assert code == 2
    assert "allow-hash-mismatch" in capsys.readouterr().err


def test_discover_patients_errors(tmp_path):
    with pytest.raises(pl.PipelineError, match="does not exist"):
        pl.discover_patients(tmp_path / "none")
    (tmp_path / "p1").mkdir()
    (tmp_path / "p1" / "ct.nii.gz").write_bytes(b"")
    with pytest.raises(pl.PipelineError, match="no patients"):
        pl.discover_patients(tmp_path)


def test_config_layers(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('seed = 11\nsagittal_mode = "resize"\n[completion]\nalpha = 0.001\ndilations = [2, 4]\n')
    env = {"ARTINP_TRANSLATION__LAM": "50", "ARTINP_COMPLETION__ALPHA": "0.002", "ARTINP_PURE_PYTHON": "1"}
    cfg = cf.load_config(toml, "clinical", {"out_root": "x"}, environ=env)
    assert cfg.seed == 11 and cfg.sagittal_mode == "resize" and cfg.out_root == "x"
    assert cfg.completion.alpha == 0.002 and cfg.completion.dilations == (2, 4)
    assert cfg.translation.lam == 50.0
    with pytest.raises(KeyError):
        cf.load_config(None, "clinical", {"nonsense": 1}, environ={})
    with pytest.raises(ValueError):
        cf.load_config(None, "clinical", {"sagittal_mode": "warp"}, environ={})
    with pytest.raises(KeyError):
        cf.load_config(None, "nope", environ={})


def test_config_hash_ignores_paths_and_mode():
    a = cf.load_config(environ={})
    b = cf.load_config(overrides={"out_root": "elsewhere", "mode": "no-completion"}, environ={})
    c = cf.load_config(overrides={"seed": 1}, environ={})
    assert a.hash() == b.hash() != c.hash()


def test_clinical_defaults():
    cfg = cf.load_config(environ={})
    assert cfg.completion.alpha == 4e-4 and cfg.translation.lam == 100
    assert (cfg.translation.lr, cfg.translation.beta1, cfg.translation.epochs) == (2e-4, 0.5, 60)
    assert cfg.translation.ckpt_every_epochs == 5 and cfg.translation.batch_size == 1
    assert (cfg.gap.min_width, cfg.gap.max_width) == (48, 96)
