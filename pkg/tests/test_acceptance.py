"""Acceptance criteria, one test each, printing a PASS/FAIL line with the measured numbers."""
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch
from scipy import stats

from artinp import blend, completion as cm, gaps, metrics as mt, pipeline as pl
from artinp import translation as tr, volume_io as vio
from artinp.config import load_config
from artinp.phantom import PhantomSpec, generate, write_dataset
from test_blend import dense_oracle, random_problem
from test_completion import completion_gradient_errors
from test_metrics import _pairs, naive_mae, naive_psnr, naive_ssim
from test_translation import _covering, translation_gradient_errors


@contextmanager
def criterion(capsys, name, limit_s, already_spent=0.0):
    """Time the body and print one verdict line; ``notes`` collects details for the line."""
    notes = []
    t0 = time.perf_counter() - already_spent
    ok = False
    try:
        yield notes
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        ok = ok and elapsed < limit_s
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {'; '.join(notes)} "
                  f"({elapsed:.1f} s, limit {limit_s:.0f} s)")
    assert elapsed < limit_s, f"{name} took {elapsed:.1f} s"


def test_metric_oracles(capsys):
    with criterion(capsys, "metric oracles", 10) as notes:
        worst = [0.0, 0.0, 0.0]
        for a, b, m in _pairs(100, seed=11):
            worst[0] = max(worst[0], abs(mt.mae_pct(a, b, m) - naive_mae(a, b, m, 4095)))
            worst[1] = max(worst[1], abs(mt.psnr(a, b, m) - naive_psnr(a, b, m, 4095)))
            worst[2] = max(worst[2], abs(mt.ssim(a, b, m) - naive_ssim(a, b, m, 4095)))
        z = np.zeros((16, 16))
        p20 = mt.psnr(z, z + 409.5)
        mae1 = mt.mae_pct(z, z + 40.95)
        notes += [f"max |diff| MAE/PSNR/SSIM = {worst[0]:.1e}/{worst[1]:.1e}/{worst[2]:.1e}",
                  f"PSNR(I_MAX/|d|=10) = {p20:.12f} dB", f"MAE%(|d|/R=0.01) = {mae1:.12f}"]
        assert max(worst) < 1e-9
        assert abs(p20 - 20.0) < 1e-9 and abs(mae1 - 1.0) < 1e-9


def test_poisson_blend(capsys):
    with criterion(capsys, "poisson blend", 30) as notes:
        rng = np.random.default_rng(12)
        worst, outside_ok = 0.0, True
        for _ in range(50):
            s, t, r = random_problem(rng)
            got = blend.poisson_blend(s, t, r, tol=1e-12)
            worst = max(worst, np.abs(got - dense_oracle(s, t, r)).max())
            outside_ok &= np.array_equal(got[~r], t[~r])
        img = rng.uniform(0, 1, (40, 40))
        region = np.zeros((40, 40), bool)
        region[8:30, 10:26] = True
        ident = np.abs(blend.poisson_blend(img, img, region) - img).max()
        offset = np.abs(blend.poisson_blend(img + 3.0, img, region, tol=1e-10) - img).max()
        notes += [f"max |iterative - dense| = {worst:.1e}", f"identity err {ident:.1e}",
                  f"offset err {offset:.1e}", f"outside bitwise {outside_ok}"]
        assert worst < 1e-8 and ident < 1e-6 and offset < 1e-6 and outside_ok


def test_gradient_checks(capsys):
    with criterion(capsys, "gradient checks", 120) as notes:
        e1 = completion_gradient_errors()
        e2 = translation_gradient_errors()
        notes += [f"completion {e1.size} params max rel err {e1.max():.1e}",
                  f"UNet {e2.size} params max rel err {e2.max():.1e}"]
        assert e1.size >= 200 and e2.size >= 200
        assert e1.max() < 1e-3 and e2.max() < 1e-3


def test_architecture_invariants(capsys):
    with criterion(capsys, "architecture invariants", 60) as notes:
        torch.manual_seed(0)
        gen = cm.CompletionGenerator(base=32).eval()
        disc = cm.ContextDiscriminator(base=64).eval()
        x = torch.rand(1, 3, 160, 160)
        with torch.no_grad():
            y = gen(x)
            origins = [cm.patch_origin(x[0, 2].numpy() > 0.5, 96)]
            gf, lf, cat = disc.features(y, origins)
            p = disc(y, origins)
        ok_c = y.shape == (1, 1, 160, 160) and 0 <= y.min() and y.max() <= 1
        ok_d = gf.shape[1] == lf.shape[1] == 1024 and cat.shape[1] == 2048 and 0 < p.item() < 1
        unet = tr.UNetGenerator(8, 64).eval()
        with torch.no_grad():
            u, bott = unet(torch.rand(1, 1, 256, 256) * 2 - 1, return_bottleneck=True)
        ok_u = u.shape == (1, 1, 256, 256) and -1 <= u.min() and u.max() <= 1 and bott.shape[-2:] == (1, 1)
        pg = tr.PatchDiscriminator(2, 64).double().eval()
        xin = torch.rand(1, 2, 256, 256, dtype=torch.float64)
        with torch.no_grad():
            base = pg(xin)[0, 0]
            xin[0, 0, 100, 37] += 1.0
            changed = ((pg(xin)[0, 0] - base).abs() > 0).numpy()
        expected = np.zeros((30, 30), bool)
        expected[np.ix_(_covering(30, 100), _covering(30, 37))] = True
        ok_p = base.shape == (30, 30) and changed.any() and not (changed & ~expected).any() \
            and pg.receptive_field() == 70
        notes += [f"completion 160->{tuple(y.shape[-2:])} in [{y.min():.3f},{y.max():.3f}]",
                  f"disc {gf.shape[1]}+{lf.shape[1]}->{cat.shape[1]} p={p.item():.3f}",
                  f"UNet bottleneck {tuple(bott.shape[-2:])}",
                  f"PatchGAN {tuple(base.shape)} map, probe touches {changed.sum()} scores, all inside 70x70 fields"]
        assert ok_c and ok_d and ok_u and ok_p


def test_gap_synthesis(capsys):
    with criterion(capsys, "gap synthesis", 60) as notes:
        rng = np.random.default_rng(13)
        w = np.array([gaps.sample_gap(160, rng).width for _ in range(10_000)])
        p = stats.chisquare(np.bincount(w - 48, minlength=49)).pvalue
        (ct, cbct), = generate(PhantomSpec(n_patients=1))
        _, mask, _ = gaps.patient_gap(cbct, 3, -300, sagittal_mode="resize")
        same = all(np.array_equal(mask[i], mask[0]) for i in range(mask.shape[0]))
        big = vio.VolumeHU(np.zeros((30, 200, 190), np.int16))
        _, mask2, _ = gaps.patient_gap(big, 4, 0)
        same &= all(np.array_equal(mask2[i], mask2[0]) for i in range(30))
        notes += [f"widths in [{w.min()},{w.max()}]", f"chi-square p = {p:.3f}",
                  f"identical sagittal masks {same}"]
        assert w.min() == 48 and w.max() == 96 and p > 0.01 and same


def _gap_mae(ref, est, mask):
    return mt.mae_pct(ref.astype(float), est.astype(float), mask)


@pytest.mark.slow
def test_three_phase_training_on_phantoms(tmp_path, capsys):
    with criterion(capsys, "three-phase training on phantoms", 30 * 60) as notes:
        data, out = tmp_path / "data", tmp_path / "out"
        write_dataset(PhantomSpec(size=(64, 64, 64), n_patients=8, seed=0), data)
        cfg = load_config(preset="phantom", overrides={"data_root": str(data), "out_root": str(out)},
                          environ={})
        c = cfg.completion
        assert c.total_iters <= 5000
        pl.prepare_data(cfg)
        pl.make_gaps(cfg)
        s = pl.train_completion_stage(cfg)
        h0, h1 = s["phase2_hash"]
        steps = [int(p.rsplit("_", 1)[1][:-3]) for p in s["checkpoints"]]
        expected = list(range(c.ckpt_every, c.total_iters + 1, c.ckpt_every))
        if expected[-1] != c.total_iters:
            expected.append(c.total_iters)
        t = pl.train_translation_stage(cfg)
        infer = pl.infer_stage(cfg, "full", s["best"], t["best"])
        split, _, _ = pl.load_prepared(cfg)
        inp_err, fill_err = [], []
        for pid in split.test_ids:
            orig = vio.load_volume(data / pid / "cbct.nii.gz").data
            gapped = vio.load_volume(out / "gaps" / pid / "cbct_gapped.nii.gz").data
            mask = vio.load_volume(out / "gaps" / pid / "gap_mask.nii.gz").data.astype(bool)
            inpainted = vio.load_volume(infer / pid / "cbct_inpainted.nii.gz").data
            inp_err.append(_gap_mae(orig, inpainted, mask))
            fill_err.append(_gap_mae(orig, gapped, mask))
        notes += [f"{c.total_iters} completion iterations",
                  f"val recon {s['val_initial']:.5f} -> {s['val_end_phase1']:.5f} over phase 1",
                  f"phase-2 hash constant {h0 == h1}", f"checkpoints at {steps}",
                  f"translation val L1 {t['val_initial']['l1']:.4f} -> {t['val_final']['l1']:.4f}",
                  f"gap MAE% inpainted {np.mean(inp_err):.3f} vs constant fill {np.mean(fill_err):.3f}"]
        assert h0 == h1
        assert steps == expected
        assert s["val_end_phase1"] < s["val_initial"]
        assert np.mean(inp_err) < np.mean(fill_err)


def test_end_to_end_pipeline(smoke_run, capsys):
    with criterion(capsys, "end-to-end phantom pipeline", 10 * 60, smoke_run["elapsed"]) as notes:
        codes = smoke_run["codes"]
        cfg = load_config(preset="smoke", overrides={"data_root": str(smoke_run["data"]),
                                                     "out_root": str(smoke_run["out"])}, environ={})
        split, _, _ = pl.load_prepared(cfg)
        shapes_ok = confined = True
        for pid in split.test_ids:
            cbct = vio.load_volume(smoke_run["data"] / pid / "cbct.nii.gz")
            mask = vio.load_volume(smoke_run["out"] / "gaps" / pid / "gap_mask.nii.gz").data.astype(bool)
            inp = vio.load_volume(smoke_run["out"] / "infer" / "full" / pid / "cbct_inpainted.nii.gz")
            confined &= np.array_equal(inp.data[~mask], cbct.data[~mask])
            for mode in pl.MODES:
                sct = vio.load_volume(smoke_run["out"] / "infer" / mode / pid / "sct.nii.gz")
                shapes_ok &= sct.shape == cbct.shape
        roundtrip = True
        for ct, cbct in generate(PhantomSpec(n_patients=2)):
            for vol in (ct, cbct):
                for plane, mode in ((vio.AXIAL, "crop"), (vio.SAGITTAL, "resize")):
                    sl, geom = vio.extract_slices(vol, plane, sagittal_mode=mode)
                    roundtrip &= np.array_equal(vio.stack_slices(sl, geom).data, vol.data)
        notes += [f"exit codes {sorted(set(codes.values()))}", f"sCT shape == input {shapes_ok}",
                  f"non-gap voxels bitwise equal {confined}", f"slice/stack round-trip {roundtrip}"]
        assert set(codes.values()) == {0} and shapes_ok and confined and roundtrip
