"""Gap-completion GAN: generator, global/local context discriminator, losses, training.

The generator sees three stacked channels (CT, gapped CBCT, gap mask) in the
unit-normalized domain and returns a full synthetic CBCT frame through a
sigmoid head. Training runs three phases: generator alone on the masked
reconstruction loss, discriminator alone with the generator frozen, then the
joint adversarial game.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blend import poisson_blend
from .checkpoint import CSVLog, load_checkpoint, params_hash, save_checkpoint
from .config import PHASE_DISC, PHASE_GEN, PHASE_JOINT, CompletionConfig
from .gaps import sample_gap

log = logging.getLogger(__name__)

EPS = 1e-7


# ------------------------------------------------------------------ generator


def _conv(cin, cout, k, stride=1, dilation=1):
    pad = dilation * (k - 1) // 2
    return [nn.Conv2d(cin, cout, k, stride, pad, dilation=dilation),
            nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


def _deconv(cin, cout):
    return [nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class CompletionGenerator(nn.Module):
    """Encoder (two stride-2 stages), dilated middle, transposed-conv decoder, 3x3 sigmoid head."""

    def __init__(self, base: int = 32, in_channels: int = 3, dilations=(2, 4, 8, 16)):
        super().__init__()
        b = base
        layers = []
        layers += _conv(in_channels, b, 5)
        layers += _conv(b, 2 * b, 3, 2)
        layers += _conv(2 * b, 2 * b, 3)
        layers += _conv(2 * b, 4 * b, 3, 2)
        layers += _conv(4 * b, 4 * b, 3)
        layers += _conv(4 * b, 4 * b, 3)
        for d in dilations:
            layers += _conv(4 * b, 4 * b, 3, dilation=d)
        layers += _conv(4 * b, 4 * b, 3)
        layers += _conv(4 * b, 4 * b, 3)
        layers += _deconv(4 * b, 2 * b)
        layers += _conv(2 * b, 2 * b, 3)
        layers += _deconv(2 * b, b)
        layers += _conv(b, max(1, b // 2), 3)
        layers += [nn.Conv2d(max(1, b // 2), 1, 3, 1, 1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError("spatial size must be divisible by 4")
        return self.net(x)


def gen_forward(gen: CompletionGenerator, ct, cbct_gapped, mask):
    """Run the generator on 2-D arrays or ``(B, H, W)`` tensors; returns ``(B, 1, H, W)``."""
    def t(a):
        a = torch.as_tensor(np.asarray(a) if not torch.is_tensor(a) else a)
        return a.reshape(-1, *a.shape[-2:]).to(next(gen.parameters()).dtype)
    ct, cbct_gapped, mask = t(ct), t(cbct_gapped), t(mask)
    if not (ct.shape == cbct_gapped.shape == mask.shape):
        raise ValueError("CT, gapped CBCT and mask must be aligned")
    return gen(torch.stack([ct, cbct_gapped, mask], dim=1))


# -------------------------------------------------------------- discriminator


def _disc_branch(n_layers, base, in_channels=1):
    layers, cin = [], in_channels
    for i in range(n_layers):
        cout = base * min(2 ** i, 8)
        layers += [nn.Conv2d(cin, cout, 5, 2, 2), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
        cin = cout
    return nn.Sequential(*layers)


def patch_origin(mask, patch: int):
    """Top-left corner of the ``patch`` window centred on the mask centroid, clamped in-bounds."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    else:
        cy, cx = rows.mean(), cols.mean()
    r0 = int(math.floor(cy - (patch - 1) / 2.0 + 0.5))
    c0 = int(math.floor(cx - (patch - 1) / 2.0 + 0.5))
    return min(max(r0, 0), h - patch), min(max(c0, 0), w - patch)


class ContextDiscriminator(nn.Module):
    """Global branch on the whole frame plus local branch on a patch around the gap."""

    def __init__(self, image_size: int = 160, patch_size: int = 96, base: int = 64,
                 n_global: int = 6, n_local: int = 5, feature_dim: int = 1024):
        super().__init__()
        self.image_size, self.patch_size = image_size, patch_size
        self.global_conv = _disc_branch(n_global, base)
        self.local_conv = _disc_branch(n_local, base)
        with torch.no_grad():
            g = self.global_conv(torch.zeros(2, 1, image_size, image_size)).flatten(1).shape[1]
            l_ = self.local_conv(torch.zeros(2, 1, patch_size, patch_size)).flatten(1).shape[1]
        self.global_fc = nn.Linear(g, feature_dim)
        self.local_fc = nn.Linear(l_, feature_dim)
        self.head = nn.Linear(2 * feature_dim, 1)

    def crop(self, img, origins):
        p = self.patch_size
        return torch.stack([img[i, :, r:r + p, c:c + p] for i, (r, c) in enumerate(origins)])

    def features(self, img, origins):
        gf = F.relu(self.global_fc(self.global_conv(img).flatten(1)))
        lf = F.relu(self.local_fc(self.local_conv(self.crop(img, origins)).flatten(1)))
        return gf, lf, torch.cat([gf, lf], dim=1)

    def forward(self, img, origins):
        if img.dim() != 4 or img.shape[1] != 1 or img.shape[-1] != self.image_size \
                or img.shape[-2] != self.image_size:
            raise ValueError(f"expected (B, 1, {self.image_size}, {self.image_size}), got {tuple(img.shape)}")
        return torch.sigmoid(self.head(self.features(img, origins)[2]))


def disc_forward(disc: ContextDiscriminator, img, masks):
    """Probability that each image is real; ``masks`` (B, H, W) place the local patch."""
    masks = masks.detach().cpu().numpy() if torch.is_tensor(masks) else np.asarray(masks)
    masks = masks.reshape(-1, *masks.shape[-2:])
    origins = [patch_origin(m, disc.patch_size) for m in masks]
    return disc(img, origins)


# ---------------------------------------------------------------------- losses


def mse_loss(out, target, mask):
    """Mean squared residual over gap pixels only."""
    mask = mask.to(out.dtype).reshape(out.shape)
    n = mask.sum()
    if n.item() == 0:
        raise ValueError("no gap pixels")
    return ((mask * (out - target.reshape(out.shape))) ** 2).sum() / n


def l1_loss(out, target, mask):
    mask = mask.to(out.dtype).reshape(out.shape)
    n = mask.sum()
    if n.item() == 0:
        raise ValueError("no gap pixels")
    return (mask * (out - target.reshape(out.shape))).abs().sum() / n


def adv_losses(d_real, d_fake, eps: float = EPS):
    """``(d_loss, g_adv_loss)``; the generator side is the non-saturating ``-log D(fake)``."""
    d_real = torch.as_tensor(d_real).clamp(eps, 1 - eps)
    d_fake = torch.as_tensor(d_fake).clamp(eps, 1 - eps)
    d_loss = -(torch.log(d_real) + torch.log1p(-d_fake)).mean()
    return d_loss, gen_adv_loss(d_fake, eps)


def gen_adv_loss(d_fake, eps: float = EPS):
    return -torch.log(torch.as_tensor(d_fake).clamp(eps, 1 - eps)).mean()


def combined_loss(recon, adv, alpha: float):
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return recon + alpha * adv


# --------------------------------------------------------------------- training


@dataclass
class CompletionData:
    """Paired sagittal frames in the unit domain, ``(N, H, W)`` float32."""

    ct: np.ndarray
    cbct: np.ndarray
    fill: float
    val_ct: np.ndarray | None = None
    val_cbct: np.ndarray | None = None

    def __post_init__(self):
        if len(self.ct) == 0:
            raise ValueError("empty completion dataset")
        if self.ct.shape != self.cbct.shape:
            raise ValueError("CT and CBCT frames are not aligned")


def build_models(cfg: CompletionConfig):
    gen = CompletionGenerator(cfg.gen_base, dilations=tuple(cfg.dilations))
    disc = ContextDiscriminator(cfg.frame_size, cfg.patch_size, cfg.disc_base,
                                feature_dim=cfg.feature_dim)
    return gen, disc


def _batch(ct, cbct, idx, fill, rng, cfg):
    h, w = ct.shape[1:]
    masks = np.zeros((len(idx), h, w), np.float32)
    for j in range(len(idx)):
        masks[j] = sample_gap(w, rng, min_width=cfg.min_width, max_width=cfg.max_width).mask((h, w))
    x = torch.from_numpy(cbct[idx].astype(np.float32))
    m = torch.from_numpy(masks)
    gapped = x * (1 - m) + fill * m
    inp = torch.stack([torch.from_numpy(ct[idx].astype(np.float32)), gapped, m], dim=1)
    return inp, x.unsqueeze(1), m


def _fixed_val(data: CompletionData, cfg: CompletionConfig):
    ct = data.val_ct if data.val_ct is not None else data.ct
    cbct = data.val_cbct if data.val_cbct is not None else data.cbct
    rng = np.random.default_rng(cfg.seed + 7919)
    n = min(cfg.val_slices, len(ct))
    idx = np.sort(rng.choice(len(ct), size=n, replace=False))
    return _batch(ct, cbct, idx, data.fill, rng, cfg)


def validation_loss(gen, val, batch=16) -> float:
    """Masked reconstruction MSE on a fixed gapped validation set (eval mode)."""
    inp, target, m = val
    was_training = gen.training
    gen.eval()
    total, count = 0.0, 0.0
    with torch.no_grad():
        for s in range(0, len(inp), batch):
            out = gen(inp[s:s + batch])
            mm = m[s:s + batch].unsqueeze(1)
            total += float(((mm * (out - target[s:s + batch])) ** 2).sum())
            count += float(mm.sum())
    gen.train(was_training)
    return total / count


def _composite(out, target, m):
    m = m.unsqueeze(1)
    return out * m + target * (1 - m)


def train_completion(cfg: CompletionConfig, data: CompletionData, out_dir, *,
                     config_hash: str = "", run_config: dict | None = None) -> dict:
    """Run the three training phases; returns a summary with checkpoint paths.

    Checkpoints land in ``out_dir`` every ``ckpt_every`` iterations and after
    the last one; ``best.pt`` is the lowest validation reconstruction loss.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen, disc = build_models(cfg)
    opt_g = torch.optim.Adadelta(gen.parameters(), lr=cfg.lr)
    opt_d = torch.optim.Adadelta(disc.parameters(), lr=cfg.lr)
    recon_fn = l1_loss if cfg.recon_loss == "l1" else mse_loss
    val = _fixed_val(data, cfg)
    logger = CSVLog(out_dir / "train_log.csv",
                    ["iteration", "phase", "recon", "g_adv", "d_loss", "val_recon"], "completion")

    def checkpoint(it, phase, vloss):
        payload = {
            "network": "completion", "iteration": it, "phase": phase,
            "gen": gen.state_dict(), "disc": disc.state_dict(),
            "opt_g": opt_g.state_dict(), "opt_d": opt_d.state_dict(),
            "config": asdict(cfg), "run_config": run_config or {},
            "config_hash": config_hash, "val_recon": vloss, "fill": data.fill,
        }
        return save_checkpoint(out_dir / f"completion_{it:07d}.pt", payload), payload

    v0 = validation_loss(gen, val)
    logger.write(iteration=0, phase=0, val_recon=v0)
    summary = {"val_initial": v0, "checkpoints": [], "phase2_hash": None}
    best = (math.inf, None)
    gen_hash_p2 = None
    n = len(data.ct)

    for it in range(1, cfg.total_iters + 1):
        phase = cfg.phase_of(it)
        idx = rng.integers(0, n, size=cfg.batch_size)
        inp, target, m = _batch(data.ct, data.cbct, idx, data.fill, rng, cfg)
        row = {"iteration": it, "phase": phase}

        if phase == PHASE_GEN:
            gen.train()
            opt_g.zero_grad()
            loss = recon_fn(gen(inp), target, m)
            loss.backward()
            opt_g.step()
            row["recon"] = loss.item()
        else:
            if phase == PHASE_DISC:
                if gen_hash_p2 is None:
                    gen_hash_p2 = params_hash(gen)
                gen.eval()
                with torch.no_grad():
                    fake = gen(inp)
            else:
                gen.train()
                fake = gen(inp)
            real_masks = np.stack([
                sample_gap(m.shape[-1], rng, min_width=cfg.min_width,
                           max_width=cfg.max_width).mask(m.shape[-2:]) for _ in range(len(idx))])
            disc.train()
            opt_d.zero_grad()
            d_real = disc_forward(disc, target, real_masks)
            d_fake = disc_forward(disc, _composite(fake.detach(), target, m), m)
            d_loss, _ = adv_losses(d_real, d_fake)
            d_loss.backward()
            opt_d.step()
            row["d_loss"] = d_loss.item()
            if phase == PHASE_JOINT:
                opt_g.zero_grad()
                recon = recon_fn(fake, target, m)
                g_adv = gen_adv_loss(disc_forward(disc, _composite(fake, target, m), m))
                loss = combined_loss(recon, g_adv, cfg.alpha)
                loss.backward()
                opt_g.step()
                row.update(recon=recon.item(), g_adv=g_adv.item())

        if phase == PHASE_DISC and it == cfg.iters_phase1 + cfg.iters_phase2:
            summary["phase2_hash"] = (gen_hash_p2, params_hash(gen))
        if it == cfg.iters_phase1:
            summary["val_end_phase1"] = validation_loss(gen, val)
        if it % cfg.ckpt_every == 0 or it == cfg.total_iters:
            vloss = validation_loss(gen, val)
            row["val_recon"] = vloss
            path, _ = checkpoint(it, phase, vloss)
            summary["checkpoints"].append(str(path))
            if vloss < best[0]:
                best = (vloss, path)
                save_checkpoint(out_dir / "best.pt", torch.load(path, weights_only=False))
            log.info("completion it=%d phase=%d val=%.5f", it, phase, vloss)
        if it % cfg.log_every == 0 or "val_recon" in row:
            logger.write(**row)

    summary.update(best=str(out_dir / "best.pt"), best_val=best[0], last=summary["checkpoints"][-1],
                   val_final=validation_loss(gen, val))
    return summary


# -------------------------------------------------------------------- inference


class Completer:
    """Generator restored from a checkpoint, ready for slice-wise inpainting."""

    def __init__(self, ckpt):
        payload = ckpt if isinstance(ckpt, dict) else load_checkpoint(ckpt, "completion")
        cfg = CompletionConfig(**{k: v for k, v in payload["config"].items()
                                  if k in CompletionConfig.__dataclass_fields__})
        self.cfg = cfg
        self.gen = CompletionGenerator(cfg.gen_base, dilations=tuple(cfg.dilations))
        self.gen.load_state_dict(payload["gen"])
        self.gen.eval()
        self.fill = payload.get("fill", 0.0)
        self.config_hash = payload.get("config_hash", "")

    @torch.no_grad()
    def generate(self, ct, cbct_gapped, mask) -> np.ndarray:
        return gen_forward(self.gen, ct, cbct_gapped, mask)[0, 0].double().numpy()

    def inpaint(self, ct, cbct_gapped, mask, tol=1e-6) -> np.ndarray:
        return inpaint_slice(self, ct, cbct_gapped, mask, tol)


def inpaint_slice(model, ct, cbct_gapped, mask, tol=1e-6) -> np.ndarray:
    """Generate an sCBCT frame and Poisson-blend its gap region into the gapped CBCT."""
    mask = np.asarray(mask).astype(bool)
    cbct_gapped = np.asarray(cbct_gapped, dtype=np.float64)
    if not mask.any():
        return cbct_gapped.copy()
    completer = model if isinstance(model, Completer) else Completer(model)
    scbct = completer.generate(ct, cbct_gapped, mask)
    out = poisson_blend(scbct, cbct_gapped, mask, tol)
    out[mask] = np.clip(out[mask], 0.0, 1.0)
    return out
