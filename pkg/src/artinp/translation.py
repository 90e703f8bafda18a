"""CBCT -> sCT translation GAN: UNet generator, 70x70 PatchGAN, adversarial + lambda * L1."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import CSVLog, load_checkpoint, save_checkpoint
from .config import TranslationConfig
from .metrics import mae_pct
from .volume_io import (HU16, SIGNED11, SliceImage, body_mask, denormalize_array,
                        normalize_array)

log = logging.getLogger(__name__)


class UNetGenerator(nn.Module):
    """``num_downs`` stride-2 encoder blocks down to a 1x1 bottleneck and a mirrored decoder.

    Encoder block ``i`` is conv4x4/s2 + batch-norm + leaky-ReLU (no norm on the
    first and the bottleneck block). Decoder blocks are transposed conv4x4/s2 +
    batch-norm + ReLU and are concatenated with the encoder output of the same
    resolution. The head is a transposed conv4x4/s2 + tanh.
    """

    def __init__(self, num_downs: int = 8, ngf: int = 64, in_channels: int = 1, out_channels: int = 1):
        super().__init__()
        if num_downs < 2:
            raise ValueError("num_downs must be at least 2")
        self.num_downs = num_downs
        ch = [ngf * min(2 ** i, 8) for i in range(num_downs)]
        self.enc_channels = ch
        self.encoders = nn.ModuleList()
        cin = in_channels
        for i, c in enumerate(ch):
            layers = [nn.Conv2d(cin, c, 4, 2, 1, bias=i in (0, num_downs - 1))]
            if 0 < i < num_downs - 1:
                layers.append(nn.BatchNorm2d(c))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            self.encoders.append(nn.Sequential(*layers))
            cin = c
        # decoder k maps to the resolution of encoder k-1 and is concatenated with its output
        self.decoders = nn.ModuleList()
        self.dec_in_channels = []
        dec_in = ch[-1]
        for k in range(num_downs - 1, 0, -1):
            out = ch[k - 1]
            self.dec_in_channels.append(dec_in)
            self.decoders.append(nn.Sequential(
                nn.ConvTranspose2d(dec_in, out, 4, 2, 1, bias=False),
                nn.BatchNorm2d(out), nn.ReLU(inplace=True)))
            expected = out + ch[k - 1]
            dec_in = expected
        assert dec_in == 2 * ch[0], "decoder/skip channel bookkeeping is inconsistent"
        self.head = nn.Sequential(nn.ConvTranspose2d(dec_in, out_channels, 4, 2, 1), nn.Tanh())

    @property
    def input_size(self) -> int:
        """Native slice size: the one that reduces to a 1x1 bottleneck."""
        return 2 ** self.num_downs

    def forward(self, x, return_bottleneck=False):
        step = self.input_size
        if x.dim() != 4 or x.shape[-1] % step or x.shape[-2] % step:
            raise ValueError(f"expected (B, C, H, W) input with H and W multiples of {step}, "
                             f"got {tuple(x.shape)}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        bottleneck = x
        for dec, skip in zip(self.decoders, reversed(skips[:-1])):
            x = torch.cat([dec(x), skip], dim=1)
        y = self.head(x)
        return (y, bottleneck) if return_bottleneck else y


class PatchDiscriminator(nn.Module):
    """PatchGAN with 4x4 kernels; ``n_layers=3`` gives C64-C128-C256-C512-C1 and a 70x70 field.

    The first ``n_layers`` convolutions use stride 2, the last two stride 1.
    """

    def __init__(self, in_channels: int = 2, ndf: int = 64, n_layers: int = 3):
        super().__init__()
        self.n_layers = n_layers
        layers = [nn.Conv2d(in_channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        cin = ndf
        for n in range(1, n_layers + 1):
            cout = ndf * min(2 ** n, 8)
            stride = 2 if n < n_layers else 1
            layers += [nn.Conv2d(cin, cout, 4, stride, 1, bias=False), nn.BatchNorm2d(cout),
                       nn.LeakyReLU(0.2, True)]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 4, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)

    def receptive_field(self) -> int:
        return receptive_field(((4, 2),) * self.n_layers + ((4, 1), (4, 1)))


def receptive_field(layers=((4, 2), (4, 2), (4, 2), (4, 1), (4, 1))) -> int:
    """Input extent seen by one output element of a stack of ``(kernel, stride)`` convolutions."""
    rf = 1
    for k, s in reversed(layers):
        rf = rf * s + (k - s)
    return rf


def patchgan_forward(disc: PatchDiscriminator, cbct, candidate=None):
    """Logit map; with ``candidate`` the pair is concatenated channel-wise (conditional form)."""
    x = cbct if candidate is None else torch.cat([cbct, candidate], dim=1)
    return disc(x)


@dataclass
class TranslationLoss:
    gan: torch.Tensor
    l1: torch.Tensor
    total: torch.Tensor
    d_loss: torch.Tensor
    lam: float


def translation_losses(d_out_real, d_out_fake, gen_out, target, lam: float = 100.0) -> TranslationLoss:
    """BCE over the patch maps (logits), mean absolute L1, and their lambda-weighted sum.

    ``gan`` is the generator term; ``d_loss`` the discriminator objective,
    halved as in the usual pix2pix recipe.
    """
    gan = F.binary_cross_entropy_with_logits(d_out_fake, torch.ones_like(d_out_fake))
    l1 = (target - gen_out).abs().mean()
    d_loss = 0.5 * (F.binary_cross_entropy_with_logits(d_out_real, torch.ones_like(d_out_real))
                    + F.binary_cross_entropy_with_logits(d_out_fake, torch.zeros_like(d_out_fake)))
    return TranslationLoss(gan, l1, gan + lam * l1, d_loss, lam)


# --------------------------------------------------------------------- training


@dataclass
class TranslationData:
    """Axial slices in the signed domain, ``(N, H, W)`` float32."""

    cbct: np.ndarray
    ct: np.ndarray
    val_cbct: np.ndarray | None = None
    val_ct: np.ndarray | None = None

    def __post_init__(self):
        if len(self.cbct) == 0:
            raise ValueError("empty translation dataset")
        if self.cbct.shape != self.ct.shape:
            raise ValueError("CBCT and CT slices are not aligned")


def build_models(cfg: TranslationConfig):
    gen = UNetGenerator(cfg.num_downs, cfg.ngf)
    disc = PatchDiscriminator(2 if cfg.conditional else 1, cfg.ndf)
    return gen, disc


def _val_set(data: TranslationData, cfg: TranslationConfig):
    cbct = data.val_cbct if data.val_cbct is not None else data.cbct
    ct = data.val_ct if data.val_ct is not None else data.ct
    if len(cbct) > cfg.val_slices:
        idx = np.linspace(0, len(cbct) - 1, cfg.val_slices).round().astype(int)
        cbct, ct = cbct[idx], ct[idx]
    return cbct, ct


def validate(gen, cbct, ct, batch=16) -> dict:
    """Mean L1 in the signed domain and body-masked MAE% in HU."""
    was = gen.training
    gen.eval()
    l1s, maes = [], []
    with torch.no_grad():
        for s in range(0, len(cbct), batch):
            x = torch.from_numpy(cbct[s:s + batch].astype(np.float32)).unsqueeze(1)
            y = gen(x)[:, 0].double().numpy()
            for pred, ref in zip(y, ct[s:s + batch]):
                l1s.append(np.abs(pred - ref).mean())
                ref_hu = denormalize_array(ref, SIGNED11)
                m = body_mask(ref_hu).mask
                if m.any():
                    maes.append(mae_pct(ref_hu, denormalize_array(pred, SIGNED11), m))
    gen.train(was)
    return {"l1": float(np.mean(l1s)), "mae_pct": float(np.mean(maes)) if maes else math.nan}


def train_translation(cfg: TranslationConfig, data: TranslationData, out_dir, *,
                      config_hash: str = "", run_config: dict | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen, disc = build_models(cfg)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=(cfg.beta1, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(cfg.beta1, 0.999))
    vcbct, vct = _val_set(data, cfg)
    logger = CSVLog(out_dir / "train_log.csv",
                    ["iteration", "epoch", "gan", "l1", "d_loss", "val_l1", "val_mae_pct"], "translation")
    v0 = validate(gen, vcbct, vct)
    logger.write(iteration=0, epoch=0, val_l1=v0["l1"], val_mae_pct=v0["mae_pct"])
    summary = {"val_initial": v0, "checkpoints": []}
    best = (math.inf, None)
    it = 0
    n = len(data.cbct)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        if cfg.max_iters_per_epoch:
            order = order[: cfg.max_iters_per_epoch * cfg.batch_size]
        gen.train()
        disc.train()
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x = torch.from_numpy(data.cbct[idx].astype(np.float32)).unsqueeze(1)
            y = torch.from_numpy(data.ct[idx].astype(np.float32)).unsqueeze(1)
            cond = x if cfg.conditional else None
            fake = gen(x)

            opt_d.zero_grad()
            d_real = patchgan_forward(disc, cond, y) if cond is not None else disc(y)
            d_fake = patchgan_forward(disc, cond, fake.detach()) if cond is not None else disc(fake.detach())
            losses = translation_losses(d_real, d_fake, fake.detach(), y, cfg.lam)
            losses.d_loss.backward()
            opt_d.step()

            opt_g.zero_grad()
            d_fake_g = patchgan_forward(disc, cond, fake) if cond is not None else disc(fake)
            g = translation_losses(d_real.detach(), d_fake_g, fake, y, cfg.lam)
            g.total.backward()
            opt_g.step()
            it += 1
            if it % cfg.log_every == 0:
                logger.write(iteration=it, epoch=epoch, gan=g.gan.item(), l1=g.l1.item(),
                             d_loss=losses.d_loss.item())

        if epoch % cfg.ckpt_every_epochs == 0 or epoch == cfg.epochs:
            v = validate(gen, vcbct, vct)
            logger.write(iteration=it, epoch=epoch, val_l1=v["l1"], val_mae_pct=v["mae_pct"])
            payload = {
                "network": "translation", "iteration": it, "epoch": epoch,
                "gen": gen.state_dict(), "disc": disc.state_dict(),
                "opt_g": opt_g.state_dict(), "opt_d": opt_d.state_dict(),
                "config": asdict(cfg), "run_config": run_config or {},
                "config_hash": config_hash, "val": v,
            }
            path = save_checkpoint(out_dir / f"translation_e{epoch:03d}.pt", payload)
            summary["checkpoints"].append(str(path))
            score = v["mae_pct"] if math.isfinite(v["mae_pct"]) else v["l1"]
            if score < best[0]:
                best = (score, path)
                save_checkpoint(out_dir / "best.pt", payload)
            log.info("translation epoch=%d val_l1=%.4f val_mae=%.3f", epoch, v["l1"], v["mae_pct"])
    summary.update(best=str(out_dir / "best.pt"), best_val=best[0], iterations=it,
                   val_final=validate(gen, vcbct, vct))
    return summary


# -------------------------------------------------------------------- inference


class Translator:
    def __init__(self, ckpt):
        payload = ckpt if isinstance(ckpt, dict) else load_checkpoint(ckpt, "translation")
        cfg = TranslationConfig(**{k: v for k, v in payload["config"].items()
                                   if k in TranslationConfig.__dataclass_fields__})
        self.cfg = cfg
        self.gen = UNetGenerator(cfg.num_downs, cfg.ngf)
        self.gen.load_state_dict(payload["gen"])
        self.gen.eval()
        self.config_hash = payload.get("config_hash", "")

    @torch.no_grad()
    def forward_signed(self, batch: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.asarray(batch, dtype=np.float32)).reshape(-1, 1, *batch.shape[-2:])
        return self.gen(x)[:, 0].double().numpy()

    def translate_batch(self, hu_slices: np.ndarray) -> np.ndarray:
        hu_slices = np.asarray(hu_slices)
        size = self.gen.input_size
        if hu_slices.shape[-2:] != (size, size):
            raise ValueError(f"expected {size}x{size} slices, got {hu_slices.shape[-2:]}")
        return denormalize_array(self.forward_signed(normalize_array(hu_slices, SIGNED11)), SIGNED11)


def translate_slice(model, img) -> SliceImage:
    """HU slice in, HU sCT slice out; signed-domain inputs are accepted as-is."""
    translator = model if isinstance(model, Translator) else Translator(model)
    pixels = img.pixels if isinstance(img, SliceImage) else np.asarray(img)
    size = translator.gen.input_size
    if pixels.shape != (size, size):
        raise ValueError(f"expected a {size}x{size} slice, got {pixels.shape}")
    domain = img.domain if isinstance(img, SliceImage) else HU16
    signed = normalize_array(pixels, SIGNED11) if domain == HU16 else pixels
    out = denormalize_array(translator.forward_signed(signed[None]), SIGNED11)[0]
    index = img.index if isinstance(img, SliceImage) else 0
    return SliceImage(out, HU16, "axial", index)
