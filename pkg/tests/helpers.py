"""Shared helpers for the network tests."""
import numpy as np
import torch


def sample_params(modules, n, seed=0):
    """``n`` distinct (parameter, flat index) pairs drawn across ``modules``."""
    params = [p for m in modules for p in m.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    flat = np.random.default_rng(seed).choice(sizes.sum(), size=n, replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for f in flat:
        k = int(np.searchsorted(bounds, f, side="right"))
        out.append((params[k], int(f - (bounds[k - 1] if k else 0))))
    return out


def gradient_check(loss_fn, picks, h=1e-6):
    """Compare autograd against central differences; returns (analytic, numeric) arrays."""
    for p, _ in picks:
        p.grad = None
    loss_fn().backward()
    analytic = np.array([p.grad.reshape(-1)[i].item() for p, i in picks])
    numeric = []
    with torch.no_grad():
        for p, i in picks:
            flat = p.data.reshape(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
    return analytic, np.array(numeric)


def rel_error(a, b, floor=1e-6):
    """Elementwise relative error.

    The floor keeps exactly-zero gradients (e.g. conv biases feeding a batch
    norm) from turning ~1e-10 finite-difference roundoff into a large ratio.
    """
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
