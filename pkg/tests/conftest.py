import time

import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def run_cli(*argv):
    from artinp.cli import main
    return main([str(a) for a in argv])


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """Phantom -> prepare -> gaps -> both trainings -> infer (both modes) -> evaluate at smoke scale."""
    root = tmp_path_factory.mktemp("smoke")
    data, out = root / "data", root / "out"
    common = ["--preset", "smoke", "--data-root", data, "--out-root", out]
    t0 = time.perf_counter()
    codes = {}
    codes["phantom"] = run_cli("phantom", "--patients", 4, "--size", 64, *common)
    for stage in ("prepare-data", "make-gaps", "train-completion", "train-translation"):
        codes[stage] = run_cli(stage, *common)
    comp, trans = out / "completion" / "best.pt", out / "translation" / "best.pt"
    codes["infer-full"] = run_cli("infer", *common, "--mode", "full",
                                  "--completion-ckpt", comp, "--translation-ckpt", trans)
    codes["infer-no-completion"] = run_cli("infer", *common, "--mode", "no-completion",
                                           "--translation-ckpt", trans)
    codes["evaluate"] = run_cli("evaluate", *common)
    return {"root": root, "data": data, "out": out, "common": common, "codes": codes,
            "completion_ckpt": comp, "translation_ckpt": trans,
            "elapsed": time.perf_counter() - t0}
