import os

import numpy as np
import pytest
import torch
import torch.nn as nn

from unmark.losses import _VGG16_LAYOUT
from unmark.procedural import write_assets

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def assets(tmp_path_factory):
    root = tmp_path_factory.mktemp("assets")
    hosts, logos = write_assets(str(root), n_hosts=48, n_logos=8, seed=11, host_size=96, logo_size=64)
    return hosts, logos


def random_vgg_state(seed=0):
    """Seeded stand-in for pretrained VGG16 features (test fixture only)."""
    g = torch.Generator().manual_seed(seed)
    state, idx, in_ch = {}, 0, 3
    for v in _VGG16_LAYOUT:
        if v == "M":
            idx += 1
            continue
        bound = (6.0 / (in_ch * 9)) ** 0.5
        state[f"features.{idx}.weight"] = (torch.rand(v, in_ch, 3, 3, generator=g) * 2 - 1) * bound
        state[f"features.{idx}.bias"] = torch.zeros(v)
        idx += 2
        in_ch = v
    return state


@pytest.fixture(scope="session")
def vgg_weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("vgg") / "vgg16_features.pth"
    torch.save(random_vgg_state(), path)
    return str(path)


TINY_ARCH = dict(widths=(4, 6, 8, 8, 8), blocks=1, refine_blocks=1, reduction=4)


def identity_model():
    """Pipeline whose mask head outputs exactly 0, so I_final == I."""
    from unmark.networks import ArchConfig, WatermarkRemover

    model = WatermarkRemover(ArchConfig(**TINY_ARCH))
    with torch.no_grad():
        model.split.heads["mask"].weight.zero_()
        model.split.heads["mask"].bias.fill_(-1e4)
    return model


@pytest.fixture(scope="session")
def identity_ckpt(tmp_path_factory):
    from unmark import checkpoint

    path = tmp_path_factory.mktemp("ckpt") / "identity.ckpt"
    checkpoint.save(path, identity_model(), {"note": "identity fixture"})
    return str(path)


@pytest.fixture(scope="session")
def tiny_dataset(assets, tmp_path_factory):
    """4-sample LOGO-Gray fixture (2 train + 2 test) at 64 x 64; returns the manifest path."""
    from unmark.compositor import get_profile, synthesize_dataset

    hosts, logos = assets
    out = tmp_path_factory.mktemp("tiny") / "data"
    synthesize_dataset(get_profile("logo-gray").with_counts(2, 2), hosts, logos, 1, out, image_size=64)
    return str(out / "manifest.json")


@pytest.fixture(scope="session")
def overfit_run(assets, vgg_weights, tmp_path_factory):
    """Default model memorizing one 64x64 sample; stops once the thresholds pass."""
    from overfit import make_overfit_data, run_overfit

    root = tmp_path_factory.mktemp("overfit")
    manifest = make_overfit_data(*assets, root / "data")
    torch.manual_seed(0)
    return run_overfit(manifest, vgg_weights, root / "ck", max_steps=2000)
