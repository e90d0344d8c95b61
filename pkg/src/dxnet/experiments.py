"""Desk-scale denoising experiment: train DxNet and DenseNet denoisers on
synthetic patches, measure held-out PSNR gain and probe minima flatness.

Everything is keyed on one integer seed so two runs give identical numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from dxnet.data import extract_patches, synthetic_images
from dxnet.model import Model, NetConfig, build_model
from dxnet.probe import FlatnessReport, PerturbationConfig, estimate_flatness
from dxnet.train import ArrayDataset, History, dataset_loss, evaluate, psnr, recipe, train


@dataclass
class DeskSetup:
    blocks: Tuple[int, ...] = (2, 3, 4)  # 4-6-8 halved
    growth: int = 8
    sigma: float = 50.0
    image_size: int = 48
    train_images: int = 40
    test_images: int = 10
    patch_size: int = 16
    train_patches: int = 512
    test_patches: int = 64
    epochs: int = 12
    batch_size: int = 16
    lr: float = 3e-3
    milestones: Tuple[float, ...] = (0.7, 0.9)
    probe_patches: int = 32
    probe_realizations: int = 24


@dataclass
class DeskPatches:
    train: ArrayDataset  # clean targets, noise redrawn per batch
    test: ArrayDataset  # fixed noisy inputs
    probe: ArrayDataset  # fixed noisy training patches


@dataclass
class DeskResult:
    seed: int
    xunit: bool
    n_params: int
    noisy_psnr: float
    denoised_psnr: float
    history: History
    flatness: FlatnessReport = None
    seconds: Dict[str, float] = field(default_factory=dict)

    @property
    def gain(self) -> float:
        return self.denoised_psnr - self.noisy_psnr


def _noisy(clean, sigma, rng):
    return (clean + rng.normal(0.0, sigma / 255.0, clean.shape)).astype(np.float32)


def make_patches(setup: DeskSetup, seed: int) -> DeskPatches:
    r = np.random.default_rng([0, seed])
    imgs = synthetic_images(setup.train_images, setup.image_size, 1, r)
    test_imgs = synthetic_images(setup.test_images, setup.image_size, 1, np.random.default_rng([1, seed]))
    clean = extract_patches(list(imgs), setup.patch_size, setup.train_patches, r)
    tclean = extract_patches(list(test_imgs), setup.patch_size, setup.test_patches, np.random.default_rng([2, seed]))
    tnoisy = _noisy(tclean, setup.sigma, np.random.default_rng([3, seed]))
    pclean = clean[: setup.probe_patches]
    pnoisy = _noisy(pclean, setup.sigma, np.random.default_rng([4, seed]))
    return DeskPatches(
        ArrayDataset(clean.copy(), clean, setup.sigma),
        ArrayDataset(tnoisy, tclean),
        ArrayDataset(pnoisy, pclean),
    )


def train_denoiser(setup: DeskSetup, patches: DeskPatches, seed: int, xunit: bool) -> Tuple[Model, History]:
    cfg = NetConfig(task="denoising", blocks=setup.blocks, growth=setup.growth, xunit=xunit)
    model = build_model(cfg, seed)
    run = recipe(
        "denoising",
        epochs=setup.epochs,
        batch_size=setup.batch_size,
        lr=setup.lr,
        milestones=setup.milestones,
        seed=seed,
    )
    hist = train(model, patches.train, run)
    return model.eval(), hist


def probe_denoiser(model: Model, patches: DeskPatches, setup: DeskSetup, seed: int) -> FlatnessReport:
    data = patches.probe
    return estimate_flatness(
        model.eval(),
        lambda m: dataset_loss(m, data, "mse"),
        PerturbationConfig(None, setup.probe_realizations, seed),
    )


def run_denoiser(setup: DeskSetup, seed: int, xunit: bool, probe: bool = True) -> DeskResult:
    patches = make_patches(setup, seed)
    t = time.perf_counter()
    model, hist = train_denoiser(setup, patches, seed, xunit)
    secs = {"train": time.perf_counter() - t}
    test = patches.test
    noisy = float(np.mean([psnr(a, b) for a, b in zip(test.inputs, test.targets)]))
    res = DeskResult(seed, xunit, model.num_parameters(), noisy, evaluate(model, test), hist, seconds=secs)
    if probe:
        t = time.perf_counter()
        res.flatness = probe_denoiser(model, patches, setup, seed)
        secs["probe"] = time.perf_counter() - t
    return res


def flatness_trend(setup: DeskSetup, seeds=(0, 1, 2)) -> List[Tuple[DeskResult, DeskResult]]:
    """(DxNet, DenseNet) pairs trained on identical patches per seed."""
    return [(run_denoiser(setup, s, True), run_denoiser(setup, s, False)) for s in seeds]
