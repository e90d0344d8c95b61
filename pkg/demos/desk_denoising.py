"""
Desk-scale denoising: DxNet vs DenseNet
=======================================

Both networks are trained on the same synthetic patches with sigma=50 noise,
then probed for minima flatness. One seed takes a few minutes on one core;
pass more seeds on the command line, e.g. ``python desk_denoising.py 0 1 2``.
"""

import sys

from dxnet.experiments import DeskSetup, run_denoiser

setup = DeskSetup()
seeds = [int(a) for a in sys.argv[1:]] or [0]

for seed in seeds:
    for xunit in (True, False):
        r = run_denoiser(setup, seed, xunit)
        name = "DxNet" if xunit else "DenseNet"
        f = r.flatness
        print(f"seed {seed} {name:8s} params {r.n_params:6d}  PSNR {r.noisy_psnr:.2f} -> {r.denoised_psnr:.2f} dB"
              f"  trace {f.trace_estimate:.4g}  mean eigenvalue {f.mean_eigenvalue:.3g}")
