"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 share one desk-scale training run (about half an hour on a
single core).
"""

import numpy as np
import pytest

from dxnet import blocks
from dxnet.autodiff import Variable, no_grad
from dxnet.blocks import DenseLayerSpec, LayerParams, TransitionSpec, XUnitSpec
from dxnet.checkpoint import load_checkpoint, save_checkpoint, scalar_counts
from dxnet.cli import dispatch
from dxnet.data import encode_cifar10, load_cifar10, read_pnm, write_pnm
from dxnet.experiments import DeskSetup, flatness_trend
from dxnet.gradcheck import check_gradients
from dxnet.model import NetConfig, build_model, param_count, predict
from dxnet.probe import PerturbationConfig, QuadraticFixture, cam, estimate_flatness
from test_autodiff import _random_primitive_cases
from test_blocks import build_dense, build_xunit, generic_point, weighted


# -- 1 ---------------------------------------------------------------------------


def _composed_cases(rng):
    for gate in ("sigmoid", "gaussian"):
        for with_bn in (True, False):
            spec = XUnitSpec(2, gate=gate, with_bn=with_bn)
            p = generic_point(build_xunit(spec, 1))
            x = Variable(rng.normal(size=(2, 2, 6, 5)))
            r = rng.normal(size=x.shape)
            f = lambda x=x, p=p, spec=spec, r=r: weighted(blocks.xunit_forward(x, p, "xu", spec), r)
            yield f"xunit-{gate}-bn{with_bn}", f, [x, *p.tensors.values()], 1e-3 if with_bn else 1e-4
    for with_bn in (True, False):
        spec = DenseLayerSpec(3, 2, bottleneck_channels=4, with_bn=with_bn)
        p = generic_point(build_dense(spec, 4))
        x = Variable(rng.normal(size=(2, 3, 4, 4)))
        r = rng.normal(size=(2, 5, 4, 4))
        f = lambda x=x, p=p, spec=spec, r=r: weighted(blocks.dense_layer_forward(x, p, "d", spec), r)
        yield f"xdense-bn{with_bn}", f, [x, *p.tensors.values()], 1e-3 if with_bn else 1e-4
    for with_bn, with_pool in ((True, True), (False, False)):
        spec = TransitionSpec(4, 0.5, with_pool=with_pool, with_bn=with_bn)
        p = LayerParams(dtype=np.float64)
        blocks.init_transition(p, "t", spec, rng)
        generic_point(p)
        x = Variable(rng.normal(size=(2, 4, 4, 6)))
        r = rng.normal(size=blocks.transition_forward(x, p, "t", spec).shape)
        f = lambda x=x, p=p, spec=spec, r=r: weighted(blocks.transition_forward(x, p, "t", spec), r)
        yield f"transition-bn{with_bn}", f, [x, *p.tensors.values()], 1e-3 if with_bn else 1e-4


def test_c01_gradient_correctness(verdict):
    rng = np.random.default_rng(101)
    cases = list(_random_primitive_cases(rng)) + list(_composed_cases(rng))
    shapes = {tuple(v.shape) for _, _, vs, _ in cases for v in vs}
    errors = {label: check_gradients(f, vs) for label, f, vs, _ in cases}
    bad = [(label, errors[label]) for label, _, _, tol in cases if not errors[label] < tol]
    ok = not bad and len(shapes) >= 20
    assert verdict(1, ok, f"{len(cases)} checks over {len(shapes)} shapes, worst rel err {max(errors.values()):.2e}, failures {bad}")


# -- 2 ---------------------------------------------------------------------------


def test_c02_gate_invariants(verdict):
    rng = np.random.default_rng(202)
    violations = 0
    count = 0
    with no_grad():
        for gate in ("sigmoid", "gaussian"):
            for i in range(1000):
                c = int(rng.integers(1, 5))
                spec = XUnitSpec(c, gate=gate, use_pointwise=bool(rng.integers(2)), with_bn=bool(rng.integers(2)))
                p = build_xunit(spec, seed=int(rng.integers(2**31)))
                x = Variable(rng.normal(0, rng.uniform(0.1, 10), size=(int(rng.integers(1, 3)), c, *rng.integers(1, 12, 2))))
                g = blocks.xunit_gate(x, p, "xu", spec).data
                y = blocks.xunit_forward(x, p, "xu", spec).data
                count += 1
                violations += int(not (np.all((g >= 0) & (g <= 1)) and np.all(np.abs(y) <= np.abs(x.data))))
    assert verdict(2, violations == 0, f"{count} random inputs over both gates, {violations} violations")


# -- 3 ---------------------------------------------------------------------------


def test_c03_parameter_accounting(verdict, tmp_path):
    formula_ok = all(param_count(XUnitSpec(k, use_pointwise=pw), "paper_formula") == 82 * k for k in range(1, 65) for pw in (True, False))
    configs = [
        NetConfig(blocks=(12, 12, 12), growth=12, reduction=0.5),
        NetConfig(blocks=(16, 16, 16), growth=12, xunit=False),
        NetConfig(task="denoising", blocks=(2, 3, 4), growth=8),
        NetConfig(task="denoising", blocks=(2, 3, 4), growth=8, xunit=False, gate="gaussian"),
        NetConfig(task="super_resolution", blocks=(2, 2), growth=6, scale=4),
        NetConfig(blocks=(1, 2), growth=4, stem="imagenet", pointwise=False),
    ]
    mismatches = []
    for i, cfg in enumerate(configs):
        save_checkpoint(build_model(cfg, 0), tmp_path / f"{i}.dxnt")
        stored, _ = scalar_counts(tmp_path / f"{i}.dxnt")
        if stored != param_count(cfg, "full"):
            mismatches.append((i, stored, param_count(cfg, "full")))
    dx = param_count(configs[0])
    dn = param_count(configs[1])
    budgets_ok = abs(dx - 0.5e6) <= 0.15 * 0.5e6 and abs(dn - 0.8e6) <= 0.15 * 0.8e6
    ok = formula_ok and not mismatches and budgets_ok
    assert verdict(3, ok, f"82k formula {formula_ok}, serializer mismatches {mismatches}, DxNet {dx} vs 0.5M, DenseNet {dn} vs 0.8M")


# -- 4 ---------------------------------------------------------------------------


def test_c04_flatness_estimator_fidelity(verdict):
    q = QuadraticFixture([1.0, 2.0, 3.0])
    loss = lambda m: m.loss()
    main = estimate_flatness(q, loss, PerturbationConfig(n_realizations=1000, seed=0)).trace_estimate
    rel = abs(main - 6.0) / 6.0
    rms = {}
    for n in (250, 1000):
        errs = [estimate_flatness(q, loss, PerturbationConfig(n_realizations=n, seed=s)).trace_estimate - 6.0 for s in range(1, 21)]
        rms[n] = float(np.sqrt(np.mean(np.square(errs))))
    ok = rel < 0.05 and rms[1000] < rms[250]
    assert verdict(4, ok, f"trace {main:.4f} (rel err {rel:.2%}); RMS error n=250 {rms[250]:.4f}, n=1000 {rms[1000]:.4f}")


# -- 5 and 6 ---------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk_runs():
    return flatness_trend(DeskSetup(), seeds=(0, 1, 2))


def test_c05_flatness_trend(verdict, desk_runs):
    rows = []
    wins = 0
    for dx, dn in desk_runs:
        t_dx, t_dn = dx.flatness.trace_estimate, dn.flatness.trace_estimate
        wins += int(t_dx < t_dn)
        rows.append(f"seed {dx.seed}: DxNet {t_dx:.4g} vs DenseNet {t_dn:.4g}")
    assert verdict(5, wins >= 2, f"DxNet flatter in {wins}/3 seeds ({'; '.join(rows)})")


def test_c06_denoising_gain(verdict, desk_runs):
    dx = desk_runs[0][0]
    assert verdict(6, dx.gain > 5.0, f"DxNet held-out PSNR {dx.noisy_psnr:.2f} -> {dx.denoised_psnr:.2f} dB, gain {dx.gain:.2f} dB")


# -- 7 ---------------------------------------------------------------------------


def test_c07_cam_exactness(verdict):
    rng = np.random.default_rng(707)
    worst = 0.0
    checks = 0
    for seed, cfg in enumerate([NetConfig(blocks=(2, 2), growth=4, num_classes=5), NetConfig(blocks=(1, 1, 1), growth=6, xunit=False),
                                NetConfig(blocks=(2,), growth=4, num_classes=3, gate="gaussian")]):
        m = build_model(cfg, seed)
        b = m.tensors["head.linear.bias"]
        b.data[:] = rng.normal(size=b.shape)
        for _ in range(4):
            img = rng.uniform(size=(3, 16, 16))
            for c in range(cfg.num_classes):
                res = cam(m, img, c)
                worst = max(worst, abs(res.residual) / max(abs(res.logit), 1e-12))
                checks += 1
    assert verdict(7, worst <= 1e-4, f"{checks} input/class pairs, worst relative residual {worst:.2e}")


# -- 8 ---------------------------------------------------------------------------


def test_c08_shape_contracts(verdict):
    rng = np.random.default_rng(808)
    failures = []
    trials = 0
    for i in range(12):
        task = ["classification", "denoising", "super_resolution"][i % 3]
        nb = tuple(int(n) for n in rng.integers(1, 4, size=int(rng.integers(1, 4))))
        k = int(rng.integers(2, 7))
        cfg = NetConfig(task=task, blocks=nb, growth=k, xunit=bool(rng.integers(2)),
                        gate=str(rng.choice(["sigmoid", "gaussian"])), num_classes=7, scale=4)
        m = build_model(cfg, i).eval()
        h, w = (int(v) for v in rng.integers(5, 13, size=2))
        x = rng.uniform(size=(2, cfg.channels, h, w))
        want = {"classification": (2, 7), "denoising": x.shape, "super_resolution": (2, 3, 4 * h, 4 * w)}[task]
        c = cfg.initial_channels
        for j, n in enumerate(nb):
            c += n * k
            if j < len(nb) - 1:
                c = int(cfg.reduction * c)
        got = predict(m, x).shape
        feats = m.features(x).shape[1]
        trials += 1
        if got != want or feats != c:
            failures.append((cfg, got, want, feats, c))
    # a single dense block of n layers adds exactly n*k channels
    for n, k in ((1, 3), (4, 5), (6, 2)):
        x = Variable(rng.normal(size=(1, 7, 5, 5)))
        p = LayerParams()
        with no_grad():
            for li in range(n):
                spec = DenseLayerSpec(7 + li * k, k)
                blocks.init_dense_layer(p, f"l{li}", spec, rng)
                x = blocks.dense_layer_forward(x, p, f"l{li}", spec)
        trials += 1
        if x.shape[1] != 7 + n * k:
            failures.append((n, k, x.shape))
    assert verdict(8, not failures, f"{trials} randomized contracts, failures {failures}")


# -- 9 ---------------------------------------------------------------------------


TINY = [
    "--set", "task=denoising", "--set", "blocks=1-1", "--set", "growth=4",
    "--set", "train.epochs=3", "--set", "train.batch_size=8",
    "--set", "data.synthetic=6", "--set", "data.image_size=24", "--set", "data.patch_size=12",
    "--set", "data.patches=32", "--set", "data.val_patches=8",
]


def test_c09_reproducibility(verdict, tmp_path):
    codes = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        codes.append(dispatch(["train", *TINY, "--seed", "9", "--outdir", str(out)]))
        codes.append(dispatch(["probe", "--checkpoint", str(out / "model.dxnt"), *TINY, "--sigmas", "auto",
                               "--n", "6", "--seed", "9", "--outdir", str(out / "probe")]))
    names = ("history.csv", "probe/flatness.csv", "probe/quadratic.csv")
    same = {n: (tmp_path / "run0" / n).read_bytes() == (tmp_path / "run1" / n).read_bytes() for n in names}
    ok = codes == [0] * 4 and all(same.values())
    assert verdict(9, ok, f"exit codes {codes}, identical {same}")


# -- 10 --------------------------------------------------------------------------


def test_c10_format_round_trips(verdict, tmp_path):
    rng = np.random.default_rng(1010)
    results = {}
    for i, cfg in enumerate([NetConfig(blocks=(2, 2), growth=4), NetConfig(task="denoising", blocks=(1, 2), growth=4, gate="gaussian"),
                             NetConfig(task="super_resolution", blocks=(1,), growth=4, scale=2)]):
        m = build_model(cfg, i)
        m.train()
        predict(m, rng.uniform(size=(2, cfg.channels, 8, 8)))
        save_checkpoint(m, tmp_path / f"m{i}.dxnt")
        back = load_checkpoint(tmp_path / f"m{i}.dxnt")
        save_checkpoint(back, tmp_path / f"b{i}.dxnt")
        same = back.config == cfg and all(back.tensors[n].data.tobytes() == v.data.tobytes() for n, v in m.tensors.items())
        same = same and all(back.params.bn[n].running_var.tobytes() == s.running_var.tobytes() for n, s in m.params.bn.items())
        results[f"checkpoint{i}"] = same and (tmp_path / f"m{i}.dxnt").read_bytes() == (tmp_path / f"b{i}.dxnt").read_bytes()
    for ch, suffix in ((1, "pgm"), (3, "ppm")):
        px = rng.integers(0, 256, size=(ch, 11, 7)) / 255.0
        write_pnm(tmp_path / f"a.{suffix}", px)
        back = read_pnm(tmp_path / f"a.{suffix}").pixels
        write_pnm(tmp_path / f"b.{suffix}", back)
        results[suffix] = (tmp_path / f"a.{suffix}").read_bytes() == (tmp_path / f"b.{suffix}").read_bytes() and np.allclose(back, px, atol=1e-7)
    raw = np.concatenate([rng.integers(0, 10, size=(9, 1)), rng.integers(0, 256, size=(9, 3072))], axis=1).astype(np.uint8).tobytes()
    (tmp_path / "c.bin").write_bytes(raw)
    encode_cifar10(load_cifar10(tmp_path / "c.bin"), tmp_path / "d.bin")
    results["cifar"] = (tmp_path / "d.bin").read_bytes() == raw
    assert verdict(10, all(results.values()), f"bit-exact {results}")
