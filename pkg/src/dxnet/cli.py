"""Command-line entry point: ``dxnet <verb> [options]``.

Verbs: train, eval, count, probe, cam, denoise, sr-infer. Every run writes
``manifest.txt`` (resolved config, seed, argv, versions) to its output
directory. Exit codes: 0 ok, 2 usage, 3 config error, 4 data error,
5 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from dxnet import __version__
from dxnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dxnet.data import (
    AugmentPolicy,
    DataError,
    bicubic_resize,
    extract_patches,
    load_cifar10,
    load_image_folder,
    read_pnm,
    stack,
    synthetic_images,
    write_pnm,
)
from dxnet.model import ConfigError, NetConfig, build_model, count_table, denoise, param_count, parse_kv, predict
from dxnet.probe import (
    PerturbationConfig,
    QuadraticFixture,
    cam,
    estimate_flatness,
    overlay_rgb,
    quadratic_profile,
    write_profile_csv,
)
from dxnet.train import ArrayDataset, DivergenceError, History, TrainRunConfig, dataset_loss, evaluate, psnr, recipe, train

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4, 5
VERBS = ("train", "eval", "count", "probe", "cam", "denoise", "sr-infer")
TASK_RECIPE = {"classification": "cifar", "denoising": "denoising", "super_resolution": "sr"}

log = logging.getLogger("dxnet")


@dataclass
class DataOptions:
    synthetic: int = 0
    image_size: int = 64
    patch_size: int = 40
    patches: int = 256
    val_patches: int = 64
    sigma: float = 50.0
    noise_per_batch: bool = True


def _coerce(template, raw: str):
    if isinstance(template, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        return tuple(float(p) for p in raw.replace(",", "-").split("-") if p)
    return raw


def _apply(obj_cls, base, values: dict):
    names = {f.name for f in fields(obj_cls)}
    out = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} for {obj_cls.__name__}")
        try:
            out[key] = _coerce(getattr(base, key), raw) if isinstance(raw, str) else raw
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for {key}") from None
    return out


def resolve_config(path: Optional[str], overrides: List[str]):
    """Merge the config file with ``--set key=value`` overrides (last wins).

    Bare or ``net.``-prefixed keys configure the network; ``train.`` and
    ``data.`` prefixes configure the run and the data.
    """
    values = parse_kv(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    net, run, data = {}, {}, {}
    for key, v in values.items():
        if key.startswith("train."):
            run[key[6:]] = v
        elif key.startswith("data."):
            data[key[5:]] = v
        else:
            net[key[4:] if key.startswith("net.") else key] = v
    cfg = NetConfig.from_dict(net)
    base_run = recipe(TASK_RECIPE[cfg.task])
    run_cfg = TrainRunConfig(**{**{f.name: getattr(base_run, f.name) for f in fields(TrainRunConfig)},
                                **_apply(TrainRunConfig, base_run, run)})
    data_opts = DataOptions(**_apply(DataOptions, DataOptions(), data))
    return cfg, run_cfg, data_opts


def write_manifest(out_dir: Path, verb: str, argv: List[str], seed: int, cfg=None, run=None, data=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"verb = {verb}",
        f"argv = {json.dumps(argv)}",
        f"seed = {seed}",
        f"version.dxnet = {__version__}",
        f"version.numpy = {np.__version__}",
        f"version.python = {platform.python_version()}",
    ]
    if cfg is not None:
        lines += [f"net.{line}" for line in cfg.to_text().splitlines()]
    for prefix, obj in (("train", run), ("data", data)):
        if obj is not None:
            for f in fields(obj):
                if f.name != "augment":
                    lines.append(f"{prefix}.{f.name} = {getattr(obj, f.name)}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest_argv(path) -> List[str]:
    return json.loads(parse_kv(Path(path).read_text())["argv"])


# -- datasets -------------------------------------------------------------------


def _restoration_images(args, opts: DataOptions, cfg: NetConfig, split: str, rng) -> np.ndarray:
    if opts.synthetic:
        count = opts.synthetic if split == "train" else max(2, opts.synthetic // 4)
        return list(synthetic_images(count, opts.image_size, cfg.channels, rng))
    if not args.data:
        raise DataError("need --data DIR or data.synthetic=N")
    imgs = [s.pixels for s in load_image_folder(Path(args.data) / split)]
    for im in imgs:
        if im.shape[0] != cfg.channels:
            raise DataError(f"expected {cfg.channels}-channel images in {args.data}/{split}")
    return imgs


def build_dataset(args, cfg: NetConfig, opts: DataOptions, split: str, seed: int) -> ArrayDataset:
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    if cfg.task == "classification":
        if opts.synthetic:
            n = opts.synthetic if split == "train" else max(cfg.num_classes, opts.synthetic // 4)
            y = rng.integers(0, cfg.num_classes, size=n)
            base = rng.uniform(0.2, 0.8, size=(cfg.num_classes, cfg.channels))
            x = base[y][:, :, None, None] + 0.1 * rng.normal(size=(n, cfg.channels, 32, 32))
            return ArrayDataset(x.astype(np.float32), y.astype(np.int64))
        if not args.data:
            raise DataError("need --data DIR or data.synthetic=N")
        root = Path(args.data)
        files = sorted(root.glob("data_batch_*.bin")) if split == "train" else [root / "test_batch.bin"]
        if not files or not all(f.exists() for f in files):
            raise DataError(f"no CIFAR-10 {split} batches under {root}")
        x, y = stack([s for f in files for s in load_cifar10(f)])
        return ArrayDataset(x, y)
    imgs = _restoration_images(args, opts, cfg, split, rng)
    count = opts.patches if split == "train" else opts.val_patches
    if cfg.task == "denoising":
        clean = extract_patches(imgs, opts.patch_size, count, rng)
        noisy = clean + rng.normal(0.0, opts.sigma / 255.0, size=clean.shape).astype(np.float32)
        sigma = opts.sigma if (split == "train" and opts.noise_per_batch) else None
        return ArrayDataset(noisy, clean, sigma)
    hr = extract_patches(imgs, opts.patch_size, count, rng)
    lr = bicubic_resize(hr, 1 / cfg.scale).astype(np.float32)
    return ArrayDataset(lr, hr)


# -- verbs ----------------------------------------------------------------------


def cmd_count(args, argv) -> int:
    cfg, _, _ = resolve_config(args.config, args.set)
    rows = count_table(cfg, args.mode)
    width = max(len(r[0]) for r in rows)
    for name, n in rows:
        print(f"{name:<{width}}  {n:>10d}")
    total = param_count(cfg, args.mode)
    print(f"{'total':<{width}}  {total:>10d}  ({total / 1e6:.3f}M)")
    write_manifest(Path(args.outdir), "count", argv, args.seed, cfg)
    return EXIT_OK


def cmd_train(args, argv) -> int:
    cfg, run, opts = resolve_config(args.config, args.set)
    run.seed = args.seed
    if cfg.task == "classification" and not opts.synthetic:
        x_tr = build_dataset(args, cfg, opts, "train", args.seed)
        from dxnet.data import channel_stats

        mean, std = channel_stats(x_tr.inputs, Path(args.data) / "channel_stats.txt")
        run.augment = AugmentPolicy.cifar(mean, std)
    elif cfg.task != "classification":
        run.augment = AugmentPolicy.restoration()
    out = Path(args.outdir)
    write_manifest(out, "train", argv, args.seed, cfg, run, opts)
    train_set = build_dataset(args, cfg, opts, "train", args.seed)
    val_set = build_dataset(args, cfg, opts, "val", args.seed)
    model = build_model(cfg, np.random.default_rng(args.seed))
    history = train(model, train_set, run, val=val_set, out_dir=out)
    history.to_csv(out / "history.csv")
    save_checkpoint(model, out / "model.dxnt")
    print(f"final train loss {history.rows[-1]['train_loss']:.6g}, val metric {history.rows[-1]['val_metric']:.4f}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    _, _, opts = resolve_config(None, [f"{k}={v}" for k, v in _net_kv(cfg)] + args.set)
    write_manifest(Path(args.outdir), "eval", argv, args.seed, cfg, None, opts)
    metric = evaluate(model, build_dataset(args, cfg, opts, "val", args.seed))
    unit = "% error" if cfg.task == "classification" else " dB"
    print(f"{metric:.4f}{unit}")
    return EXIT_OK


def _net_kv(cfg: NetConfig):
    return list(parse_kv(cfg.to_text()).items())


def cmd_probe(args, argv) -> int:
    out = Path(args.outdir)
    sigmas = None if args.sigmas == "auto" else [float(s) for s in args.sigmas.split(",")]
    pcfg = PerturbationConfig(sigmas, args.n, args.seed, workers=args.threads)
    if args.fixture:
        kind, _, spec = args.fixture.partition(":")
        if kind != "quadratic":
            raise ConfigError(f"unknown fixture {args.fixture!r}")
        diag = [float(v) for v in (spec or "1,2,3").split(",")]
        target = QuadraticFixture(diag)
        loss_eval = lambda m: m.loss()  # noqa: E731
        write_manifest(out, "probe", argv, args.seed)
    elif args.checkpoint:
        target = load_checkpoint(args.checkpoint)
        cfg = target.config
        _, run, opts = resolve_config(None, [f"{k}={v}" for k, v in _net_kv(cfg)] + args.set)
        opts.noise_per_batch = False
        data = build_dataset(args, cfg, opts, "train", args.seed)
        loss_eval = lambda m: dataset_loss(m, data, run.loss)  # noqa: E731
        write_manifest(out, "probe", argv, args.seed, cfg, None, opts)
    else:
        raise ConfigError("probe needs --checkpoint or --fixture")
    report = estimate_flatness(target, loss_eval, pcfg)
    report.to_csv(out / "flatness.csv")
    t, q = quadratic_profile(report)
    write_profile_csv(out / "quadratic.csv", t, q)
    print(f"trace estimate {report.trace_estimate:.6g}, mean eigenvalue {report.mean_eigenvalue:.6g} over {report.n_params} parameters")
    return EXIT_OK


def cmd_cam(args, argv) -> int:
    model = load_checkpoint(args.checkpoint)
    img = read_pnm(args.inp).pixels
    out = Path(args.outdir)
    write_manifest(out, "cam", argv, args.seed, model.config)
    cls = args.cls
    if cls is None:
        cls = int(predict(model, img[None]).argmax())
    res = cam(model, img, cls)
    write_pnm(out / "cam.ppm", overlay_rgb(img, res.overlay))
    np.savetxt(out / "cam.csv", res.map, delimiter=",", fmt="%.10g")
    print(f"class {cls}: logit {res.logit:.6g}, map-mean identity residual {res.residual:.3g}")
    return EXIT_OK


def _restore_file(args, argv, verb: str, task: str) -> int:
    model = load_checkpoint(args.checkpoint)
    if model.config.task != task:
        raise ConfigError(f"{verb} needs a {task} checkpoint, got {model.config.task}")
    src = read_pnm(args.inp).pixels
    outdir = Path(args.outdir) if args.outdir else Path(args.out).resolve().parent
    write_manifest(outdir, verb, argv, args.seed, model.config)
    if task == "denoising":
        result = denoise(model, src[None])[0]
    else:
        result = predict(model, src[None])[0]
    write_pnm(args.out, result)
    if args.ref:
        ref = read_pnm(args.ref).pixels
        sr = task == "super_resolution"
        print(f"PSNR {psnr(np.clip(result, 0, 1), ref, border_crop=4 if sr else 0, luma_only=sr):.4f} dB")
    return EXIT_OK


def cmd_denoise(args, argv) -> int:
    return _restore_file(args, argv, "denoise", "denoising")


def cmd_sr(args, argv) -> int:
    return _restore_file(args, argv, "sr-infer", "super_resolution")


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dxnet", description="Dense xUnit network toolkit")
    sub = p.add_subparsers(dest="verb", required=True, metavar="verb")

    def common(sp, outdir_default="dxnet_out"):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--outdir", default=outdir_default)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--data", help="dataset root")

    sp = sub.add_parser("count", help="parameter table")
    common(sp)
    sp.add_argument("--mode", choices=("full", "paper_formula"), default="full")
    sp.set_defaults(func=cmd_count)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("probe", help="minima flatness estimate")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--fixture", help="quadratic:h1,h2,...")
    sp.add_argument("--sigmas", default="auto")
    sp.add_argument("--n", type=int, default=1000)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("cam", help="class activation map")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--class", dest="cls", type=int)
    sp.set_defaults(func=cmd_cam)

    for verb, func, about in (("denoise", cmd_denoise, "denoise a PGM/PPM image"),
                              ("sr-infer", cmd_sr, "upscale a PGM/PPM image")):
        sp = sub.add_parser(verb, help=about)
        common(sp, outdir_default=None)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--in", dest="inp", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--ref", help="clean reference; prints PSNR")
        sp.set_defaults(func=func)
    return p


def dispatch(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args, argv)
    except (ConfigError, CheckpointError) as exc:
        code = EXIT_DATA if isinstance(exc, CheckpointError) else EXIT_CONFIG
        print(f"dxnet {args.verb}: {exc}", file=sys.stderr)
        return code
    except (DataError, FileNotFoundError) as exc:
        print(f"dxnet {args.verb}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"dxnet {args.verb}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    sys.exit(dispatch())
