"""Minima-flatness probing by random parameter perturbation, and class activation maps.

Around a minimum the mean loss under isotropic Gaussian perturbation of
strength sigma grows like ``L0 + 0.5 * trace(H) * sigma**2``. The slope of
mean loss against sigma squared therefore estimates the Hessian trace over
the perturbed coordinates.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from dxnet.autodiff import no_grad
from dxnet.model import Model
from dxnet.train import fmt


class FlatnessError(ValueError):
    pass


# -- perturbation targets --------------------------------------------------------


class QuadraticFixture:
    """``L(theta) = L0 + 0.5 (theta - theta0)^T diag(h) (theta - theta0)``.

    Exact oracle for the estimator: ``E[L] - L0 = 0.5 * sum(h) * sigma**2``.
    """

    def __init__(self, hessian_diag: Sequence[float], baseline: float = 1.0, theta0=None):
        self.h = np.asarray(hessian_diag, dtype=np.float64)
        self.baseline = float(baseline)
        self.theta0 = np.zeros_like(self.h) if theta0 is None else np.asarray(theta0, dtype=np.float64)
        self.theta = self.theta0.copy()

    @property
    def trace(self) -> float:
        return float(self.h.sum())

    def loss(self) -> float:
        d = self.theta - self.theta0
        return self.baseline + 0.5 * float(d @ (self.h * d))

    def perturbation_targets(self) -> Dict[str, np.ndarray]:
        return {"theta": self.theta}

    def with_targets(self, arrays: Dict[str, np.ndarray]) -> "QuadraticFixture":
        out = QuadraticFixture(self.h, self.baseline, self.theta0)
        out.theta = arrays["theta"]
        return out


def perturbation_targets(model) -> Dict[str, np.ndarray]:
    """Conv filters of a :class:`Model` (xUnit branch convs included)."""
    if isinstance(model, Model):
        return {n: v.data for n, v in model.params.tensors.items() if model.params.kinds[n] == "conv"}
    return model.perturbation_targets()


def _with_targets(model, arrays: Dict[str, np.ndarray]):
    if not isinstance(model, Model):
        return model.with_targets(arrays)
    from dxnet.autodiff import Variable
    from dxnet.blocks import LayerParams

    tensors = dict(model.params.tensors)
    for name, arr in arrays.items():
        v = Variable(arr, requires_grad=False, name=name)
        tensors[name] = v
    params = LayerParams(tensors, model.params.kinds, model.params.bn, model.params.dtype)
    return Model(model.config, params, model.layers, model.mode, model.rng)


def perturb_parameters(model, sigma_theta: float, rng: np.random.Generator):
    """Copy of ``model`` with N(0, sigma^2) noise added to every target scalar.

    Non-target parameters are shared with the original, which is never modified.
    """
    if sigma_theta < 0:
        raise ValueError("sigma_theta must be non-negative")
    targets = perturbation_targets(model)
    if not targets:
        raise FlatnessError("model has no perturbable parameters")
    new = {}
    for name, arr in targets.items():
        noise = rng.normal(0.0, sigma_theta, size=arr.shape)
        new[name] = (arr + noise).astype(arr.dtype)
    return _with_targets(model, new)


# -- estimator ------------------------------------------------------------------


@dataclass
class PerturbationConfig:
    sigma_grid: Optional[Sequence[float]] = None  # None: bracket automatically
    n_realizations: int = 1000
    seed: int = 0
    auto_points: int = 8
    workers: int = 1

    def __post_init__(self):
        if self.n_realizations < 2:
            raise ValueError("need at least two realizations per sigma")
        if self.sigma_grid is not None:
            g = list(self.sigma_grid)
            if any(s < 0 for s in g) or g != sorted(g):
                raise ValueError("sigma grid must be non-negative and ascending")
            if not g or g[0] != 0.0:
                g = [0.0] + g
            self.sigma_grid = g


@dataclass
class FlatnessReport:
    sigma_grid: List[float]
    mean_loss: List[float]
    std_err: List[float]
    n_used: List[int]
    baseline: float
    slope: float
    trace_estimate: float
    n_params: int
    mean_eigenvalue: float
    excluded: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for key in ("baseline", "slope", "trace_estimate", "n_params", "mean_eigenvalue", "excluded"):
                fh.write(f"# {key},{fmt(getattr(self, key))}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sigma", "sigma_sq", "mean_loss", "std_err", "n_used", "fitted"])
            for s, m, e, n in zip(self.sigma_grid, self.mean_loss, self.std_err, self.n_used):
                fitted = self.baseline + self.slope * s * s
                w.writerow([fmt(s), fmt(s * s), fmt(m), fmt(e), n, fmt(fitted)])


def _realization_loss(model, loss_eval, sigma, seed, key):
    rng = np.random.default_rng([seed, *key])
    return float(loss_eval(perturb_parameters(model, sigma, rng)))


def _mean_losses(model, loss_eval, sigma, seed, sigma_index, n, workers):
    keys = [(sigma_index, r) for r in range(n)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            vals = list(pool.map(lambda k: _realization_loss(model, loss_eval, sigma, seed, k), keys))
    else:
        vals = [_realization_loss(model, loss_eval, sigma, seed, k) for k in keys]
    return np.array(vals)


def auto_sigma_grid(model, loss_eval, baseline: float, seed: int = 0, points: int = 8, pre_n: int = 8) -> List[float]:
    """Log-spaced grid where the mean loss rises by 1% to 100% of the baseline.

    Brackets with a short doubling/halving search of ``pre_n`` realizations.
    """
    if baseline <= 0:
        raise FlatnessError("automatic sigma grid needs a positive baseline loss")
    step = [0]

    def rise(sigma):
        step[0] += 1
        vals = _mean_losses(model, loss_eval, sigma, seed, 10**6 + step[0], pre_n, 1)
        vals = vals[np.isfinite(vals)]
        return (vals.mean() if vals.size else math.inf) - baseline

    hi = 1e-4
    while rise(hi) < baseline:
        hi *= 2.0
        if hi > 1e4:
            raise FlatnessError("loss never rose by 100% of baseline while bracketing")
    lo = hi
    while rise(lo) > 0.01 * baseline:
        lo /= 2.0
        if lo < 1e-12:
            break
    return [0.0] + [float(s) for s in np.geomspace(lo, hi, points)]


def fit_slope(sigma_grid: Sequence[float], mean_loss: Sequence[float], baseline: float) -> float:
    """Least-squares slope of ``mean_loss - baseline`` against sigma^2, intercept pinned."""
    s2 = np.asarray(sigma_grid, dtype=np.float64) ** 2
    y = np.asarray(mean_loss, dtype=np.float64) - baseline
    if len(s2) < 2 or not np.any(s2 > 0):
        raise FlatnessError("slope fit needs at least two grid points, one with sigma > 0")
    return float((s2 * y).sum() / (s2 * s2).sum())


def estimate_flatness(model, loss_eval: Callable, cfg: PerturbationConfig) -> FlatnessReport:
    """Perturb-and-fit Hessian trace estimate.

    ``loss_eval(model) -> float`` must be deterministic (fixed data, eval mode).
    """
    baseline = float(loss_eval(model))
    check = _realization_loss(model, loss_eval, 0.0, cfg.seed, (0, 0))
    if check != baseline:
        raise FlatnessError(f"loss_eval is not deterministic: {check!r} != {baseline!r} at sigma 0")
    grid = cfg.sigma_grid
    if grid is None:
        grid = auto_sigma_grid(model, loss_eval, baseline, cfg.seed, cfg.auto_points)
    if len(grid) < 2:
        raise FlatnessError("sigma grid needs at least two points, including 0")
    n_params = int(sum(a.size for a in perturbation_targets(model).values()))
    means, errs, used = [], [], []
    excluded = 0
    for i, sigma in enumerate(grid):
        if sigma == 0.0:
            means.append(baseline)
            errs.append(0.0)
            used.append(cfg.n_realizations)
            continue
        vals = _mean_losses(model, loss_eval, sigma, cfg.seed, i, cfg.n_realizations, cfg.workers)
        ok = np.isfinite(vals)
        bad = int((~ok).sum())
        if bad > 0.1 * len(vals):
            raise FlatnessError(f"{bad} of {len(vals)} realizations non-finite at sigma={sigma:g}")
        excluded += bad
        vals = vals[ok]
        means.append(float(vals.mean()))
        errs.append(float(vals.std(ddof=1) / math.sqrt(len(vals))))
        used.append(int(len(vals)))
    slope = fit_slope(grid, means, baseline)
    trace = 2.0 * slope
    return FlatnessReport(
        sigma_grid=[float(s) for s in grid],
        mean_loss=means,
        std_err=errs,
        n_used=used,
        baseline=baseline,
        slope=slope,
        trace_estimate=trace,
        n_params=n_params,
        mean_eigenvalue=trace / n_params,
        excluded=excluded,
    )


def quadratic_profile(report: FlatnessReport, t_max: float = 1.0, points: int = 101):
    """Samples of ``L0 + 0.5 * mean_eigenvalue * t**2`` on [-t_max, t_max]."""
    t = np.linspace(-t_max, t_max, points)
    return t, report.baseline + 0.5 * report.mean_eigenvalue * t * t


def write_profile_csv(path, t: np.ndarray, q: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "loss"])
        for a, b in zip(t, q):
            w.writerow([fmt(a), fmt(b)])


# -- class activation maps -------------------------------------------------------


@dataclass
class CamResult:
    class_index: int
    map: np.ndarray
    overlay: np.ndarray
    logit: float
    residual: float


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation, edges clamped."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def cam(model: Model, image: np.ndarray, class_index: int) -> CamResult:
    cfg = model.config
    if cfg.task != "classification" or "head.linear.weight" not in model.params.tensors:
        raise ValueError("CAM needs a classifier ending in global average pooling and a linear layer")
    x = np.asarray(image, dtype=model.params.dtype)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("CAM takes a single image")
    w = model.params.tensors["head.linear.weight"].data
    b = model.params.tensors["head.linear.bias"].data
    if not 0 <= class_index < w.shape[0]:
        raise ValueError(f"class index {class_index} out of range")
    prev = model.mode
    model.eval()
    try:
        with no_grad():
            feats = model.features(x).data[0]
            logits = model.forward(x).data[0]
    finally:
        model.set_mode(prev)
    cmap = np.tensordot(w[class_index], feats, axes=([0], [0]))
    logit = float(logits[class_index])
    residual = float(cmap.mean() + b[class_index] - logit)
    up = bilinear_matrix(cmap.shape[0], x.shape[2]) @ cmap @ bilinear_matrix(cmap.shape[1], x.shape[3]).T
    span = up.max() - up.min()
    overlay = (up - up.min()) / span if span > 0 else np.zeros_like(up)
    return CamResult(class_index, cmap, overlay, logit, residual)


def overlay_rgb(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a [0,1] heat map (blue to red) over an image; returns (3, H, W)."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    colour = np.stack([heat, 1.0 - np.abs(2.0 * heat - 1.0), 1.0 - heat])
    return (1 - alpha) * img + alpha * colour
