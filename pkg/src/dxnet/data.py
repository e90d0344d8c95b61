"""Image codecs, CIFAR-10 binaries, degradations and augmentation.

Images are float arrays in [0, 1], channel-first: (C, H, W) for one image,
(N, C, H, W) for a batch.
"""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
MAX_PIXELS = 1 << 28


class DataError(ValueError):
    """Malformed dataset file or image."""


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: Optional[int] = None
    degraded: Optional[np.ndarray] = None


ArrayOrSample = Union[np.ndarray, ImageSample]


def _unwrap(x: ArrayOrSample) -> np.ndarray:
    return x.pixels if isinstance(x, ImageSample) else np.asarray(x)


def _rewrap(x: ArrayOrSample, pixels: np.ndarray) -> ArrayOrSample:
    return replace(x, pixels=pixels) if isinstance(x, ImageSample) else pixels


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` under a global ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


# -- CIFAR-10 ------------------------------------------------------------------


def load_cifar10(path) -> List[ImageSample]:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise DataError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0]
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: record {bad} has label {labels[bad]} > 9")
    pixels = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return [ImageSample(pixels[i], int(labels[i])) for i in range(len(recs))]


def encode_cifar10(samples: Sequence[ImageSample], path) -> None:
    out = bytearray()
    for s in samples:
        if s.label is None or not 0 <= s.label <= 9:
            raise DataError(f"CIFAR label must be in [0, 9], got {s.label}")
        if s.pixels.shape != (3, 32, 32):
            raise DataError(f"CIFAR images are (3, 32, 32), got {s.pixels.shape}")
        out.append(s.label)
        out += to_uint8(s.pixels).tobytes()
    Path(path).write_bytes(bytes(out))


def stack(samples: Sequence[ImageSample]) -> Tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.pixels for s in samples]).astype(np.float32)
    y = np.array([-1 if s.label is None else s.label for s in samples], dtype=np.int64)
    return x, y


def channel_stats(images: np.ndarray, cache: Optional[os.PathLike] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over a (N, C, H, W) set, cached as text if ``cache`` is given."""
    if cache is not None and Path(cache).exists():
        vals = np.loadtxt(cache, ndmin=2)
        return vals[0].astype(np.float32), vals[1].astype(np.float32)
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    if cache is not None:
        np.savetxt(cache, np.stack([mean, std]))
    return mean.astype(np.float32), std.astype(np.float32)


# -- PGM / PPM -----------------------------------------------------------------


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def _read_header(raw: bytes) -> Tuple[List[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise DataError("truncated PNM header")
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_pnm(path) -> ImageSample:
    raw = Path(path).read_bytes()
    tokens, offset = _read_header(raw)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise DataError(f"{path}: malformed header") from None
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    c = 1 if magic == b"P5" else 3
    if w < 1 or h < 1 or w * h * c > MAX_PIXELS:
        raise DataError(f"{path}: bad dimensions {w}x{h}")
    body = raw[offset : offset + w * h * c]
    if len(body) != w * h * c:
        raise DataError(f"{path}: raster truncated ({len(body)} of {w * h * c} bytes)")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return ImageSample(px.astype(np.float32) / 255.0)


def write_pnm(path, image: ArrayOrSample) -> None:
    """Write (1, H, W) as P5 or (3, H, W) as P6; values are clipped to [0, 1]."""
    x = _unwrap(image)
    if x.ndim == 2:
        x = x[None]
    c, h, w = x.shape
    if c not in (1, 3):
        raise DataError(f"PNM needs 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + to_uint8(x).transpose(1, 2, 0).tobytes())


def image_io(path, mode: str, image: Optional[ArrayOrSample] = None):
    if mode == "read":
        return read_pnm(path)
    if mode == "write":
        if image is None:
            raise ValueError("write mode needs an image")
        write_pnm(path, image)
        return None
    raise ValueError(f"unknown mode {mode!r}")


def load_image_folder(folder) -> List[ImageSample]:
    paths = sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not paths:
        raise DataError(f"no .pgm/.ppm images in {folder}")
    return [read_pnm(p) for p in paths]


# -- degradations ------------------------------------------------------------


def add_awgn(x: ArrayOrSample, sigma_255: float, rng: np.random.Generator) -> ArrayOrSample:
    """Additive white Gaussian noise with std ``sigma_255 / 255``; no clipping."""
    if sigma_255 < 0:
        raise ValueError("noise level must be non-negative")
    px = _unwrap(x)
    noisy = px + rng.normal(0.0, sigma_255 / 255.0, size=px.shape).astype(px.dtype)
    if isinstance(x, ImageSample):
        return replace(x, degraded=noisy)
    return noisy


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resize_matrix(n_in: int, scale) -> np.ndarray:
    """(n_out, n_in) matrix of one bicubic resampling pass along an axis."""
    return _resize_matrix(int(n_in), Fraction(scale).limit_denominator(1000)).copy()


@functools.lru_cache(maxsize=64)
def _resize_matrix(n_in: int, scale: Fraction) -> np.ndarray:
    n_out = int(round(n_in * scale))
    if n_out < 1:
        raise ValueError(f"resizing {n_in} pixels by {scale} leaves no output")
    s = float(scale)
    kscale = min(s, 1.0)
    support = 2.0 / kscale
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / s - 0.5
        taps = np.arange(int(np.floor(center - support)) + 1, int(np.ceil(center + support)))
        w = cubic_kernel((taps - center) * kscale)
        w /= w.sum()
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), w)
    return m


def bicubic_resize(x: ArrayOrSample, scale) -> ArrayOrSample:
    """Separable bicubic (a = -0.5) resize of the last two axes, antialiased when shrinking."""
    px = _unwrap(x)
    if Fraction(scale) == 1:
        return _rewrap(x, px.copy())
    mh = resize_matrix(px.shape[-2], scale)
    mw = resize_matrix(px.shape[-1], scale)
    out = np.matmul(np.matmul(mh, px), mw.T).astype(px.dtype)
    return _rewrap(x, out)


# -- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    normalize: Optional[Tuple[Sequence[float], Sequence[float]]] = None
    random_crop: bool = False
    crop_pad: int = 4
    horizontal_flip: bool = False
    flip_p: float = 0.5
    cutout: bool = False
    cutout_size: int = 16
    rotations_90: bool = False

    @classmethod
    def cifar(cls, mean, std) -> "AugmentPolicy":
        return cls(normalize=(tuple(mean), tuple(std)), random_crop=True, horizontal_flip=True, cutout=True)

    @classmethod
    def restoration(cls) -> "AugmentPolicy":
        return cls(horizontal_flip=True, rotations_90=True)


def cutout(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Zero a size x size square centred uniformly over the image, clipped at borders."""
    h, w = img.shape[-2:]
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    half = size // 2
    out = img.copy()
    out[..., max(cy - half, 0) : min(cy - half + size, h), max(cx - half, 0) : min(cx - half + size, w)] = 0.0
    return out


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator, companions=()) -> np.ndarray:
    """Apply the enabled transforms in declaration order.

    Arrays in ``companions`` (same shape as ``batch``) receive the same
    geometric transforms, for clean/degraded pairs. Returns ``batch`` alone
    when there are no companions, else a tuple.
    """
    x = np.array(batch, copy=True)
    comps = [np.array(c, copy=True) for c in companions]
    n, c, h, w = x.shape
    if policy.normalize is not None:
        mean, std = (np.asarray(v, dtype=x.dtype).reshape(1, -1, 1, 1) for v in policy.normalize)
        x = (x - mean) / std
    if policy.random_crop:
        p = policy.crop_pad
        pad = ((0, 0), (0, 0), (p, p), (p, p))
        xp = np.pad(x, pad)
        cps = [np.pad(a, pad) for a in comps]
        for i in range(n):
            dy, dx = rng.integers(0, 2 * p + 1, size=2)
            x[i] = xp[i, :, dy : dy + h, dx : dx + w]
            for a, ap in zip(comps, cps):
                a[i] = ap[i, :, dy : dy + h, dx : dx + w]
    if policy.horizontal_flip:
        flips = rng.random(n) < policy.flip_p
        x[flips] = x[flips][..., ::-1]
        for a in comps:
            a[flips] = a[flips][..., ::-1]
    if policy.cutout:
        for i in range(n):
            x[i] = cutout(x[i], policy.cutout_size, rng)
    if policy.rotations_90:
        if h != w:
            raise ValueError("90-degree rotations need square images")
        turns = rng.integers(0, 4, size=n)
        for i in range(n):
            x[i] = np.rot90(x[i], turns[i], axes=(1, 2))
            for a in comps:
                a[i] = np.rot90(a[i], turns[i], axes=(1, 2))
    return x if not comps else (x, *comps)


def extract_patches(
    images: Sequence[ArrayOrSample],
    patch_size: int,
    count: int,
    rng: np.random.Generator,
    companions: Optional[Sequence[Sequence[ArrayOrSample]]] = None,
):
    """Uniform random aligned crops; companion image lists are cropped identically."""
    imgs = [_unwrap(im) for im in images]
    comp_lists = [[_unwrap(im) for im in lst] for lst in (companions or [])]
    for im in imgs:
        if patch_size > im.shape[-2] or patch_size > im.shape[-1]:
            raise ValueError(f"patch {patch_size} larger than image {im.shape[-2:]}")
    out = np.empty((count, imgs[0].shape[0], patch_size, patch_size), dtype=imgs[0].dtype)
    comp_out = [np.empty_like(out) for _ in comp_lists]
    for n in range(count):
        k = int(rng.integers(len(imgs)))
        im = imgs[k]
        y = int(rng.integers(im.shape[-2] - patch_size + 1))
        x = int(rng.integers(im.shape[-1] - patch_size + 1))
        out[n] = im[:, y : y + patch_size, x : x + patch_size]
        for dst, lst in zip(comp_out, comp_lists):
            dst[n] = lst[k][:, y : y + patch_size, x : x + patch_size]
    return out if not comp_lists else (out, *comp_out)


# -- synthetic images ----------------------------------------------------------


def synthetic_images(count: int, size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-smooth test images: a gradient background plus random discs and boxes."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    out = np.empty((count, channels, size, size), dtype=np.float32)
    for n in range(count):
        for c in range(channels):
            gy, gx, off = rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.3, 0.7)
            img = off + gy * (yy - 0.5) + gx * (xx - 0.5)
            out[n, c] = img
        for _ in range(int(rng.integers(3, 7))):
            val = rng.uniform(0.0, 1.0, size=channels)
            cy, cx = rng.uniform(0, 1, size=2)
            r = rng.uniform(0.08, 0.3)
            if rng.random() < 0.5:
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            else:
                mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < 0.7 * r)
            out[n][:, mask] = val[:, None]
    return np.clip(out, 0.0, 1.0)
