"""Image I/O, degradation, patch sampling and Y-channel PSNR/SSIM.

Images are ``H x W x 3`` float arrays in ``[0, 1]``; the model side works on
``B x 3 x H x W`` and :func:`to_batch` / :func:`from_batch` convert.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .errors import ArgError, DataError, ShapeError

IMAGE_SUFFIXES = (".png", ".ppm", ".bmp")


# ---------------------------------------------------------------- I/O

def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def save_image(img: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, as writing and re-reading a PNG would."""
    return to_uint8(img).astype(np.float32) / 255.0


def to_batch(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1)[None])


def from_batch(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[0].transpose(1, 2, 0))


# ---------------------------------------------------------------- bicubic

def _cubic(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax ** 2, ax ** 3
    return ((1.5 * ax3 - 2.5 * ax2 + 1) * (ax <= 1)
            + (-0.5 * ax3 + 2.5 * ax2 - 4 * ax + 2) * ((ax > 1) & (ax <= 2)))


def resize_weights(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """Dense ``n_out x n_in`` interpolation matrix, Matlab ``imresize`` style.

    Borders are handled by symmetric reflection of the source indices.
    """
    scale = n_out / n_in
    width = 4.0
    kernel = _cubic
    if scale < 1 and antialias:
        width /= scale
        kernel = lambda t: scale * _cubic(scale * t)  # noqa: E731
    u = np.arange(1, n_out + 1) / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(n_in), np.arange(n_in)[::-1]])
    src = mirror[(idx.astype(np.int64) - 1) % (2 * n_in)]
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), src.reshape(-1)), w.reshape(-1))
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Resize an ``H x W [x C]`` image with the a=-0.5 cubic kernel."""
    if out_h < 1 or out_w < 1:
        raise ArgError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    rows = resize_weights(h, out_h, antialias)
    cols = resize_weights(w, out_w, antialias)
    out = np.einsum("oh,hw...->ow...", rows, img)
    return np.einsum("pw,ow...->op...", cols, out)


# ---------------------------------------------------------------- metrics

def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma of an RGB image in ``[0, 1]``."""
    img = np.asarray(img, dtype=np.float64)
    return (16.0 + img[..., 0] * 65.481 + img[..., 1] * 128.553 + img[..., 2] * 24.966) / 255.0


def _prep_y(a, b, shave):
    ya = rgb_to_y(a) if np.ndim(a) == 3 else np.asarray(a, dtype=np.float64)
    yb = rgb_to_y(b) if np.ndim(b) == 3 else np.asarray(b, dtype=np.float64)
    if shave:
        ya, yb = ya[shave:-shave, shave:-shave], yb[shave:-shave, shave:-shave]
    if ya.shape != yb.shape:
        raise ShapeError(f"image sizes differ after shave: {ya.shape} vs {yb.shape}")
    if ya.size == 0:
        raise ArgError("nothing left after shaving the border")
    return ya, yb


def psnr_y(a: np.ndarray, b: np.ndarray, shave: int = 0) -> float:
    ya, yb = _prep_y(a, b, shave)
    mse = float(np.mean((ya - yb) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


SSIM_WIN = 11
SSIM_SIGMA = 1.5


def ssim_y(a: np.ndarray, b: np.ndarray, shave: int = 0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, data range 1."""
    ya, yb = _prep_y(a, b, shave)
    if min(ya.shape) < SSIM_WIN:
        raise ArgError(f"image {ya.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    r = SSIM_WIN // 2

    def filt(x):
        return gaussian_filter(x, SSIM_SIGMA, truncate=r / SSIM_SIGMA)[r:-r, r:-r]

    mu_a, mu_b = filt(ya), filt(yb)
    var_a = filt(ya * ya) - mu_a ** 2
    var_b = filt(yb * yb) - mu_b ** 2
    cov = filt(ya * yb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------- pairs and patches

@dataclass
class SrPair:
    hr: np.ndarray
    lr: np.ndarray
    scale: int
    name: str = ""


def mod_crop(img: np.ndarray, r: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % r, : w - w % r]


def degrade(hr: np.ndarray, r: int) -> np.ndarray:
    h, w = hr.shape[:2]
    return quantize(bicubic_resize(hr, h // r, w // r))


def make_pair(hr: np.ndarray, r: int, lr: np.ndarray | None = None, name: str = "") -> SrPair:
    hr = mod_crop(hr, r)
    if lr is None:
        lr = degrade(hr, r)
    elif lr.shape[0] * r != hr.shape[0] or lr.shape[1] * r != hr.shape[1]:
        raise ShapeError(f"{name}: LR {lr.shape[:2]} does not match HR {hr.shape[:2]} at x{r}")
    return SrPair(hr.astype(np.float32), lr.astype(np.float32), r, name)


def crop_pair(pair: SrPair, y: int, x: int, patch: int) -> tuple[np.ndarray, np.ndarray]:
    r = pair.scale
    lr = pair.lr[y:y + patch, x:x + patch]
    hr = pair.hr[y * r:(y + patch) * r, x * r:(x + patch) * r]
    return lr, hr


def augment(img: np.ndarray, hflip: bool, rot: int) -> np.ndarray:
    if hflip:
        img = img[:, ::-1]
    return np.rot90(img, rot, axes=(0, 1))


def sample_patches(pairs: SrPair | Sequence[SrPair], patch: int, count: int, rng: np.random.Generator,
                   augment_data: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` aligned patch pairs as ``B x 3 x p x p`` / ``B x 3 x pr x pr``."""
    if isinstance(pairs, SrPair):
        pairs = [pairs]
    if not pairs:
        raise DataError("no image pairs to sample from")
    lrs, hrs = [], []
    for _ in range(count):
        pair = pairs[int(rng.integers(len(pairs)))]
        h, w = pair.lr.shape[:2]
        if h < patch or w < patch:
            raise ArgError(f"{pair.name or 'image'} LR size {h}x{w} is smaller than patch {patch}")
        y = int(rng.integers(h - patch + 1))
        x = int(rng.integers(w - patch + 1))
        lr, hr = crop_pair(pair, y, x, patch)
        if augment_data:
            flip, rot = bool(rng.integers(2)), int(rng.integers(4))
            lr, hr = augment(lr, flip, rot), augment(hr, flip, rot)
        lrs.append(lr.transpose(2, 0, 1))
        hrs.append(hr.transpose(2, 0, 1))
    return np.ascontiguousarray(np.stack(lrs)), np.ascontiguousarray(np.stack(hrs))


# ---------------------------------------------------------------- datasets

def _images(folder: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _lr_stem(stem: str, r: int) -> str:
    suffix = f"x{r}"
    return stem[: -len(suffix)] if stem.endswith(suffix) else stem


def load_dataset(root, r: int) -> list[SrPair]:
    """Load ``root/HR`` (or image files directly under ``root``) as SR pairs.

    When ``root/LR_x{r}`` exists its images are paired with HR by file stem
    (a trailing ``x{r}`` on the LR stem is ignored); otherwise LR is
    synthesized by bicubic degradation.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    hr_dir = root / "HR" if (root / "HR").is_dir() else root
    hr_files = _images(hr_dir)
    if not hr_files:
        raise DataError(f"no images in {hr_dir}")
    lr_dir = root / f"LR_x{r}"
    lr_files = {_lr_stem(k, r): v for k, v in _images(lr_dir).items()} if lr_dir.is_dir() else {}
    pairs = []
    for stem, path in hr_files.items():
        lr = None
        if lr_files:
            if stem not in lr_files:
                raise DataError(f"no LR image for {stem} in {lr_dir}")
            lr = load_image(lr_files[stem])
        pairs.append(make_pair(load_image(path), r, lr, stem))
    return pairs


# ---------------------------------------------------------------- evaluation

@dataclass
class ImageScore:
    name: str
    psnr: float
    ssim: float


def max_workers() -> int:
    raw = os.environ.get("ESRT_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(n, 1)


def evaluate(pairs: Sequence[SrPair], predict: Callable[[SrPair], np.ndarray], shave: int,
             workers: int | None = None) -> list[ImageScore]:
    """Score ``predict(pair)`` against each HR image on Y with a border shave."""
    if not pairs:
        raise DataError("empty dataset")

    def one(pair):
        sr = quantize(predict(pair))
        return ImageScore(pair.name, psnr_y(sr, pair.hr, shave), ssim_y(sr, pair.hr, shave))

    workers = workers or max_workers()
    if workers == 1:
        return [one(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, pairs))


def bicubic_predict(pair: SrPair) -> np.ndarray:
    h, w = pair.lr.shape[:2]
    return bicubic_resize(pair.lr, h * pair.scale, w * pair.scale)


def identity_predict(pair: SrPair) -> np.ndarray:
    return pair.hr
