"""Image ingestion, preprocessing, splits and the AWGN degradation.

Images live in [0, 1] as float tensors of shape (batch, channels, H, W).
Noise levels are always given on the 8-bit scale and divided by 255 here,
in :func:`add_awgn`, and nowhere else.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
ARRAY_FILE = "images.npy"
PIXEL_SCALE = 255.0
EXPERIMENT_SIGMAS = (25, 50, 75)


class DataError(RuntimeError):
    """Missing dataset or an infeasible split request."""


@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")

    @property
    def std(self) -> float:
        """Standard deviation in [0, 1] pixel units."""
        return self.sigma / PIXEL_SCALE


@dataclass(frozen=True)
class DatasetSpec:
    root: str
    image_size: int
    split_rule: str = "random"  # "random" or "range"
    n_train: int = 0
    n_test: int = 0
    test_start: int = 0
    seed: int = 0
    n_available: int | None = None


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return g


def add_awgn(x: torch.Tensor, model: NoiseModel, generator: torch.Generator | None = None):
    """Return ``x + n`` with n ~ N(0, (sigma/255)^2) i.i.d.; never clamped."""
    if model.sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {model.sigma}")
    if model.sigma == 0:
        return x.clone()
    g = generator if generator is not None else _generator(model.seed)
    noise = torch.randn(x.shape, generator=g, dtype=x.dtype)
    return x + model.std * noise


def center_crop_resize(img, target: int, interpolation: str = "bilinear"):
    """Center-crop to a square on the smaller side, then resize to ``target``.

    Accepts a numpy array or tensor shaped (H, W) or (C, H, W) and returns the
    same kind of object.
    """
    is_numpy = isinstance(img, np.ndarray)
    t = torch.as_tensor(img)
    squeeze = t.ndim == 2
    if squeeze:
        t = t[None]
    _, h, w = t.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    t = t[:, top:top + side, left:left + side]
    if side != target:
        dtype = t.dtype
        kwargs = {} if interpolation == "nearest" else {"align_corners": False}
        t = F.interpolate(t[None].double(), size=(target, target), mode=interpolation, **kwargs)[0]
        t = t.to(dtype) if dtype.is_floating_point else t.round().to(dtype)
    if squeeze:
        t = t[0]
    return t.numpy() if is_numpy else t


def random_hflip(x: torch.Tensor, p: float, seed: int | None = None,
                 generator: torch.Generator | None = None):
    """Mirror each image left-right independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must lie in [0, 1], got {p}")
    g = generator if generator is not None else _generator(seed or 0)
    flip = torch.rand(x.shape[0], generator=g) < p
    out = x.clone()
    out[flip] = out[flip].flip(-1)
    return out


def count_images(root) -> int:
    root = Path(root)
    if (root / ARRAY_FILE).is_file():
        return int(np.load(root / ARRAY_FILE, mmap_mode="r").shape[0])
    return len(list_image_files(root))


def list_image_files(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def make_splits(spec: DatasetSpec) -> tuple[list[int], list[int]]:
    """Disjoint (train, test) index lists.

    ``range`` takes test = [test_start, test_start + n_test) and trains on the
    rest (or on the first ``n_train`` of the rest); ``random`` draws
    non-overlapping subsets with the spec's seed.
    """
    n = spec.n_available if spec.n_available is not None else count_images(spec.root)
    if spec.split_rule == "range":
        stop = spec.test_start + spec.n_test
        if spec.n_test <= 0 or stop > n:
            raise DataError(f"test range [{spec.test_start}, {stop}) does not fit in {n} images")
        test = list(range(spec.test_start, stop))
        train = [i for i in range(n) if not spec.test_start <= i < stop]
        if spec.n_train:
            if spec.n_train > len(train):
                raise DataError(f"requested {spec.n_train} training images, only {len(train)} left")
            train = train[:spec.n_train]
        return train, test
    if spec.split_rule == "random":
        if spec.n_train + spec.n_test > n:
            raise DataError(
                f"requested {spec.n_train} train + {spec.n_test} test images, only {n} available")
        perm = np.random.default_rng(spec.seed).permutation(n)
        test = sorted(perm[:spec.n_test].tolist())
        train = sorted(perm[spec.n_test:spec.n_test + spec.n_train].tolist())
        return train, test
    raise DataError(f"unknown split rule {spec.split_rule!r}")


FFHQ_SPLIT = dict(split_rule="range", test_start=3000, n_test=2000)


def write_index_list(path, indices) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in indices))


def read_index_list(path) -> list[int]:
    return [int(s) for s in Path(path).read_text().split()]


def load_images(root, indices=None, image_size: int | None = None,
                interpolation: str = "bilinear", channels: int | None = None) -> torch.Tensor:
    """Load a folder (or its ``images.npy``) into a float32 [0, 1] batch."""
    root = Path(root)
    if (root / ARRAY_FILE).is_file():
        arr = np.load(root / ARRAY_FILE, mmap_mode="r")
        arr = arr if indices is None else arr[np.asarray(indices)]
        batch = torch.from_numpy(np.array(arr, dtype=np.float32))
        if image_size is not None and batch.shape[-1] != image_size:
            batch = torch.stack([center_crop_resize(im, image_size, interpolation) for im in batch])
        return batch
    files = list_image_files(root)
    if not files:
        raise DataError(f"no images found in {root}")
    if indices is not None:
        files = [files[i] for i in indices]
    out = []
    for path in files:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            a = np.asarray(im, dtype=np.float32) / PIXEL_SCALE
        a = a[None] if a.ndim == 2 else a.transpose(2, 0, 1)
        t = torch.from_numpy(np.ascontiguousarray(a))
        if image_size is not None:
            t = center_crop_resize(t, image_size, interpolation)
        out.append(t)
    return torch.stack(out)


def save_image(path, img: torch.Tensor) -> None:
    """Write one (C, H, W) image as 8-bit PNG; the only place values are clamped."""
    a = img.detach().clamp(0, 1).mul(PIXEL_SCALE).round().to(torch.uint8).cpu().numpy()
    a = a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)
    Image.fromarray(a).save(path)


def load_manifest(root) -> dict | None:
    path = Path(root) / "manifest.json"
    return json.loads(path.read_text()) if path.is_file() else None
