"""PNG / PPM / PGM reading and writing, scaled to [0, 1]."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from ..errors import DataError

SUPPORTED = (".png", ".ppm", ".pgm")
PathLike = Union[str, os.PathLike]


def _check_suffix(path: Path) -> None:
    if path.suffix.lower() not in SUPPORTED:
        raise DataError(
            f"unsupported image format {path.suffix!r} for {path.name}; "
            f"supported: {', '.join(SUPPORTED)} (convert TIFF/GIF/JPEG first)"
        )


def read_image(path: PathLike) -> np.ndarray:
    """Return a float32 ``C x H x W`` array in [0, 1] (C = 1 or 3)."""
    path = Path(path)
    _check_suffix(path)
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            maxval = 65535.0
        elif mode in ("L", "1", "P", "LA"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            maxval = 255.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
            maxval = 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return (arr / maxval).astype(np.float32)


def read_mask(path: PathLike) -> np.ndarray:
    """Read a truth / FOV image and binarize it at 0.5 into a ``1 x H x W`` array."""
    img = read_image(path)
    if img.shape[0] != 1:
        img = img.mean(axis=0, keepdims=True)
    return (img >= 0.5).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: PathLike, image: np.ndarray) -> None:
    """Write a ``C x H x W`` (C in {1, 3}) or ``H x W`` array in [0, 1] as 8-bit."""
    path = Path(path)
    _check_suffix(path)
    arr = np.asarray(image)
    if arr.ndim == 3:
        if arr.shape[0] == 1:
            arr = arr[0]
        elif arr.shape[0] == 3:
            arr = arr.transpose(1, 2, 0)
        else:
            raise DataError(f"cannot write image with {arr.shape[0]} channels")
    data = arr if arr.dtype == np.uint8 else to_uint8(arr)
    if path.suffix.lower() == ".pgm" and data.ndim == 3:
        raise DataError("PGM output must be single-channel")
    if path.suffix.lower() == ".ppm" and data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=2)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path)
