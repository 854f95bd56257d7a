"""Dataset directory ingestion and train/test splitting.

Layout::

    <root>/images/<stem>.png|ppm
    <root>/targets/<stem>.png|pgm
    <root>/masks/<stem>.png|pgm      (optional)

A dataset with a fixed split keeps the same layout under ``<root>/training``
and ``<root>/test``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from ..errors import ConfigError, DataError
from .io import SUPPORTED, read_image, read_mask, write_image
from .sample import Sample

# name -> ((width, height), image count, train count for a fixed split or None)
KNOWN = {
    "DRIVE": ((565, 584), 40, 20),
    "STARE": ((700, 605), 20, None),
    "CHASE_DB1": ((999, 960), 28, None),
    "HRF": ((3504, 2336), 45, None),
}
NAMES = (*KNOWN, "synthetic", "custom")
POLICIES = ("fixed-train-test", "leave-one-out")
SPLIT_DIRS = ("training", "test")


@dataclass
class DatasetSpec:
    name: str
    root: Path
    resolution: Optional[tuple[int, int]] = None  # (width, height)
    split_policy: Optional[str] = None

    def __post_init__(self):
        if self.name not in NAMES:
            raise ConfigError(f"unknown dataset {self.name!r}; choose from {NAMES}")
        self.root = Path(self.root)
        if self.name in KNOWN:
            declared = KNOWN[self.name][0]
            if self.resolution is None:
                self.resolution = declared
            elif tuple(self.resolution) != declared:
                raise ConfigError(f"{self.name} images are {declared[0]}x{declared[1]}, not {self.resolution}")
        if self.split_policy is None:
            fixed = self.name in KNOWN and KNOWN[self.name][2] is not None
            tagged = self.name == "custom" and all((self.root / d).is_dir() for d in SPLIT_DIRS)
            self.split_policy = "fixed-train-test" if fixed or tagged or self.name == "synthetic" else "leave-one-out"
        if self.split_policy not in POLICIES:
            raise ConfigError(f"split policy must be one of {POLICIES}")

    @property
    def expected_count(self) -> Optional[int]:
        return KNOWN[self.name][1] if self.name in KNOWN else None


def _index(folder: Path, exts: Sequence[str]) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in exts}


def _load_tree(root: Path, split: Optional[str], resolution: Optional[tuple[int, int]]) -> list[Sample]:
    images = _index(root / "images", (".png", ".ppm"))
    targets = _index(root / "targets", (".png", ".pgm"))
    masks = _index(root / "masks", (".png", ".pgm"))
    if not images and not targets:
        raise DataError(f"no images found under {root} (expected images/ and targets/ with {SUPPORTED} files)")
    missing = [f"targets/{s}" for s in sorted(set(images) - set(targets))]
    missing += [f"images/{s}" for s in sorted(set(targets) - set(images))]
    if masks:
        missing += [f"masks/{s}" for s in sorted(set(images) - set(masks))]
    if missing:
        raise DataError(f"unpaired files under {root}; missing: {', '.join(missing)}")

    samples = []
    for stem in sorted(images):
        image = read_image(images[stem])
        if image.shape[0] != 3:
            raise DataError(f"{images[stem]}: expected an RGB image, got {image.shape[0]} channels")
        truth = read_mask(targets[stem])
        fov = read_mask(masks[stem]) if stem in masks else None
        for label, arr in (("target", truth), ("mask", fov)):
            if arr is not None and arr.shape[1:] != image.shape[1:]:
                raise DataError(f"{stem}: {label} is {arr.shape[1:]}, image is {image.shape[1:]}")
        if resolution is not None and (image.shape[2], image.shape[1]) != tuple(resolution):
            raise DataError(f"{stem}: image is {image.shape[2]}x{image.shape[1]}, dataset declares "
                            f"{resolution[0]}x{resolution[1]}")
        samples.append(Sample(image=image, truth=truth, fov=fov, id=stem, split=split))
    return samples


def load_dataset(spec: DatasetSpec) -> list[Sample]:
    """Read every sample under ``spec.root``, sorted by split then stem."""
    root = spec.root
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    if any((root / d).is_dir() for d in SPLIT_DIRS):
        samples = []
        for d in SPLIT_DIRS:
            if (root / d).is_dir():
                samples += _load_tree(root / d, d, spec.resolution)
    else:
        samples = _load_tree(root, None, spec.resolution)
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise DataError("sample stems must be unique across splits")
    return samples


def make_splits(samples: Sequence[Sample], policy: str) -> list[tuple[list[str], list[str]]]:
    """Return ``(train_ids, test_ids)`` folds.

    ``fixed-train-test`` uses each sample's ``split`` tag (one fold);
    ``leave-one-out`` yields one fold per sample.
    """
    ids = [s.id for s in samples]
    if policy == "leave-one-out":
        if len(ids) < 2:
            raise ConfigError("leave-one-out needs at least two samples")
        return [(ids[:i] + ids[i + 1 :], [ids[i]]) for i in range(len(ids))]
    if policy == "fixed-train-test":
        train = [s.id for s in samples if s.split == "training"]
        test = [s.id for s in samples if s.split == "test"]
        untagged = [s.id for s in samples if s.split not in SPLIT_DIRS]
        if untagged or not train or not test:
            raise ConfigError("fixed-train-test needs samples under both training/ and test/")
        return [(train, test)]
    raise ConfigError(f"split policy must be one of {POLICIES}")


def select(samples: Sequence[Sample], ids: Sequence[str]) -> list[Sample]:
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in ids]


def write_dataset(samples: Sequence[Sample], root: os.PathLike) -> None:
    """Write samples in the loader's layout, under ``training/`` or ``test/`` when tagged."""
    root = Path(root)
    for s in samples:
        base = root / s.split if s.split in SPLIT_DIRS else root
        write_image(base / "images" / f"{s.id}.png", s.image)
        write_image(base / "targets" / f"{s.id}.png", s.truth)
        if s.fov is not None:
            write_image(base / "masks" / f"{s.id}.png", s.fov)
