from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..errors import DataError


@dataclass
class Sample:
    """Fundus image (3 x H x W, [0, 1]), binary truth and optional FOV mask (1 x H x W)."""

    image: np.ndarray
    truth: np.ndarray
    fov: Optional[np.ndarray] = None
    id: str = ""
    split: Optional[str] = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.truth.ndim != 3 or self.truth.shape[0] != 1:
            raise DataError(f"{self.id}: expected C x H x W image and 1 x H x W truth")
        hw = self.image.shape[1:]
        if self.truth.shape[1:] != hw or (self.fov is not None and self.fov.shape != (1, *hw)):
            raise DataError(f"{self.id}: spatial dims disagree between image, truth and mask")
        if not np.all((self.truth == 0) | (self.truth == 1)):
            raise DataError(f"{self.id}: truth must be binary")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def with_(self, **changes) -> "Sample":
        return replace(self, **changes)
