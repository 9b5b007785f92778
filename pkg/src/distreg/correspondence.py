from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class Correspondences:
    """Index pairs ``(i into source, j into target)`` with optional scores."""

    pairs: np.ndarray
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != len(self.pairs):
                raise ValueError("one score per pair required")

    def __len__(self):
        return len(self.pairs)

    @property
    def src(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.pairs[:, 1]

    def subset(self, mask_or_index) -> "Correspondences":
        scores = None if self.scores is None else self.scores[mask_or_index]
        return Correspondences(self.pairs[mask_or_index], scores)

    def swapped(self) -> "Correspondences":
        return Correspondences(self.pairs[:, ::-1].copy(), self.scores)


def as_pairs(corr) -> np.ndarray:
    if isinstance(corr, Correspondences):
        return corr.pairs
    return np.asarray(corr, dtype=np.int64).reshape(-1, 2)
