from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class SampleBatch:
    """Input rows with optional integer labels.

    ``features`` carries precomputed representation outputs for the cases
    where the representation is not a network (e.g. a given (X, Z) sample
    of a known joint distribution).
    """

    rows: np.ndarray
    labels: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim == 1:
            self.rows = self.rows[:, None]
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("sample rows contain non-finite values")
        n = self.rows.shape[0]
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n,):
                raise ValueError(f"labels shape {labels.shape} does not match {n} rows")
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValueError("labels must be integer-valued")
            self.labels = labels.astype(np.int64)
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim == 1:
                feats = feats[:, None]
            if feats.shape[0] != n:
                raise ValueError("features and rows disagree on sample count")
            self.features = feats

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def take(self, idx) -> "SampleBatch":
        return SampleBatch(
            self.rows[idx],
            None if self.labels is None else self.labels[idx],
            None if self.features is None else self.features[idx],
        )

    def split(self, n_first: int):
        idx = np.arange(len(self))
        return self.take(idx[:n_first]), self.take(idx[n_first:])

    def without_labels(self) -> "SampleBatch":
        return SampleBatch(self.rows, None, self.features)
