"""Ensemble container shared by the field generator and the smoother."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Ensemble:
    """N_e stacked member vectors, either latent codes or flattened fields."""

    members: np.ndarray          # (N_e, dim)
    space: str                   # "latent" | "model"
    iteration: int = 0

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.float64)
        if self.members.ndim != 2:
            raise ValueError(f"ensemble members must be 2-D (N_e, dim), got {self.members.shape}")
        if self.members.shape[0] < 2:
            raise ValueError("ensemble needs at least 2 members")
        if self.space not in ("latent", "model"):
            raise ValueError(f"unknown ensemble space {self.space!r}")

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def copy(self) -> "Ensemble":
        return Ensemble(self.members.copy(), self.space, self.iteration)
