"""Dense score-matrix primitives shared by the rest of the package."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Role(enum.IntEnum):
    TEXT = 0
    IMAGE = 1


class DegenerateRowError(ValueError):
    pass


class EmptySubsetError(ValueError):
    pass


def as_index_set(indices) -> np.ndarray:
    """Sorted, unique int64 index array."""
    if isinstance(indices, (set, frozenset)):
        indices = sorted(indices)
    return np.unique(np.asarray(indices, dtype=np.int64))


@dataclass(frozen=True)
class AttentionField:
    """Pre-softmax scores over the joint text+image sequence for one (step, block, head).

    ``head`` is -1 for a head-averaged field. Image tokens occupy one contiguous
    index range and map row-major onto ``grid``.
    """

    step: int
    block: int
    head: int
    scores: np.ndarray
    roles: np.ndarray
    grid: tuple[int, int]
    allow_neg_inf: bool = field(default=False, compare=False)

    def __post_init__(self):
        s = self.scores
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError(f"scores must be square, got {s.shape}")
        if len(self.roles) != s.shape[0]:
            raise ValueError("roles length must equal the token count")
        img = np.flatnonzero(np.asarray(self.roles) == Role.IMAGE)
        h, w = self.grid
        if len(img) != h * w:
            raise ValueError(f"grid {self.grid} does not match {len(img)} image tokens")
        if len(img) and img[-1] - img[0] + 1 != len(img):
            raise ValueError("image tokens must be contiguous")
        if self.allow_neg_inf:
            if np.isnan(s).any() or np.isposinf(s).any():
                raise ValueError("scores contain NaN or +inf")
        elif not np.isfinite(s).all():
            raise ValueError("scores must be finite on construction")

    @property
    def n_tokens(self) -> int:
        return self.scores.shape[0]

    @property
    def image_indices(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.roles) == Role.IMAGE)

    @property
    def text_indices(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.roles) == Role.TEXT)

    @property
    def image_offset(self) -> int:
        return int(self.image_indices[0])

    def global_block(self, blocks_per_step: int) -> int:
        return self.step * blocks_per_step + self.block


def scaled_scores(Q: np.ndarray, K: np.ndarray, d: int | None = None) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or Q.shape != K.shape:
        raise ValueError(f"Q and K must have the same 2-D shape, got {Q.shape} and {K.shape}")
    if d is None:
        d = Q.shape[1]
    if d != Q.shape[1]:
        raise ValueError(f"d={d} does not match column count {Q.shape[1]}")
    return (Q @ K.T) / np.sqrt(d)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction; -inf entries map to exactly 0."""
    s = np.asarray(scores, dtype=np.float64)
    m = s.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateRowError("degenerate row: every entry is -inf")
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def block_stats(values: np.ndarray) -> tuple[float, float]:
    """Mean and population std of an array, over all entries."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptySubsetError("empty subset")
    mu = float(v.mean())
    return mu, float(np.sqrt(np.mean((v - mu) ** 2)))


def subset_stats(field: AttentionField | np.ndarray, rows, cols) -> tuple[float, float]:
    """(mu, sigma) over the rows x cols block; sigma is the population std."""
    scores = field.scores if isinstance(field, AttentionField) else np.asarray(field)
    rows = as_index_set(rows)
    cols = as_index_set(cols)
    if rows.size == 0 or cols.size == 0:
        raise EmptySubsetError("empty subset")
    return block_stats(scores[np.ix_(rows, cols)])


def head_average(per_head: np.ndarray) -> np.ndarray:
    return np.asarray(per_head, dtype=np.float64).mean(axis=0)
