"""Entity masks from image->text attention, with temporal and spatial smoothing.

Mask cells are grid-local indices ``0 .. H*W-1`` (row-major); add the image
offset of the token sequence to get token indices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .attn import as_index_set, block_stats


@dataclass(frozen=True)
class Entity:
    name: str
    text: np.ndarray  # token indices of the entity's words

    def __post_init__(self):
        object.__setattr__(self, "text", as_index_set(self.text))


@dataclass(frozen=True)
class EntityLayout:
    entities: tuple[Entity, ...]

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        seen: set[int] = set()
        for e in self.entities:
            t = set(e.text.tolist())
            if seen & t:
                raise ValueError("entity text spans overlap")
            seen |= t

    def __len__(self):
        return len(self.entities)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entities]

    def text(self, i: int) -> np.ndarray:
        return self.entities[i].text

    def pairs(self):
        """Ordered pairs (i, j), i != j."""
        n = len(self.entities)
        return [(i, j) for i in range(n) for j in range(n) if i != j]

    @classmethod
    def from_plant(cls, plant) -> "EntityLayout":
        return cls(tuple(Entity(e.name, e.text_indices()) for e in plant.entities))

    def as_pairs(self):
        return [(e.name, e.text) for e in self.entities]


@dataclass(frozen=True)
class MaskHistory:
    """Per-entity running sums of image->entity-text attention and the sample count."""

    sums: np.ndarray  # (n_entities, H*W)
    count: int = 0

    @classmethod
    def empty(cls, n_entities: int, n_cells: int) -> "MaskHistory":
        return cls(np.zeros((n_entities, n_cells)), 0)

    @property
    def means(self) -> np.ndarray:
        if self.count < 1:
            raise ValueError("mask history has no samples")
        return self.sums / self.count


def entity_maps(avg_scores: np.ndarray, layout: EntityLayout, image_idx: np.ndarray) -> np.ndarray:
    """For each entity, every image token's mean score over that entity's text tokens."""
    return np.stack([avg_scores[np.ix_(image_idx, layout.text(i))].mean(axis=1)
                     for i in range(len(layout))])


def in_window(window: tuple[int, int], global_block: int) -> bool:
    # block 0 of step 0 is never aggregated
    return global_block > 0 and window[0] <= global_block < window[1]


def accumulate(history: MaskHistory, avg_scores: np.ndarray, layout: EntityLayout,
               image_idx: np.ndarray, global_block: int, window: tuple[int, int]) -> MaskHistory:
    if not in_window(window, global_block):
        return history
    maps = entity_maps(np.asarray(avg_scores), layout, image_idx)
    return MaskHistory(history.sums + maps, history.count + 1)


def threshold_cells(values: np.ndarray, beta: float) -> np.ndarray:
    """Cells strictly above mean + beta * std of ``values``."""
    mu, sigma = block_stats(values)
    return np.flatnonzero(values > mu + beta * sigma)


def threshold_mask(history: MaskHistory, entity: int, beta1: float) -> np.ndarray:
    return threshold_cells(history.means[entity], beta1)


# 3x3 structuring elements; "cross" is the discrete 3x3 ellipse
ELEMENTS = {
    "square": np.ones((3, 3), dtype=bool),
    "cross": np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
}


def _shifts(element: np.ndarray):
    return [(dr - 1, dc - 1) for dr, dc in zip(*np.nonzero(element))]


def _shifted(B: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """out[r, c] = B[r + dr, c + dc], with out-of-grid reads unset."""
    H, W = B.shape
    out = np.zeros_like(B)
    rs, re = max(0, -dr), min(H, H - dr)
    cs, ce = max(0, -dc), min(W, W - dc)
    if rs < re and cs < ce:
        out[rs:re, cs:ce] = B[rs + dr:re + dr, cs + dc:ce + dc]
    return out


def dilate(B: np.ndarray, element: np.ndarray = ELEMENTS["square"]) -> np.ndarray:
    out = np.zeros_like(B, dtype=bool)
    for dr, dc in _shifts(element):
        out |= _shifted(B, dr, dc)
    return out


def erode(B: np.ndarray, element: np.ndarray = ELEMENTS["square"]) -> np.ndarray:
    out = np.ones_like(B, dtype=bool)
    for dr, dc in _shifts(element):
        out &= _shifted(B, dr, dc)
    return out


def cells_to_grid(cells, grid: tuple[int, int]) -> np.ndarray:
    B = np.zeros(grid[0] * grid[1], dtype=bool)
    B[as_index_set(cells)] = True
    return B.reshape(grid)


def smooth_mask_spatial(cells, grid: tuple[int, int], element: str = "square") -> np.ndarray:
    """Morphological closing followed by opening."""
    el = ELEMENTS[element]
    B = cells_to_grid(cells, grid)
    B = erode(dilate(B, el), el)
    B = dilate(erode(B, el), el)
    return np.flatnonzero(B.ravel())


@dataclass(frozen=True)
class EntityMaskSet:
    masks: tuple[np.ndarray, ...]
    grid: tuple[int, int]
    frozen: bool = False

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(as_index_set(m) for m in self.masks))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))

    def __len__(self):
        return len(self.masks)

    def tokens(self, i: int, image_offset: int) -> np.ndarray:
        return self.masks[i] + image_offset

    def is_disjoint(self) -> bool:
        total = sum(len(m) for m in self.masks)
        return total == len(np.unique(np.concatenate(self.masks))) if self.masks else True

    def equals(self, other: "EntityMaskSet") -> bool:
        return (self.grid == other.grid and len(self) == len(other)
                and all(np.array_equal(a, b) for a, b in zip(self.masks, other.masks)))

    def freeze(self) -> "EntityMaskSet":
        return replace(self, frozen=True)


def resolve_overlaps(masks: EntityMaskSet, history: MaskHistory) -> EntityMaskSet:
    """A cell claimed by several entities stays with the highest mean map value.

    Ties go to the lower entity index (argmax returns the first maximum).
    """
    n = len(masks)
    if n < 2:
        return masks
    means = history.means
    member = np.zeros((n, means.shape[1]), dtype=bool)
    for i, m in enumerate(masks.masks):
        member[i, m] = True
    shared = member.sum(axis=0) >= 2
    if not shared.any():
        return masks
    scored = np.where(member, means, -np.inf)
    owner = np.argmax(scored, axis=0)
    out = []
    for i in range(n):
        keep = member[i] & (~shared | (owner == i))
        out.append(np.flatnonzero(keep))
    return EntityMaskSet(tuple(out), masks.grid, masks.frozen)


def masks_from_history(history: MaskHistory, beta1: float, grid: tuple[int, int],
                       spatial: bool = True, element: str = "square") -> EntityMaskSet:
    raw = []
    for i in range(history.sums.shape[0]):
        cells = threshold_mask(history, i, beta1)
        if spatial:
            cells = smooth_mask_spatial(cells, grid, element)
        raw.append(cells)
    return resolve_overlaps(EntityMaskSet(tuple(raw), grid), history)


class MaskBuilder:
    """Streams head-averaged fields in run order and maintains the entity masks.

    Masks are provisional while the aggregation window is open and frozen from
    its end onwards. With ``temporal=False`` the history is reset before every
    sample, so masks come from the latest block alone.
    """

    def __init__(self, layout: EntityLayout, grid: tuple[int, int], image_idx: np.ndarray,
                 window: tuple[int, int], beta1: float = 0.9, spatial: bool = True,
                 temporal: bool = True, element: str = "square"):
        if window[1] <= max(window[0], 1):
            raise ValueError(f"aggregation window {window} contains no blocks")
        self.layout = layout
        self.grid = tuple(grid)
        self.image_idx = np.asarray(image_idx)
        self.window = window
        self.beta1 = beta1
        self.spatial = spatial
        self.temporal = temporal
        self.element = element
        self.history = MaskHistory.empty(len(layout), self.grid[0] * self.grid[1])
        self._masks: Optional[EntityMaskSet] = None
        self.last_block = -1

    def update(self, global_block: int, avg_scores: np.ndarray) -> Optional[EntityMaskSet]:
        if global_block <= self.last_block:
            raise ValueError("blocks must arrive in increasing order")
        self.last_block = global_block
        if self._masks is not None and self._masks.frozen:
            return self._masks
        if in_window(self.window, global_block):
            base = self.history if self.temporal else MaskHistory.empty(*self.history.sums.shape)
            self.history = accumulate(base, avg_scores, self.layout, self.image_idx,
                                      global_block, self.window)
            self._masks = masks_from_history(self.history, self.beta1, self.grid,
                                             self.spatial, self.element)
        if global_block >= self.window[1] - 1 and self._masks is not None:
            self._masks = self._masks.freeze()
        return self._masks

    @property
    def masks(self) -> Optional[EntityMaskSet]:
        return self._masks


def build_masks(stream: Iterable[tuple[int, np.ndarray]], layout: EntityLayout,
                grid: tuple[int, int], image_idx: np.ndarray, window: tuple[int, int],
                beta1: float = 0.9, spatial: bool = True, temporal: bool = True,
                element: str = "square") -> EntityMaskSet:
    """Run a builder over ``(global_block, head-averaged scores)`` pairs; return frozen masks."""
    b = MaskBuilder(layout, grid, image_idx, window, beta1, spatial, temporal, element)
    for g, avg in stream:
        b.update(g, avg)
        if b.masks is not None and b.masks.frozen:
            break
    if b.masks is None:
        raise ValueError("the trace never reached the aggregation window")
    return b.masks.freeze()


def f1_score(predicted, truth) -> float:
    p = set(np.asarray(predicted).tolist())
    t = set(np.asarray(truth).tolist())
    if not p and not t:
        return 1.0
    tp = len(p & t)
    if tp == 0:
        return 0.0
    prec, rec = tp / len(p), tp / len(t)
    return 2 * prec * rec / (prec + rec)


def save_masks(masks: EntityMaskSet, path: str | Path, names: Optional[Sequence[str]] = None) -> None:
    names = list(names) if names is not None else [f"entity{i}" for i in range(len(masks))]
    doc = {
        "grid": list(masks.grid),
        "frozen": masks.frozen,
        "entities": [{"name": n, "cells": [int(c) for c in m]} for n, m in zip(names, masks.masks)],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_masks(path: str | Path) -> tuple[EntityMaskSet, list[str]]:
    doc = json.loads(Path(path).read_text())
    grid = tuple(doc["grid"])
    masks = EntityMaskSet(tuple(np.array(e["cells"], dtype=np.int64) for e in doc["entities"]),
                          grid, bool(doc.get("frozen", True)))
    for m in masks.masks:
        if m.size and (m[0] < 0 or m[-1] >= grid[0] * grid[1]):
            raise ValueError("mask cell outside the grid")
    return masks, [e["name"] for e in doc["entities"]]
