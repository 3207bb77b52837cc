"""Cross-entity suppression and self-identity strengthening on pre-softmax scores."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attn import EmptySubsetError, subset_stats
from .masking import EntityLayout, EntityMaskSet, MaskBuilder

# Reference schedule: 20 steps x 57 blocks.
REFERENCE_BLOCKS = 1140


class Direction(str, enum.Enum):
    IMG_QUERY_TXT_KEY = "IMG_QUERY_TXT_KEY"
    TXT_QUERY_IMG_KEY = "TXT_QUERY_IMG_KEY"
    BOTH = "BOTH"


TOGGLES = ("img_img_suppress", "img_txt_suppress", "self_strengthen", "txt_txt_suppress")


@dataclass(frozen=True)
class DeleakerConfig:
    alpha: float = 1.2
    beta1: float = 0.9
    beta2: float = 2.0
    agg_start_frac: float = 12 / REFERENCE_BLOCKS
    agg_end_frac: float = 456 / REFERENCE_BLOCKS
    int_start_frac: float = 57 / REFERENCE_BLOCKS
    int_end_frac: float = 741 / REFERENCE_BLOCKS
    img_img_suppress: bool = True
    img_txt_suppress: bool = True
    self_strengthen: bool = True
    txt_txt_suppress: bool = False
    strengthen_direction: Direction = Direction.IMG_QUERY_TXT_KEY
    spatial_smoothing: bool = True
    temporal_smoothing: bool = True
    structuring_element: str = "square"

    def __post_init__(self):
        object.__setattr__(self, "strengthen_direction", Direction(self.strengthen_direction))
        for a, b in ((self.agg_start_frac, self.agg_end_frac), (self.int_start_frac, self.int_end_frac)):
            if not 0.0 <= a < b <= 1.0:
                raise ValueError(f"window fractions must satisfy 0 <= start < end <= 1, got ({a}, {b})")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.beta2 < 0:
            raise ValueError("beta2 must be >= 0")
        if self.structuring_element not in ("square", "cross"):
            raise ValueError(f"unknown structuring element {self.structuring_element!r}")

    def agg_window(self, total_blocks: int) -> tuple[int, int]:
        return frac_window(self.agg_start_frac, self.agg_end_frac, total_blocks)

    def int_window(self, total_blocks: int) -> tuple[int, int]:
        return frac_window(self.int_start_frac, self.int_end_frac, total_blocks)

    def with_toggles(self, **kw) -> "DeleakerConfig":
        return replace(self, **kw)

    # flat key-value document: toggles are "toggles.<name>"
    def to_flat(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            key = f"toggles.{f.name}" if f.name in TOGGLES else f.name
            d[key] = v.value if isinstance(v, enum.Enum) else v
        return d

    @classmethod
    def from_flat(cls, d: dict, base: Optional["DeleakerConfig"] = None) -> "DeleakerConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, v in d.items():
            name = key[len("toggles."):] if key.startswith("toggles.") else key
            if name not in known or (name in TOGGLES) != key.startswith("toggles."):
                raise ValueError(f"unknown config key {key!r}")
            if name in TOGGLES or name in ("spatial_smoothing", "temporal_smoothing"):
                if not isinstance(v, bool):
                    raise ValueError(f"{key} must be a boolean")
            elif name in ("strengthen_direction", "structuring_element"):
                v = str(v)
            else:
                v = float(v)
            kw[name] = v
        return replace(base or cls(), **kw)


def frac_window(start: float, end: float, total_blocks: int) -> tuple[int, int]:
    """Half-open block range of g with start <= g / total < end."""
    lo = math.ceil(start * total_blocks - 1e-9)
    hi = math.ceil(end * total_blocks - 1e-9)
    return lo, hi


def load_config(path: str | Path, base: Optional[DeleakerConfig] = None) -> DeleakerConfig:
    return DeleakerConfig.from_flat(json.loads(Path(path).read_text()), base)


def save_config(cfg: DeleakerConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n")


def cross_pair_stats(avg_scores: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """(mu_ij, sigma_ij) over the rows x cols block, or None to skip an empty pair."""
    try:
        return subset_stats(avg_scores, rows, cols)
    except EmptySubsetError:
        return None


def high_attention_pairs(avg_scores: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                         beta2: float) -> tuple[np.ndarray, np.ndarray]:
    """Token-index pairs (q, k) of the cross block above mu + beta2 * sigma."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    stats = cross_pair_stats(avg_scores, rows, cols)
    if stats is None:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    mu, sigma = stats
    blk = avg_scores[np.ix_(rows, cols)]
    r, c = np.nonzero(blk > mu + beta2 * sigma)
    return rows[r], cols[c]


def apply_deleaker(per_head: np.ndarray, avg_scores: np.ndarray, masks: Optional[EntityMaskSet],
                   layout: EntityLayout, config: DeleakerConfig, global_block: int,
                   total_blocks: int, image_offset: int) -> np.ndarray:
    """Rewrite per-head pre-softmax scores; identity outside the intervention window."""
    lo, hi = config.int_window(total_blocks)
    if masks is None or not lo <= global_block < hi:
        return per_head
    if not masks.is_disjoint():
        raise ValueError("entity masks overlap")
    if global_block >= config.agg_window(total_blocks)[1] and not masks.frozen:
        raise ValueError("masks must be frozen after the aggregation window")
    out = per_head.copy()
    img = [masks.tokens(i, image_offset) for i in range(len(masks))]
    txt = [layout.text(i) for i in range(len(layout))]
    for i, j in layout.pairs():
        if config.img_img_suppress:
            q, k = high_attention_pairs(avg_scores, img[i], img[j], config.beta2)
            out[:, q, k] = -np.inf
        if config.img_txt_suppress and img[i].size:
            out[:, img[i][:, None], txt[j][None, :]] = -np.inf
        if config.txt_txt_suppress:
            out[:, txt[i][:, None], txt[j][None, :]] = -np.inf
    if config.self_strengthen:
        a = config.alpha
        for i in range(len(layout)):
            if not img[i].size:
                continue
            if config.strengthen_direction in (Direction.IMG_QUERY_TXT_KEY, Direction.BOTH):
                out[:, img[i][:, None], txt[i][None, :]] *= a
            if config.strengthen_direction in (Direction.TXT_QUERY_IMG_KEY, Direction.BOTH):
                out[:, txt[i][:, None], img[i][None, :]] *= a
    return out


class DeleakerHook:
    """Score hook for :func:`deleaker.toy.run_diffusion`.

    Each call feeds the raw head-averaged field to the mask builder, then
    applies the intervention with the masks known at that block.
    """

    def __init__(self, layout: EntityLayout, config: DeleakerConfig, total_blocks: int,
                 grid: tuple[int, int], image_offset: int):
        self.layout = layout
        self.config = config
        self.total_blocks = total_blocks
        self.image_offset = image_offset
        n_img = grid[0] * grid[1]
        self.builder = MaskBuilder(layout, grid, np.arange(image_offset, image_offset + n_img),
                                   config.agg_window(total_blocks), config.beta1,
                                   config.spatial_smoothing, config.temporal_smoothing,
                                   config.structuring_element)
        self.mask_log: dict[int, Optional[EntityMaskSet]] = {}

    @classmethod
    def for_model(cls, layout: EntityLayout, config: DeleakerConfig, model_config) -> "DeleakerHook":
        return cls(layout, config, model_config.total_blocks, model_config.grid,
                   model_config.text_tokens)

    def __call__(self, global_block: int, avg_scores: np.ndarray, per_head: np.ndarray) -> np.ndarray:
        masks = self.builder.update(global_block, avg_scores)
        self.mask_log[global_block] = masks
        return apply_deleaker(per_head, avg_scores, masks, self.layout, self.config,
                              global_block, self.total_blocks, self.image_offset)

    @property
    def masks(self) -> Optional[EntityMaskSet]:
        return self.builder.masks


# Ablation grid: row label -> toggle settings.
ABLATION_GRID = (
    ("DeLeaker", dict(img_img_suppress=True, img_txt_suppress=True, self_strengthen=True, txt_txt_suppress=False)),
    ("W/O Image-Image(-)", dict(img_img_suppress=False, img_txt_suppress=True, self_strengthen=True, txt_txt_suppress=False)),
    ("W/O Image-Text(-)", dict(img_img_suppress=True, img_txt_suppress=False, self_strengthen=True, txt_txt_suppress=False)),
    ("W/O Image-Text(+)", dict(img_img_suppress=True, img_txt_suppress=True, self_strengthen=False, txt_txt_suppress=False)),
    ("With Text-Text(-)", dict(img_img_suppress=True, img_txt_suppress=True, self_strengthen=True, txt_txt_suppress=True)),
    ("Only Image-Image(-)", dict(img_img_suppress=True, img_txt_suppress=False, self_strengthen=False, txt_txt_suppress=False)),
    ("Only Image-Text(-)", dict(img_img_suppress=False, img_txt_suppress=True, self_strengthen=False, txt_txt_suppress=False)),
    ("Only Image-Text(+)", dict(img_img_suppress=False, img_txt_suppress=False, self_strengthen=True, txt_txt_suppress=False)),
)


def ablation_configs(base: Optional[DeleakerConfig] = None) -> list[tuple[str, DeleakerConfig]]:
    base = base or DeleakerConfig()
    return [(label, base.with_toggles(**t)) for label, t in ABLATION_GRID]
