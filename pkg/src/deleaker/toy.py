"""A seeded, desk-scale joint-attention transformer with plantable leakage.

Text tokens come first in the sequence, image tokens follow and map row-major
onto the ``(H, W)`` grid. Every global block runs one joint self-attention over
all tokens; a hook can rewrite the pre-softmax scores before the softmax, and
the resulting weights update the token states so that an intervention at one
block changes the scores of every later block.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .attn import AttentionField, Role, softmax_rows

# Philox stream tags; coordinates live in the high counter words so streams
# never overlap for fewer than 2**64 draws.
_TAG_STATE = 1
_TAG_QUERY = 2
_TAG_KEY = 3


def counter_rng(seed: int, tag: int, a: int = 0, b: int = 0, c: int = 0) -> np.random.Generator:
    """Counter-based generator keyed on ``seed`` and positioned at coordinates."""
    key = int(seed) & 0xFFFFFFFFFFFFFFFF
    counter = [0, int(c), (int(b) << 32) | int(a), int(tag)]
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


class Channel(str, enum.Enum):
    IMG_TXT = "IMG_TXT"
    IMG_IMG = "IMG_IMG"
    BOTH = "BOTH"


@dataclass(frozen=True)
class ToyModelConfig:
    text_tokens: int = 16
    grid: tuple[int, int] = (8, 8)
    heads: int = 4
    head_dim: int = 16
    steps: int = 20
    blocks_per_step: int = 4
    seed: int = 0
    state_mix: float = 0.1
    key_tie: float = 1.0
    logit_scale: float = 1.0
    head_local: bool = True

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        for name in ("text_tokens", "heads", "head_dim", "steps", "blocks_per_step"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.grid) != 2 or min(self.grid) < 1 or self.grid[0] * self.grid[1] < 4:
            raise ValueError(f"grid must have H*W >= 4, got {self.grid}")
        if not 0.0 <= self.key_tie <= 1.0:
            raise ValueError("key_tie must lie in [0, 1]")

    @property
    def image_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def n_tokens(self) -> int:
        return self.text_tokens + self.image_tokens

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def total_blocks(self) -> int:
        return self.steps * self.blocks_per_step

    @property
    def roles(self) -> np.ndarray:
        return np.array([Role.TEXT] * self.text_tokens + [Role.IMAGE] * self.image_tokens,
                        dtype=np.int8)

    def image_index(self, row: int, col: int) -> int:
        return self.text_tokens + row * self.grid[1] + col


@dataclass(frozen=True)
class ToyModel:
    config: ToyModelConfig
    states: np.ndarray  # (N, model_dim)
    w_query: np.ndarray  # (blocks_per_step, heads, model_dim, head_dim)
    w_key: np.ndarray


def _embed_rows(w: np.ndarray, head: int, D: int) -> np.ndarray:
    out = np.zeros((D, w.shape[1]))
    out[head * w.shape[0]:(head + 1) * w.shape[0]] = w
    return out


def init_model(config: ToyModelConfig) -> ToyModel:
    """Token states and per-(block, head) projections, one counter stream per coordinate."""
    c = config
    D, d = c.model_dim, c.head_dim
    states = np.stack([counter_rng(c.seed, _TAG_STATE, t).standard_normal(D)
                       for t in range(c.n_tokens)])
    wq = np.empty((c.blocks_per_step, c.heads, D, d))
    wk = np.empty_like(wq)
    for b in range(c.blocks_per_step):
        for h in range(c.heads):
            rows = d if c.head_local else D
            q = counter_rng(c.seed, _TAG_QUERY, b, h).standard_normal((rows, d)) / np.sqrt(rows)
            own = counter_rng(c.seed, _TAG_KEY, b, h).standard_normal((rows, d)) / np.sqrt(rows)
            if c.head_local:
                q, own = _embed_rows(q, h, D), _embed_rows(own, h, D)
            wq[b, h] = q
            # a partly tied key projection keeps scores tracking state similarity
            wk[b, h] = c.key_tie * wq[b, h] + np.sqrt(1.0 - c.key_tie ** 2) * own
    return ToyModel(c, states, wq, wk)


@dataclass(frozen=True)
class EntityRegion:
    """One entity: half-open text span ``[start, stop)`` and half-open grid rectangle."""

    name: str
    text_span: tuple[int, int]
    rect: tuple[int, int, int, int]  # (row0, col0, row1, col1), half-open

    def text_indices(self) -> np.ndarray:
        return np.arange(*self.text_span)

    def image_indices(self, config: ToyModelConfig) -> np.ndarray:
        r0, c0, r1, c1 = self.rect
        return np.array([config.image_index(r, col) for r in range(r0, r1) for col in range(c0, c1)],
                        dtype=np.int64)


@dataclass(frozen=True)
class LeakPair:
    source: int
    target: int
    delta: float
    channel: Channel = Channel.IMG_TXT
    # offsets into the target's text span that receive the text leak; None = whole span
    tokens: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "channel", Channel(self.channel))
        if self.tokens is not None:
            object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.delta < 0:
            raise ValueError("leak bias must be >= 0")


@dataclass(frozen=True)
class PlantSpec:
    """Additive score biases that create ground-truth entity signal and leakage.

    ``leak_window`` and ``self_window`` are half-open global-block intervals;
    None means every block.
    """

    entities: tuple[EntityRegion, ...]
    self_bias: float
    leak_pairs: tuple[LeakPair, ...] = ()
    leak_window: Optional[tuple[int, int]] = None
    self_window: Optional[tuple[int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "leak_pairs", tuple(self.leak_pairs))
        if self.self_bias < 0:
            raise ValueError("self bias must be >= 0")

    def validate(self, config: ToyModelConfig) -> None:
        spans: set[int] = set()
        cells: set[int] = set()
        H, W = config.grid
        for e in self.entities:
            t = set(range(*e.text_span))
            if not t or min(t) < 0 or max(t) >= config.text_tokens:
                raise ValueError(f"text span {e.text_span} outside the text tokens")
            r0, c0, r1, c1 = e.rect
            if not (0 <= r0 < r1 <= H and 0 <= c0 < c1 <= W):
                raise ValueError(f"rectangle {e.rect} outside grid {config.grid}")
            img = set(e.image_indices(config).tolist())
            if spans & t:
                raise ValueError("overlapping entity text spans")
            if cells & img:
                raise ValueError("overlapping entity regions")
            spans |= t
            cells |= img
        for p in self.leak_pairs:
            if not (0 <= p.source < len(self.entities) and 0 <= p.target < len(self.entities)):
                raise ValueError(f"leak pair {p} names an unknown entity")
            if p.source == p.target:
                raise ValueError("a leak pair needs two distinct entities")
            span = self.entities[p.target].text_span
            if p.tokens is not None and (not p.tokens or min(p.tokens) < 0
                                         or max(p.tokens) >= span[1] - span[0]):
                raise ValueError(f"leak tokens {p.tokens} outside the target text span")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["leak_pairs"] = [dict(asdict(p), channel=p.channel.value,
                                tokens=list(p.tokens) if p.tokens is not None else None)
                           for p in self.leak_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantSpec":
        win = d.get("leak_window")
        swin = d.get("self_window")
        return cls(
            entities=tuple(EntityRegion(e["name"], tuple(e["text_span"]), tuple(e["rect"]))
                           for e in d["entities"]),
            self_bias=float(d["self_bias"]),
            leak_pairs=tuple(LeakPair(p["source"], p["target"], float(p["delta"]), p["channel"],
                                      tuple(p["tokens"]) if p.get("tokens") is not None else None)
                             for p in d.get("leak_pairs", ())),
            leak_window=tuple(win) if win is not None else None,
            self_window=tuple(swin) if swin is not None else None,
        )


def _in_window(window, g: int) -> bool:
    return window is None or window[0] <= g < window[1]


def plant_bias(plant: PlantSpec, config: ToyModelConfig, global_block: int) -> np.ndarray:
    """Additive N x N bias for one global block."""
    plant.validate(config)
    N = config.n_tokens
    bias = np.zeros((N, N))
    regions = [e.image_indices(config) for e in plant.entities]
    spans = [e.text_indices() for e in plant.entities]
    if _in_window(plant.self_window, global_block):
        for img, txt in zip(regions, spans):
            bias[np.ix_(img, txt)] += plant.self_bias
    if _in_window(plant.leak_window, global_block):
        for p in plant.leak_pairs:
            if p.channel in (Channel.IMG_TXT, Channel.BOTH):
                cols = spans[p.target] if p.tokens is None else spans[p.target][list(p.tokens)]
                bias[np.ix_(regions[p.source], cols)] += p.delta
            if p.channel in (Channel.IMG_IMG, Channel.BOTH):
                bias[np.ix_(regions[p.source], regions[p.target])] += p.delta
    return bias


# (global_block, head-averaged raw scores, per-head raw scores) -> per-head scores
Hook = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RunTrace:
    config: ToyModelConfig
    raw: np.ndarray  # (total_blocks, heads, N, N)
    modified: Optional[np.ndarray]  # same shape, present when a hook ran
    final_states: np.ndarray
    plant: Optional[PlantSpec] = None
    label: str = "ORIGINAL"
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_fields(self) -> int:
        n = self.raw.shape[0] * self.raw.shape[1]
        return 2 * n if self.modified is not None else n

    def _scores(self, g: int, modified: bool) -> np.ndarray:
        if modified:
            return self.raw[g] if self.modified is None else self.modified[g]
        return self.raw[g]

    def field(self, step: int, block: int, head: int = -1, modified: bool = False) -> AttentionField:
        """Field at (step, block); ``head=-1`` gives the head average."""
        g = step * self.config.blocks_per_step + block
        s = self._scores(g, modified)
        scores = s.mean(axis=0) if head < 0 else s[head]
        return AttentionField(step, block, head, scores, self.config.roles, self.config.grid,
                              allow_neg_inf=modified)

    def averaged(self, modified: bool = False) -> np.ndarray:
        """Head-averaged scores, shape (total_blocks, N, N)."""
        s = self.raw if not modified or self.modified is None else self.modified
        return s.mean(axis=1)

    def iter_averaged(self):
        """Yield (global_block, head-averaged raw scores) in run order."""
        for g in range(self.raw.shape[0]):
            yield g, self.raw[g].mean(axis=0)


def run_diffusion(model: ToyModel | ToyModelConfig, plant: Optional[PlantSpec] = None,
                  hook: Optional[Hook] = None, label: Optional[str] = None) -> RunTrace:
    if isinstance(model, ToyModelConfig):
        model = init_model(model)
    c = model.config
    if plant is not None:
        plant.validate(c)
    N, H, d, G = c.n_tokens, c.heads, c.head_dim, c.total_blocks
    raw = np.empty((G, H, N, N))
    modified = np.empty((G, H, N, N)) if hook is not None else None
    h = model.states.copy()
    scale = c.logit_scale / np.sqrt(d)
    bias_cache: dict = {}
    for step in range(c.steps):
        for block in range(c.blocks_per_step):
            g = step * c.blocks_per_step + block
            q = h @ model.w_query[block]  # (H, N, d)
            k = h @ model.w_key[block]
            scores = (q @ k.transpose(0, 2, 1)) * scale
            if plant is not None:
                key = (_in_window(plant.self_window, g), _in_window(plant.leak_window, g))
                if key not in bias_cache:
                    bias_cache[key] = plant_bias(plant, c, g)
                scores = scores + bias_cache[key][None]
            raw[g] = scores
            if hook is not None:
                out = np.asarray(hook(g, scores.mean(axis=0), scores.copy()), dtype=np.float64)
                if out.shape != scores.shape:
                    raise ValueError(f"hook returned shape {out.shape}, expected {scores.shape}")
                modified[g] = out
                scores = out
            weights = softmax_rows(scores)
            v = h.reshape(N, H, d).transpose(1, 0, 2)
            update = (weights @ v).transpose(1, 0, 2).reshape(N, -1)
            h = h + c.state_mix * update
            h = h / np.sqrt(np.mean(h ** 2, axis=1, keepdims=True))
    return RunTrace(c, raw, modified, h, plant,
                    label or ("ORIGINAL" if hook is None else "HOOKED"))


def default_plant(config: ToyModelConfig, self_bias: float, leak_delta: float = 0.0,
                  channel: Channel = Channel.IMG_TXT, leak_window=None,
                  leak_tokens: Optional[tuple[int, ...]] = None) -> PlantSpec:
    """Two side-by-side entities with one-directional leakage from entity 1 into entity 0.

    Rectangles keep a one-cell margin from the grid border.
    """
    H, W = config.grid
    if H < 4 or W < 4:
        raise ValueError("the default plant needs a grid of at least 4x4")
    if config.text_tokens < 6:
        raise ValueError("the default plant needs at least 6 text tokens")
    mid = W // 2
    ents = (
        EntityRegion("entity0", (1, 3), (1, 1, H - 1, mid)),
        EntityRegion("entity1", (4, 6), (1, mid, H - 1, W - 1)),
    )
    pairs = (LeakPair(1, 0, leak_delta, channel, leak_tokens),) if leak_delta > 0 else ()
    return PlantSpec(ents, self_bias, pairs, leak_window=leak_window)


def unplanted_score_std(config: ToyModelConfig) -> float:
    """Std of head-averaged image->text scores of an unplanted run, pooled over blocks."""
    tr = run_diffusion(config)
    img = np.flatnonzero(config.roles == Role.IMAGE)
    txt = np.flatnonzero(config.roles == Role.TEXT)
    block = tr.averaged()[:, img][:, :, txt]
    return float(block.std())


def export_trace(trace: RunTrace, out_dir: str | Path, layout: Sequence = ()) -> Path:
    """Write a manifest plus one little-endian float32 file per (step, block).

    Each ``attn_s{step}_b{block}.f32`` holds the raw scores, row-major [heads][N][N];
    hooked runs add ``attn_mod_s{step}_b{block}.f32`` with -inf preserved.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = trace.config
    manifest = {
        "format": "deleaker-trace/1",
        "label": trace.label,
        "dims": {"steps": c.steps, "blocks_per_step": c.blocks_per_step, "heads": c.heads,
                 "n_tokens": c.n_tokens, "text_tokens": c.text_tokens, "grid": list(c.grid)},
        "roles": ["TEXT" if r == Role.TEXT else "IMAGE" for r in c.roles],
        "config": dict(asdict(c), grid=list(c.grid)),
        "plant": trace.plant.to_dict() if trace.plant is not None else None,
        "layout": [dict(name=name, text=list(map(int, idx))) for name, idx in layout],
        "dtype": "<f4",
        "has_modified": trace.modified is not None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for g in range(c.total_blocks):
        s, b = divmod(g, c.blocks_per_step)
        trace.raw[g].astype("<f4").tofile(out / f"attn_s{s}_b{b}.f32")
        if trace.modified is not None:
            trace.modified[g].astype("<f4").tofile(out / f"attn_mod_s{s}_b{b}.f32")
    return out


def load_trace(in_dir: str | Path) -> RunTrace:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    cfg = dict(manifest["config"])
    cfg["grid"] = tuple(cfg["grid"])
    c = ToyModelConfig(**cfg)
    shape = (c.heads, c.n_tokens, c.n_tokens)

    def read(prefix):
        arr = np.empty((c.total_blocks,) + shape)
        for g in range(c.total_blocks):
            s, b = divmod(g, c.blocks_per_step)
            arr[g] = np.fromfile(src / f"{prefix}_s{s}_b{b}.f32", dtype="<f4").reshape(shape)
        return arr

    raw = read("attn")
    mod = read("attn_mod") if manifest.get("has_modified") else None
    plant = PlantSpec.from_dict(manifest["plant"]) if manifest.get("plant") else None
    return RunTrace(c, raw, mod, np.empty((0, c.model_dim)), plant, manifest["label"],
                    meta={"layout": manifest.get("layout", [])})
