"""Planted-leakage experiments on the toy model: original vs intervened runs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .analysis import pair_leakage, run_mean_reduction
from .intervention import DeleakerConfig, DeleakerHook
from .masking import EntityLayout, EntityMaskSet, build_masks, f1_score
from .toy import (Channel, PlantSpec, RunTrace, ToyModelConfig, default_plant, init_model,
                  run_diffusion, unplanted_score_std)

PLANTS = ("none", "default", "leak")

# Self bias in units of the unplanted score std: mask-recovery plant / leakage plant.
DEFAULT_SELF_MULT = 5.0
LEAK_SELF_MULT = 8.0
# The leakage plant's bias relative to its self bias. With the leak equal to
# the self bias the original run's in-window leakage proportion averages about
# one half over seeds 0..49; larger ratios saturate the metric.
LEAK_MULT = 1.0


def make_plant(config: ToyModelConfig, kind: str = "default", self_mult: Optional[float] = None,
               leak_mult: float = LEAK_MULT, channel: Channel = Channel.IMG_TXT) -> Optional[PlantSpec]:
    """Two-entity plant scaled by the unplanted score spread.

    ``default``: self bias ``self_mult * std`` (5 by default), no leakage.
    ``leak``: self bias 8 std by default plus a leak from entity 1 into entity
    0 of ``leak_mult`` times the self bias, active for the whole run.
    """
    if kind == "none":
        return None
    if kind not in PLANTS:
        raise ValueError(f"unknown plant {kind!r}")
    if self_mult is None:
        self_mult = LEAK_SELF_MULT if kind == "leak" else DEFAULT_SELF_MULT
    gamma = self_mult * unplanted_score_std(config)
    delta = leak_mult * gamma if kind == "leak" else 0.0
    return default_plant(config, gamma, delta, Channel(channel))


def original_masks(trace: RunTrace, layout: EntityLayout, cfg: DeleakerConfig) -> EntityMaskSet:
    c = trace.config
    image_idx = np.arange(c.text_tokens, c.n_tokens)
    return build_masks(trace.iter_averaged(), layout, c.grid, image_idx,
                       cfg.agg_window(c.total_blocks), cfg.beta1, cfg.spatial_smoothing,
                       cfg.temporal_smoothing, cfg.structuring_element)


@dataclass
class SeedResult:
    seed: int
    leakage: dict[str, np.ndarray]  # run label -> pair-averaged leakage per global block
    mask_f1: list[float]
    traces: dict[str, RunTrace] = field(default_factory=dict)
    masks: Optional[EntityMaskSet] = None


def run_seed(toy: ToyModelConfig, configs: Sequence[tuple[str, DeleakerConfig]],
             plant_kind: str = "leak", self_mult: Optional[float] = None,
             leak_mult: float = LEAK_MULT,
             channel: Channel = Channel.IMG_TXT, keep_traces: bool = False) -> SeedResult:
    """One original run plus one intervened run per config, all under the same plant.

    Leakage of every run is measured on the plant's channel against the
    original run's masks on raw (pre-intervention) fields, with the first
    config's thresholds.
    """
    plant = make_plant(toy, plant_kind, self_mult, leak_mult, channel)
    if plant is None:
        raise ValueError("leakage experiments need a planted layout")
    layout = EntityLayout.from_plant(plant)
    model = init_model(toy)
    ref = configs[0][1] if configs else DeleakerConfig()
    orig = run_diffusion(model, plant, label="ORIGINAL")
    masks = original_masks(orig, layout, ref)
    truth = [e.image_indices(toy) - toy.text_tokens for e in plant.entities]
    f1 = [f1_score(masks.masks[i], truth[i]) for i in range(len(truth))]
    out = {"ORIGINAL": pair_leakage(orig, masks, layout, channel, ref.beta1, ref.beta2).flat()}
    traces = {"ORIGINAL": orig} if keep_traces else {}
    for label, cfg in configs:
        tr = run_diffusion(model, plant, DeleakerHook.for_model(layout, cfg, toy), label=label)
        out[label] = pair_leakage(tr, masks, layout, channel, ref.beta1, ref.beta2).flat()
        if keep_traces:
            traces[label] = tr
    return SeedResult(toy.seed, out, f1, traces, masks)


@dataclass(frozen=True)
class EffectSummary:
    label: str
    reduction: float  # relative reduction of the in-window run mean
    negative_fraction: float  # in-window blocks where the seed-mean leakage dropped
    mean_leakage: float


def summarize(results: Sequence[SeedResult], window: tuple[int, int]) -> tuple[float, list[EffectSummary]]:
    """Original in-window mean leakage and per-label effects, averaged over seeds."""
    lo, hi = window
    orig = np.mean([r.leakage["ORIGINAL"][lo:hi] for r in results], axis=0)
    labels = [k for k in results[0].leakage if k != "ORIGINAL"]
    out = []
    for label in labels:
        m = np.mean([r.leakage[label][lo:hi] for r in results], axis=0)
        rel = (m - orig) / np.maximum(orig, 1e-9)
        out.append(EffectSummary(label, run_mean_reduction(orig, m), float(np.mean(rel < 0)),
                                 float(m.mean())))
    return float(orig.mean()), out
