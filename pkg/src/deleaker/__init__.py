"""Entity-aware attention intervention against semantic leakage in joint-attention
text-to-image transformers, with a deterministic toy model to exercise it."""

__version__ = "0.1.0"

from .attn import AttentionField, Role, block_stats, scaled_scores, softmax_rows, subset_stats
from .intervention import (ABLATION_GRID, DeleakerConfig, DeleakerHook, Direction, ablation_configs,
                           apply_deleaker, cross_pair_stats, high_attention_pairs)
from .masking import (EntityLayout, EntityMaskSet, MaskBuilder, MaskHistory, accumulate,
                      build_masks, resolve_overlaps, smooth_mask_spatial, threshold_mask)
from .toy import (Channel, PlantSpec, RunTrace, ToyModelConfig, init_model, plant_bias,
                  run_diffusion)
