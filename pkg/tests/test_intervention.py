import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import high_pairs_scan, oracle_for, random_deleaker_instance

from deleaker.attn import softmax_rows
from deleaker.intervention import (ABLATION_GRID, TOGGLES, DeleakerConfig, DeleakerHook, Direction,
                                   ablation_configs, apply_deleaker, cross_pair_stats, frac_window,
                                   high_attention_pairs, load_config, save_config)
from deleaker.masking import Entity, EntityLayout, EntityMaskSet
from deleaker.toy import ToyModelConfig, default_plant, run_diffusion, unplanted_score_std


def _run(instance, cfg=None):
    per_head, avg, masks, layout, c, g, total, T = instance
    return apply_deleaker(per_head, avg, masks, layout, cfg or c, g, total, T)


def test_defaults_and_windows():
    c = DeleakerConfig()
    assert (c.alpha, c.beta1, c.beta2) == (1.2, 0.9, 2.0)
    assert (c.img_img_suppress, c.img_txt_suppress, c.self_strengthen, c.txt_txt_suppress) == (True, True, True, False)
    assert c.strengthen_direction is Direction.IMG_QUERY_TXT_KEY
    assert c.agg_window(1140) == (12, 456) and c.int_window(1140) == (57, 741)
    assert c.agg_window(80) == (1, 32) and c.int_window(80) == (4, 52)
    assert abs(c.agg_end_frac - 0.40) < 1e-12 and abs(c.int_end_frac - 0.65) < 1e-12


def test_frac_window_exact_products():
    assert frac_window(0.25, 0.5, 8) == (2, 4)
    assert frac_window(0.0, 1.0, 7) == (0, 7)


def test_config_validation():
    with pytest.raises(ValueError):
        DeleakerConfig(agg_start_frac=0.5, agg_end_frac=0.4)
    with pytest.raises(ValueError):
        DeleakerConfig(int_end_frac=1.5)
    with pytest.raises(ValueError):
        DeleakerConfig(alpha=0)
    with pytest.raises(ValueError):
        DeleakerConfig(beta2=-1)
    with pytest.raises(ValueError):
        DeleakerConfig(structuring_element="disk")


def test_config_file_roundtrip(tmp_path):
    c = DeleakerConfig(alpha=1.5, txt_txt_suppress=True, strengthen_direction="BOTH")
    save_config(c, tmp_path / "c.json")
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["toggles.txt_txt_suppress"] is True and doc["strengthen_direction"] == "BOTH"
    assert load_config(tmp_path / "c.json") == c


def test_config_unknown_keys_rejected():
    with pytest.raises(ValueError, match="unknown"):
        DeleakerConfig.from_flat({"gamma": 1})
    with pytest.raises(ValueError, match="unknown"):
        DeleakerConfig.from_flat({"img_img_suppress": True})  # toggles need the prefix
    with pytest.raises(ValueError):
        DeleakerConfig.from_flat({"toggles.self_strengthen": "yes"})
    base = DeleakerConfig(alpha=2.0)
    assert DeleakerConfig.from_flat({"beta1": 1}, base) == DeleakerConfig(alpha=2.0, beta1=1.0)


def test_cross_pair_stats_examples():
    a = np.array([[7.0, 7.0], [7.0, 7.0]])
    assert cross_pair_stats(a, [0], [1]) == (7.0, 0.0)
    b = np.array([[0.0, 1.0, 3.0]])
    assert cross_pair_stats(b, [0], [1, 2]) == (2.0, 1.0)
    assert cross_pair_stats(b, [], [1]) is None


def test_high_pairs_examples(rng):
    a = rng.standard_normal((20, 20))
    rows, cols = np.arange(10), np.arange(10, 20)
    q, k = high_attention_pairs(a, rows, cols, 2.0)
    assert set(zip(q.tolist(), k.tolist())) == high_pairs_scan(a, rows.tolist(), cols.tolist(), 2.0)
    q0, k0 = high_attention_pairs(a, rows, cols, 0.0)
    mu = a[:10, 10:].mean()
    assert len(q0) == int((a[:10, 10:] > mu).sum())
    q, k = high_attention_pairs(np.ones((4, 4)), [0, 1], [2, 3], 2.0)
    assert q.size == 0


def test_alpha_example():
    layout = EntityLayout((Entity("a", [0]), Entity("b", [1])))
    masks = EntityMaskSet(([0], [1]), (1, 2), frozen=True)
    ph = np.zeros((1, 4, 4))
    ph[0, 2, 0] = 2.0
    out = apply_deleaker(ph, ph[0], masks, layout, DeleakerConfig(), 5, 10, 2)
    assert out[0, 2, 0] == 2.0 * 1.2
    assert np.isneginf(out[0, 2, 1]) and np.isneginf(out[0, 3, 0])
    w = softmax_rows(out[0])
    assert w[2, 1] == 0.0 and w[3, 0] == 0.0


def test_empty_masks_identity(rng):
    layout = EntityLayout((Entity("a", [0]), Entity("b", [1])))
    ph = rng.standard_normal((2, 6, 6))
    masks = EntityMaskSet(([], []), (2, 2), frozen=True)
    cfg = DeleakerConfig()  # txt-txt suppression off
    out = apply_deleaker(ph, ph.mean(0), masks, layout, cfg, 20, 40, 2)
    assert np.array_equal(out, ph)
    assert apply_deleaker(ph, ph.mean(0), None, layout, cfg, 20, 40, 2) is ph


def test_identity_outside_window(rng):
    for _ in range(30):
        inst = random_deleaker_instance(rng)
        per_head, avg, masks, layout, cfg, g, total, T = inst
        lo, hi = cfg.int_window(total)
        for g2 in (lo - 1, hi, hi + 3):
            if g2 >= 0:
                out = apply_deleaker(per_head, avg, masks, layout, cfg, g2, total, T)
                assert np.array_equal(out, per_head)


def test_errors():
    layout = EntityLayout((Entity("a", [0]), Entity("b", [1])))
    ph = np.zeros((1, 4, 4))
    with pytest.raises(ValueError, match="overlap"):
        apply_deleaker(ph, ph[0], EntityMaskSet(([0], [0, 1]), (1, 2), True), layout,
                       DeleakerConfig(), 5, 10, 2)
    with pytest.raises(ValueError, match="frozen"):
        apply_deleaker(ph, ph[0], EntityMaskSet(([0], [1]), (1, 2)), layout,
                       DeleakerConfig(), 5, 10, 2)


def test_matches_cell_oracle(rng):
    for _ in range(60):
        inst = random_deleaker_instance(rng)
        assert np.array_equal(_run(inst), oracle_for(inst))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_locality_and_row_survival(seed):
    inst = random_deleaker_instance(np.random.default_rng(seed))
    per_head, avg, masks, layout, cfg, g, total, T = inst
    cfg = cfg.with_toggles(img_img_suppress=True, img_txt_suppress=True, self_strengthen=True,
                           txt_txt_suppress=True, strengthen_direction=Direction.BOTH)
    g = cfg.int_window(total)[0]
    out = apply_deleaker(per_head, avg, masks, layout, cfg, g, total, T)
    # locality: unchanged cells are exactly those no case governs
    governed = np.zeros(per_head.shape[1:], bool)
    img = [masks.tokens(i, T) for i in range(len(masks))]
    txt = [layout.text(i) for i in range(len(layout))]
    for i in range(len(layout)):
        for j in range(len(layout)):
            blocks = [(img[i], img[j]), (img[i], txt[j]), (txt[i], txt[j])] if i != j else \
                     [(img[i], txt[i]), (txt[i], img[i])]
            for r, c in blocks:
                governed[np.ix_(r, c)] = True
    assert np.array_equal(out[:, ~governed], per_head[:, ~governed])
    # row survival: no row is entirely suppressed
    assert not np.isneginf(out).all(axis=2).any()
    softmax_rows(out[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ablation_compositionality(seed):
    inst = random_deleaker_instance(np.random.default_rng(seed))
    per_head, avg, masks, layout, cfg, g, total, T = inst
    g = cfg.int_window(total)[0]
    cfg = cfg.with_toggles(alpha=1.7)  # alpha != 1 so strengthened cells visibly change
    off = {t: False for t in TOGGLES}
    union = np.zeros(per_head.shape, bool)
    for t in TOGGLES:
        one = cfg.with_toggles(**dict(off, **{t: True}))
        changed = apply_deleaker(per_head, avg, masks, layout, one, g, total, T) != per_head
        changed |= np.isneginf(apply_deleaker(per_head, avg, masks, layout, one, g, total, T))
        union |= changed
    on = cfg.with_toggles(**{t: True for t in TOGGLES})
    out = apply_deleaker(per_head, avg, masks, layout, on, g, total, T)
    # zero raw scores stay zero under multiplication; compare governed sets modulo those
    all_changed = out != per_head
    assert np.array_equal(all_changed, union & ((per_head != 0) | np.isneginf(out)))


def test_h_set_soundness(rng):
    for _ in range(30):
        per_head, avg, masks, layout, cfg, g, total, T = random_deleaker_instance(rng)
        cfg = cfg.with_toggles(img_img_suppress=True, img_txt_suppress=False, self_strengthen=False,
                               txt_txt_suppress=False)
        g = cfg.int_window(total)[0]
        out = apply_deleaker(per_head, avg, masks, layout, cfg, g, total, T)
        sup = set(zip(*np.nonzero(np.isneginf(out[0]))))
        expected = set()
        img = [masks.tokens(i, T).tolist() for i in range(len(masks))]
        for i, j in layout.pairs():
            if img[i] and img[j]:
                expected |= high_pairs_scan(avg, img[i], img[j], cfg.beta2)
        assert {(int(a), int(b)) for a, b in sup} == expected


def test_ablation_grid_labels():
    labels = [lab for lab, _ in ABLATION_GRID]
    assert labels == ["DeLeaker", "W/O Image-Image(-)", "W/O Image-Text(-)", "W/O Image-Text(+)",
                      "With Text-Text(-)", "Only Image-Image(-)", "Only Image-Text(-)",
                      "Only Image-Text(+)"]
    cfgs = dict(ablation_configs())
    assert cfgs["DeLeaker"] == DeleakerConfig()
    assert cfgs["Only Image-Text(+)"].self_strengthen and not cfgs["Only Image-Text(+)"].img_txt_suppress


def test_hook_in_toy_run():
    c = ToyModelConfig(text_tokens=8, heads=2, head_dim=8, steps=6, blocks_per_step=2, seed=1)
    plant = default_plant(c, 5 * unplanted_score_std(c))
    layout = EntityLayout.from_plant(plant)
    hook = DeleakerHook.for_model(layout, DeleakerConfig(), c)
    tr = run_diffusion(c, plant, hook)
    lo, hi = DeleakerConfig().int_window(c.total_blocks)
    base = run_diffusion(c, plant)
    assert np.array_equal(tr.raw[:lo + 1], base.raw[:lo + 1])
    for g in range(c.total_blocks):
        if lo <= g < hi:
            assert np.isneginf(tr.modified[g]).any()
        else:
            assert np.array_equal(tr.modified[g], tr.raw[g])
    assert hook.masks.frozen and all(len(m) for m in hook.masks.masks)
