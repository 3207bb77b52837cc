"""Acceptance criteria: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and shown in pytest's terminal summary under
"acceptance criteria".
"""
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from acceptance_log import record
from oracles import (high_pairs_scan, mean_std, min_assignment_cost, oracle_for,
                     random_deleaker_instance, rank_pearson, threshold_scan,
                     weighted_fleiss_kappa)

from deleaker.analysis import distribution_summary
from deleaker.assignment import hungarian
from deleaker.attn import subset_stats
from deleaker.cli import dispatch
from deleaker.evalkit import (RANK_TOKENS, ComparisonCase, Label, MockClient, ResponseCache,
                              fleiss_kappa_qw, randomize_order, resolve_verdict, run_batch,
                              spearman_rho, write_cases)
from deleaker.experiments import make_plant, original_masks, run_seed, summarize
from deleaker.intervention import (DeleakerConfig, DeleakerHook, ablation_configs, apply_deleaker,
                                   high_attention_pairs)
from deleaker.masking import EntityLayout, EntityMaskSet, MaskHistory, f1_score, threshold_mask
from deleaker.toy import ToyModelConfig, run_diffusion

N_SEEDS_MITIGATION = 50


# ------------------------------------------------------------------ 1


def test_c01_equation_oracle():
    rng = np.random.default_rng(20240601)
    mismatches, in_window, touched = 0, 0, 0
    for _ in range(200):
        inst = random_deleaker_instance(rng)
        per_head, avg, masks, layout, cfg, g, total, T = inst
        out = apply_deleaker(per_head, avg, masks, layout, cfg, g, total, T)
        ref = oracle_for(inst)
        lo, hi = cfg.int_window(total)
        in_window += lo <= g < hi
        same = np.array_equal(out, ref)
        untouched = ref == per_head
        same &= np.array_equal(out[untouched], per_head[untouched])
        touched += int((~untouched).any())
        mismatches += not same
    ok = record(1, "apply_deleaker vs per-cell case evaluator", mismatches == 0,
                f"200 instances ({in_window} in window, {touched} modified), {mismatches} mismatches")
    assert ok


# ------------------------------------------------------------------ 2


def test_c02_threshold_oracle():
    rng = np.random.default_rng(7)
    worst, bad = 0.0, 0
    for _ in range(200):
        n_cells = int(rng.integers(4, 65))
        means = rng.standard_normal((1, n_cells)) * rng.uniform(0.1, 5)
        beta1 = float(rng.uniform(-1, 3))
        got = threshold_mask(MaskHistory(means, 1), 0, beta1).tolist()
        bad += got != threshold_scan(means[0].tolist(), beta1)

        N = int(rng.integers(6, 30))
        field = rng.standard_normal((N, N)) * 2
        perm = rng.permutation(N)
        k = int(rng.integers(1, N - 1))
        rows, cols = np.sort(perm[:k]), np.sort(perm[k:k + int(rng.integers(1, N - k + 1))])
        beta2 = float(rng.uniform(0, 3))
        q, kk = high_attention_pairs(field, rows, cols, beta2)
        bad += set(zip(q.tolist(), kk.tolist())) != high_pairs_scan(field, rows.tolist(), cols.tolist(), beta2)
        mu, sigma = subset_stats(field, rows, cols)
        mu_r, sigma_r = mean_std([field[a, b] for a in rows for b in cols])
        worst = max(worst, abs(mu - mu_r), abs(sigma - sigma_r))
    ok = record(2, "threshold_mask / high_attention_pairs vs exhaustive scans", bad == 0 and worst <= 1e-9,
                f"200 instances each, {bad} set mismatches, max |stat diff| {worst:.2e}")
    assert ok


# ------------------------------------------------------------------ 3


def test_c03_mask_recovery():
    cfg = DeleakerConfig()
    f1s = []
    for seed in range(20):
        toy = ToyModelConfig(seed=seed)
        plant = make_plant(toy, "default")  # self bias 5 unplanted stds, no leak
        assert not plant.leak_pairs
        layout = EntityLayout.from_plant(plant)
        masks = original_masks(run_diffusion(toy, plant), layout, cfg)
        f1s += [f1_score(m, e.image_indices(toy) - toy.text_tokens)
                for m, e in zip(masks.masks, plant.entities)]
    ok = record(3, "mask recovery F1 on planted rectangles", min(f1s) == 1.0,
                f"20 seeds x 2 entities, min F1 {min(f1s):.4f}")
    assert ok


# ------------------------------------------------------------------ 4 and 5

ABLATION_LABELS = ("DeLeaker", "Only Image-Text(+)", "Only Image-Text(-)", "Only Image-Image(-)")


@pytest.fixture(scope="module")
def mitigation():
    configs = [(label, cfg) for label, cfg in ablation_configs() if label in ABLATION_LABELS]
    results = [run_seed(ToyModelConfig(seed=s), configs, "leak") for s in range(N_SEEDS_MITIGATION)]
    window = DeleakerConfig().int_window(ToyModelConfig().total_blocks)
    orig_mean, effects = summarize(results, window)
    return orig_mean, {e.label: e for e in effects}, window


def test_c04_mitigation_direction(mitigation):
    orig_mean, eff, window = mitigation
    full = eff["DeLeaker"]
    ok = orig_mean >= 0.5 and full.negative_fraction >= 0.9 and full.reduction >= 0.30
    record(4, "mitigation direction (IMG_TXT plant)", ok,
           f"{N_SEEDS_MITIGATION} seeds, window {window}: original mean leakage {orig_mean:.3f} (>= 0.5), "
           f"negative cells {100 * full.negative_fraction:.1f}% (>= 90%), "
           f"run-mean reduction {100 * full.reduction:.1f}% (>= 30%)")
    assert orig_mean >= 0.5
    assert full.negative_fraction >= 0.9
    assert full.reduction >= 0.30


@pytest.mark.xfail(strict=True, reason="the toy model does not reproduce Only Image-Text(+) >= "
                   "Only Image-Text(-); see README 'Known deviations'")
def test_c05_ablation_ordering(mitigation):
    _, eff, _ = mitigation
    red = [eff[label].reduction for label in ABLATION_LABELS]
    gaps = [a - b for a, b in zip(red, red[1:])]
    ok = all(g >= 0 for g in gaps)
    record(5, "ablation ordering full >= IT(+) >= IT(-) >= II(-)", ok,
           "reductions " + ", ".join(f"{label} {100 * r:.1f}%" for label, r in zip(ABLATION_LABELS, red))
           + "; gaps " + ", ".join(f"{100 * g:+.1f}" for g in gaps))
    assert ok


# ------------------------------------------------------------------ 6


def test_c06_non_intrusiveness():
    checks = []
    for seed in range(5):
        toy = ToyModelConfig(seed=seed)
        plant = make_plant(toy, "leak")
        layout = EntityLayout.from_plant(plant)
        base = run_diffusion(toy, plant)
        cfg = DeleakerConfig()
        empty = EntityMaskSet(((), ()), toy.grid, frozen=True)

        def empty_hook(g, avg, ph):
            return apply_deleaker(ph, avg, empty, layout, cfg, g, toy.total_blocks, toy.text_tokens)

        tr = run_diffusion(toy, plant, empty_hook)
        checks.append(np.array_equal(tr.raw, base.raw) and np.array_equal(tr.modified, base.raw)
                      and np.array_equal(tr.final_states, base.final_states))
        # a window that closes before the run starts: every block is out of window
        never = DeleakerConfig(int_start_frac=0.0, int_end_frac=1e-6)
        tr = run_diffusion(toy, plant, DeleakerHook.for_model(layout, never, toy))
        checks.append(np.array_equal(tr.raw, base.raw) and np.array_equal(tr.modified, base.raw)
                      and np.array_equal(tr.final_states, base.final_states))
        # default window: out-of-window blocks are untouched, and nothing changes before it opens
        tr = run_diffusion(toy, plant, DeleakerHook.for_model(layout, cfg, toy))
        lo, hi = cfg.int_window(toy.total_blocks)
        outside = [g for g in range(toy.total_blocks) if not lo <= g < hi]
        checks.append(np.array_equal(tr.raw[:lo + 1], base.raw[:lo + 1])
                      and all(np.array_equal(tr.modified[g], tr.raw[g]) for g in outside))
    ok = record(6, "non-intrusiveness (empty masks, out-of-window blocks)", all(checks),
                f"{sum(checks)}/{len(checks)} bit-identical trace checks over 5 seeds")
    assert ok


# ------------------------------------------------------------------ 7


def test_c07_hungarian():
    rng = np.random.default_rng(99)
    bad = 0
    sizes = Counter()
    for t in range(200):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(n, 8))
        sizes[n] += 1
        c = rng.uniform(-10, 10, (n, m)) if t % 2 else rng.integers(0, 6, (n, m)).astype(float)
        bad += hungarian(c).cost != min_assignment_cost(c)
    f1 = hungarian([[5.0]])
    f2 = hungarian([[1.0, 2.0], [2.0, 1.0]])
    fixtures = f1.columns == (0,) and f1.cost == 5.0 and f2.columns == (0, 1) and f2.cost == 2.0
    ok = record(7, "Hungarian vs brute-force permutation minimum", bad == 0 and fixtures,
                f"200 matrices, n<=7 (rows per size {dict(sorted(sizes.items()))}), {bad} mismatches; "
                f"1x1 and 2x2 fixtures {'exact' if fixtures else 'WRONG'}")
    assert ok


# ------------------------------------------------------------------ 8


def test_c08_statistics():
    kappa_fixtures = [
        [[5, 5, 4], [3, 2, 3], [1, 1, 2]],
        [[1, 2], [2, 3], [4, 4], [5, 3]],
        [[3, 3, 3, 2], [1, 5, 2, 4], [4, 4, 5, 5], [2, 1, 1, 1], [3, 4, 3, 3]],
    ]
    rho_fixtures = [([1, 2, 2, 4], [1, 3, 2, 4]), ([3, 1, 4, 1, 5, 9, 2, 6], [2, 7, 1, 8, 2, 8, 1, 8]),
                    ([10, 20, 30, 40, 50], [5, 4, 3, 1, 2])]
    dk = max(abs(fleiss_kappa_qw(r) - weighted_fleiss_kappa(r)) for r in kappa_fixtures)
    dr = max(abs(spearman_rho(x, y) - rank_pearson(x, y)) for x, y in rho_fixtures)
    perfect = fleiss_kappa_qw([[1, 1, 1], [2, 2, 2], [4, 4, 4], [5, 5, 5]])
    reversed_rho = spearman_rho([1, 2, 3, 4, 5, 6], [6, 5, 4, 3, 2, 1])
    ok = dk <= 1e-9 and dr <= 1e-9 and perfect == 1.0 and reversed_rho == -1.0
    record(8, "weighted kappa and Spearman rho vs hand-derived oracles", ok,
           f"max |kappa diff| {dk:.1e}, max |rho diff| {dr:.1e}, perfect kappa {perfect}, "
           f"reversed rho {reversed_rho}")
    assert ok


# ------------------------------------------------------------------ 9

# candidate-shown-second token for each true label
_TOKEN = {Label.MAJOR_IMPROVE: "2maj", Label.MINOR_IMPROVE: "2min", Label.NO_CHANGE: "3",
          Label.MINOR_DEGRADE: "1min", Label.MAJOR_DEGRADE: "1maj"}
_SWAP = {"2maj": "1maj", "2min": "1min", "3": "3", "1min": "2min", "1maj": "2maj"}


def test_c09_eval_pipeline():
    truth = {f"case{i:02d}": list(Label)[i % 5] for i in range(20)}
    cases = [ComparisonCase(cid, "a zebra and a horse", ("zebra", "horse"), f"{cid}-orig.png",
                            f"{cid}-cand.png", (b"z", b"h"), seed=i)
             for i, cid in enumerate(sorted(truth))]

    def script(req):
        if req.stage != "step3":
            return f"{req.stage} notes"
        first, second = req.images()
        cid = first.split("-")[0]
        tok = _TOKEN[truth[cid]]
        return f"Step by step... Rank: {tok if second.endswith('cand.png') else _SWAP[tok]}"

    client = MockClient(script=script)
    cache = ResponseCache()
    verdicts = run_batch(client, cases, cache)
    got = Counter(v.label for v in verdicts)
    expected = Counter(truth.values())
    orders = Counter(v.candidate_first for v in verdicts)
    calls = client.calls
    run_batch(client, cases, cache)
    repeat_calls = client.calls - calls
    mirror = {Label(6 - int(lab)) for lab in Label}
    mirroring = all(resolve_verdict(t, True) is Label(6 - int(resolve_verdict(t, False))) for t in RANK_TOKENS)
    pct_sum = sum(distribution_summary(verdicts).percentages)
    ok = (got == expected and len(orders) == 2 and mirroring and mirror == set(Label)
          and repeat_calls == 0 and abs(pct_sum - 100) <= 0.01)
    record(9, "evaluation pipeline with scripted mock", ok,
           f"20 cases, verdict multiset {'exact' if got == expected else dict(got)}, shown orders "
           f"{dict(orders)}, mirroring {'holds' if mirroring else 'BROKEN'} for {len(RANK_TOKENS)} tokens, "
           f"{calls} first-pass / {repeat_calls} repeat client calls, percentages sum {pct_sum:.2f}")
    assert ok
    assert all(v.ok for v in verdicts)
    assert [randomize_order(c.seed) for c in cases] == [v.candidate_first for v in verdicts]


# ------------------------------------------------------------------ 10

TOY = ["--text-tokens", "8", "--image-grid", "8x8", "--heads", "2", "--head-dim", "8",
       "--steps", "5", "--blocks-per-step", "2"]


def _digests(out: Path) -> dict:
    return json.loads((out / "run_manifest.json").read_text())["outputs"]


def test_c10_cli_determinism(tmp_path):
    write_cases([ComparisonCase(f"c{i}", "p", ("cat", "dog"), "o.png", f"c{i}.png", (), i)
                 for i in range(5)], tmp_path / "cases.jsonl")
    (tmp_path / "q.json").write_text(json.dumps({f"c{i}.png": i - 2 for i in range(5)}))
    (tmp_path / "sim.csv").write_text("row_label,col_label,value\nA,m0,1\nA,m1,2\nB,m0,2\nB,m1,1\n")
    sim = tmp_path / "sim"
    assert dispatch(["simulate", "--seed", "7", "--plant", "leak", "--out", str(sim)] + TOY) == 0
    trace = str(sim / "seed7" / "original")
    commands = {
        "simulate": ["simulate", "--seed", "7", "--plant", "leak", "--deleaker", "on"] + TOY,
        "masks": ["masks", "--trace", trace],
        "analyze": ["analyze", "--original", trace, "--mitigated", str(sim / "seed7" / "deleaker")],
        "ablate": ["ablate", "--grid", "table2", "--seeds", "0-1"] + TOY,
        "assign": ["assign", "--in", str(tmp_path / "sim.csv")],
        "evaluate": ["evaluate", "--cases", str(tmp_path / "cases.jsonl"),
                     "--mock-quality", str(tmp_path / "q.json")],
        "report": ["report", "--reference", "table2"],
    }
    same = {}
    for name, argv in commands.items():
        runs = []
        for k in range(2):
            out = tmp_path / f"{name}{k}"
            extra = ["--verdicts", str(tmp_path / "evaluate0" / "verdicts.jsonl")] if name == "report" else []
            assert dispatch(argv + extra + ["--out", str(out)]) == 0
            runs.append(_digests(out))
        same[name] = runs[0] == runs[1] and len(runs[0]) > 0
    ok = all(same.values())
    record(10, "CLI reruns give byte-identical output digests", ok,
           ", ".join(f"{k} {'same' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok
