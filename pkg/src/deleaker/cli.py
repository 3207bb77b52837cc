"""Command-line entry point.

Subcommands: simulate, masks, analyze, ablate, assign, evaluate, report.
Every run writes its files under ``--out`` together with ``run_manifest.json``
(config echo, seeds, plant, sha256 of every output). Exit codes: 0 success,
1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import (PUBLISHED_ABLATION, LeakageTrace, distribution_csv, distribution_from_percentages,
                       distribution_summary, distribution_svg, leakage_csv, pair_leakage,
                       relative_difference, relative_difference_csv, relative_difference_svg,
                       run_mean_reduction)
from .assignment import assign_masks, read_matrix_csv, write_assignment_csv
from .evalkit import HttpClient, MockClient, ResponseCache, append_verdicts, read_cases, read_verdicts, run_batch
from .experiments import PLANTS, make_plant, original_masks, run_seed, summarize
from .intervention import TOGGLES, DeleakerConfig, DeleakerHook, Direction, ablation_configs, load_config
from .masking import Entity, EntityLayout, f1_score, load_masks, save_masks
from .toy import Channel, ToyModelConfig, default_plant, export_trace, load_trace, run_diffusion

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_help()}")


# ---------------------------------------------------------------- option groups


def _onoff(v: str) -> bool:
    v = v.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {v!r}")


def _grid(v: str) -> tuple[int, int]:
    try:
        h, w = v.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {v!r}") from None


def _seeds(v: str) -> list[int]:
    out: list[int] = []
    try:
        for part in v.split(","):
            if "-" in part.strip()[1:]:
                a, b = part.rsplit("-", 1)
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {v!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


_FLOAT_KEYS = ("alpha", "beta1", "beta2", "agg_start_frac", "agg_end_frac", "int_start_frac", "int_end_frac")
_BOOL_KEYS = TOGGLES + ("spatial_smoothing", "temporal_smoothing")


def _add_deleaker_opts(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("intervention config (flag > --config file > default)")
    g.add_argument("--config", help="JSON config file with flat keys (toggles.* for switches)")
    for key in _FLOAT_KEYS:
        g.add_argument("--" + key.replace("_", "-"), dest=key, type=float)
    for key in _BOOL_KEYS:
        g.add_argument("--" + key.replace("_", "-"), dest=key, type=_onoff, metavar="{on,off}")
    g.add_argument("--strengthen-direction", dest="strengthen_direction",
                   choices=[d.value for d in Direction])
    g.add_argument("--structuring-element", dest="structuring_element", choices=("square", "cross"))


def _add_toy_opts(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("toy model")
    g.add_argument("--toy-config", help="JSON file with toy model fields")
    g.add_argument("--text-tokens", type=int)
    g.add_argument("--image-grid", dest="image_grid", type=_grid, help="HxW, e.g. 8x8")
    g.add_argument("--heads", type=int)
    g.add_argument("--head-dim", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--blocks-per-step", type=int)
    g.add_argument("--state-mix", type=float)


def _add_plant_opts(p: argparse.ArgumentParser, default: str) -> None:
    g = p.add_argument_group("planted signal")
    g.add_argument("--plant", choices=PLANTS, default=default)
    g.add_argument("--self-mult", type=float, help="self bias in unplanted score stds")
    g.add_argument("--leak-mult", type=float, default=1.0, help="leak bias relative to the self bias")
    g.add_argument("--leak-channel", choices=[c.value for c in Channel], default=Channel.IMG_TXT.value)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deleaker", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"deleaker {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("simulate", help="toy runs with and without the intervention; traces + masks")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=_seeds, help="e.g. 0-9 or 1,4,7 (overrides --seed)")
    s.add_argument("--deleaker", type=_onoff, default=True, metavar="{on,off}")
    s.add_argument("--jobs", type=int, default=1)
    _add_plant_opts(s, "default")
    _add_toy_opts(s)
    _add_deleaker_opts(s)

    m = sub.add_parser("masks", help="extract entity masks from an exported trace")
    m.add_argument("--trace", required=True)
    m.add_argument("--out", required=True)
    _add_deleaker_opts(m)

    a = sub.add_parser("analyze", help="leakage progression and relative differences")
    a.add_argument("--original", required=True, help="trace directory of the original run")
    a.add_argument("--mitigated", action="append", default=[], help="trace directory (repeatable)")
    a.add_argument("--masks", help="mask file; default: extracted from the original trace")
    a.add_argument("--channel", choices=[c.value for c in Channel], default=Channel.IMG_TXT.value)
    a.add_argument("--out", required=True)
    _add_deleaker_opts(a)

    b = sub.add_parser("ablate", help="run the ablation toggle grid under a leakage plant")
    b.add_argument("--grid", choices=("table2",), default="table2")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--seeds", type=_seeds)
    b.add_argument("--jobs", type=int, default=1)
    _add_plant_opts(b, "leak")
    _add_toy_opts(b)
    _add_deleaker_opts(b)

    g = sub.add_parser("assign", help="optimal entity-to-mask assignment from a similarity CSV")
    g.add_argument("--in", dest="infile", required=True, help="CSV row_label,col_label,value")
    g.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="three-step comparative evaluation over a case manifest")
    e.add_argument("--cases", required=True, help="JSON-lines case manifest")
    e.add_argument("--out", required=True)
    e.add_argument("--client", choices=("mock", "http"), default="mock")
    e.add_argument("--mock-quality", help="JSON object: image handle -> quality score (mock only)")
    e.add_argument("--endpoint", help="HTTP endpoint URL (http client)")
    e.add_argument("--model", default="")
    e.add_argument("--api-key-env", default="DELEAKER_VLM_API_KEY")
    e.add_argument("--cache", help="JSON-lines response cache, reused across runs")
    e.add_argument("--retries", type=int, default=2, help="re-queries for an unparseable rank")
    e.add_argument("--jobs", type=int, default=1)

    r = sub.add_parser("report", help="verdict distributions as CSV and stacked-bar SVG")
    r.add_argument("--verdicts", action="append", default=[], help="verdict log (repeatable)")
    r.add_argument("--names", help="comma-separated row names for the verdict logs")
    r.add_argument("--reference", choices=("table2",), help="include the published ablation rows")
    r.add_argument("--out", required=True)
    return p


# ---------------------------------------------------------------- config resolution


def resolve_deleaker(args) -> DeleakerConfig:
    base = load_config(args.config) if getattr(args, "config", None) else DeleakerConfig()
    flat = {}
    for key in _FLOAT_KEYS + _BOOL_KEYS + ("strengthen_direction", "structuring_element"):
        v = getattr(args, key, None)
        if v is not None:
            flat[f"toggles.{key}" if key in TOGGLES else key] = v
    return DeleakerConfig.from_flat(flat, base)


def resolve_toy(args, seed: int) -> ToyModelConfig:
    kw = {}
    if getattr(args, "toy_config", None):
        kw = json.loads(Path(args.toy_config).read_text())
        known = {f.name for f in fields(ToyModelConfig)}
        unknown = set(kw) - known
        if unknown:
            raise DataError(f"unknown toy config keys: {sorted(unknown)}")
        if "grid" in kw:
            kw["grid"] = tuple(kw["grid"])
    for key in ("text_tokens", "heads", "head_dim", "steps", "blocks_per_step", "state_mix"):
        v = getattr(args, key, None)
        if v is not None:
            kw[key] = v
    if getattr(args, "image_grid", None) is not None:
        kw["grid"] = args.image_grid
    kw["seed"] = seed
    return ToyModelConfig(**kw)


def _seed_list(args) -> list[int]:
    return args.seeds if getattr(args, "seeds", None) else [args.seed]


def _plant_kwargs(args) -> dict:
    return dict(self_mult=args.self_mult, leak_mult=args.leak_mult, channel=Channel(args.leak_channel))


# ---------------------------------------------------------------- outputs


class _Outputs:
    """Tracks written files so the manifest can digest them."""

    def __init__(self, root: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: set[Path] = set()

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.add(p)
        return p

    def text(self, rel: str, content: str) -> Path:
        p = self.path(rel)
        p.write_text(content, encoding="utf-8", newline="\n")
        return p

    def json(self, rel: str, obj) -> Path:
        return self.text(rel, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def adopt_tree(self, rel: str) -> None:
        for p in sorted((self.root / rel).rglob("*")):
            if p.is_file():
                self.files.add(p)

    def manifest(self, command: str, args, **extra) -> Path:
        digests = {}
        for p in sorted(self.files):
            digests[p.relative_to(self.root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
        argv = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "jobs")}
        doc = {"tool": "deleaker", "version": __version__, "command": command,
               "arguments": json.loads(json.dumps(argv, default=_jsonable)),
               "output_dir": str(args.out), "outputs": digests}
        doc.update(json.loads(json.dumps(extra, default=_jsonable)))
        p = self.root / "run_manifest.json"
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if hasattr(o, "value"):
        return o.value
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not serialisable: {type(o)}")


def _layout_for(toy: ToyModelConfig, plant) -> EntityLayout:
    # without a plant, the default two-entity text spans still define the layout
    return EntityLayout.from_plant(plant if plant is not None else default_plant(toy, 0.0))


# ---------------------------------------------------------------- subcommands


def _simulate_one(toy: ToyModelConfig, plant_kind: str, plant_kw: dict, cfg: DeleakerConfig,
                  deleaker: bool, root: str) -> None:
    plant = make_plant(toy, plant_kind, **plant_kw)
    layout = _layout_for(toy, plant)
    base = Path(root) / f"seed{toy.seed}"
    orig = run_diffusion(toy, plant, label="ORIGINAL")
    export_trace(orig, base / "original", layout.as_pairs())
    save_masks(original_masks(orig, layout, cfg), base / "masks_original.json", layout.names)
    if deleaker:
        hook = DeleakerHook.for_model(layout, cfg, toy)
        tr = run_diffusion(toy, plant, hook, label="DELEAKER")
        export_trace(tr, base / "deleaker", layout.as_pairs())
        if hook.masks is not None:
            save_masks(hook.masks.freeze(), base / "masks_deleaker.json", layout.names)


def cmd_simulate(args) -> int:
    cfg = resolve_deleaker(args)
    seeds = _seed_list(args)
    out = _Outputs(args.out)
    toys = [resolve_toy(args, s) for s in seeds]
    jobs = [(t, args.plant, _plant_kwargs(args), cfg, args.deleaker, args.out) for t in toys]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            list(ex.map(_simulate_one, *zip(*jobs)))
    else:
        for j in jobs:
            _simulate_one(*j)
    for s in seeds:
        out.adopt_tree(f"seed{s}")
    plants = {}
    for t in toys:  # the self bias scales with each seed's unplanted score spread
        plant = make_plant(t, args.plant, **_plant_kwargs(args))
        plants[str(t.seed)] = plant.to_dict() if plant else None
    out.manifest("simulate", args, seeds=seeds, toy_config=dict(asdict(toys[0]), seed=None),
                 deleaker_config=cfg.to_flat(), plants=plants)
    return EXIT_OK


def _layout_from_trace(tr) -> EntityLayout:
    items = tr.meta.get("layout") or []
    if not items:
        raise DataError("trace manifest carries no entity layout")
    return EntityLayout(tuple(Entity(d["name"], np.array(d["text"], dtype=np.int64)) for d in items))


def _load_trace(path: str):
    try:
        return load_trace(path)
    except FileNotFoundError as e:
        raise DataError(f"cannot read trace {path}: {e}") from e


def cmd_masks(args) -> int:
    cfg = resolve_deleaker(args)
    tr = _load_trace(args.trace)
    layout = _layout_from_trace(tr)
    masks = original_masks(tr, layout, cfg)
    out = _Outputs(args.out)
    save_masks(masks, out.path("masks.json"), layout.names)
    summary = {"entities": []}
    for i, name in enumerate(layout.names):
        rec = {"name": name, "size": int(masks.masks[i].size)}
        if tr.plant is not None:
            truth = tr.plant.entities[i].image_indices(tr.config) - tr.config.text_tokens
            rec["f1_vs_plant"] = f1_score(masks.masks[i], truth)
        summary["entities"].append(rec)
    out.json("masks_summary.json", summary)
    out.manifest("masks", args, deleaker_config=cfg.to_flat(), toy_config=asdict(tr.config),
                 plant=tr.plant.to_dict() if tr.plant else None)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = resolve_deleaker(args)
    orig = _load_trace(args.original)
    layout = _layout_from_trace(orig)
    if args.masks:
        masks, _ = load_masks(args.masks)
        masks = masks.freeze()
    else:
        masks = original_masks(orig, layout, cfg)
    ch = Channel(args.channel)
    traces = [pair_leakage(orig, masks, layout, ch, cfg.beta1, cfg.beta2, label=orig.label)]
    lo, hi = cfg.int_window(orig.config.total_blocks)
    summary = {"window": [lo, hi], "original_mean": float(traces[0].flat()[lo:hi].mean()), "runs": []}
    diffs = []
    for k, path in enumerate(args.mitigated):
        tr = _load_trace(path)
        if tr.config != orig.config:
            raise DataError(f"{path}: run configuration differs from the original")
        label = tr.label if tr.label not in [t.label for t in traces] else f"{tr.label}#{k}"
        lt = pair_leakage(tr, masks, layout, ch, cfg.beta1, cfg.beta2, label=label)
        traces.append(lt)
        d = relative_difference(traces[0], lt)
        diffs.append((label, d))
        w = d.window(lo, hi)
        summary["runs"].append({"label": label, "mean": float(lt.flat()[lo:hi].mean()),
                                "reduction": run_mean_reduction(traces[0].flat()[lo:hi], lt.flat()[lo:hi]),
                                "negative_fraction": float(np.mean(w < 0))})
    out = _Outputs(args.out)
    out.text("leakage.csv", leakage_csv(traces))
    if diffs:
        out.text("relative_difference.csv", "".join(
            relative_difference_csv(d, label) if i == 0 else relative_difference_csv(d, label).split("\n", 1)[1]
            for i, (label, d) in enumerate(diffs)))
        out.text("relative_difference.svg",
                 relative_difference_svg([(l, d.values.ravel()) for l, d in diffs], (lo, hi)))
    out.json("summary.json", summary)
    out.manifest("analyze", args, deleaker_config=cfg.to_flat(), toy_config=asdict(orig.config))
    return EXIT_OK


def _ablate_one(toy, configs, plant_kind, plant_kw):
    return run_seed(toy, configs, plant_kind, **plant_kw)


def cmd_ablate(args) -> int:
    if args.plant == "none":
        raise UsageError("ablate needs a planted layout (--plant default or leak)")
    cfg = resolve_deleaker(args)
    seeds = _seed_list(args)
    configs = ablation_configs(cfg)
    toys = [resolve_toy(args, s) for s in seeds]
    kw = _plant_kwargs(args)
    if args.jobs > 1 and len(toys) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_ablate_one, toys, [configs] * len(toys), [args.plant] * len(toys),
                                  [kw] * len(toys)))
    else:
        results = [_ablate_one(t, configs, args.plant, kw) for t in toys]
    c = toys[0]
    window = cfg.int_window(c.total_blocks)
    orig_mean, effects = summarize(results, window)
    shape = (c.steps, c.blocks_per_step, 1)
    traces = [LeakageTrace(np.mean([r.leakage[label] for r in results], axis=0).reshape(shape),
                           ((0, 1),), label, Channel(args.leak_channel), ("entity0:entity1",))
              for label in ["ORIGINAL"] + [l for l, _ in configs]]
    out = _Outputs(args.out)
    out.text("leakage.csv", leakage_csv(traces))
    rows = ["label,reduction,negative_fraction,mean_leakage\n"]
    rows += [f"{e.label},{e.reduction!r},{e.negative_fraction!r},{e.mean_leakage!r}\n" for e in effects]
    out.text("ablation.csv", "".join(rows))
    series = [(t.label, relative_difference(traces[0], t).values.ravel()) for t in traces[1:]]
    out.text("ablation.svg", relative_difference_svg(series, window))
    out.json("summary.json", {"original_mean": orig_mean, "window": list(window),
                              "runs": [asdict(e) for e in effects],
                              "mask_f1": [r.mask_f1 for r in results]})
    plants = {str(t.seed): make_plant(t, args.plant, **kw).to_dict() for t in toys}
    out.manifest("ablate", args, seeds=seeds, toy_config=dict(asdict(c), seed=None),
                 deleaker_config=cfg.to_flat(), plants=plants, runs=[l for l, _ in configs])
    return EXIT_OK


def cmd_assign(args) -> int:
    try:
        text = Path(args.infile).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(str(e)) from e
    sim, rows, cols = read_matrix_csv(text)
    a, total = assign_masks(sim, rows, cols)
    out = _Outputs(args.out)
    out.text("assignment.csv", write_assignment_csv(a, sim))
    out.json("assignment_summary.json", {"total_similarity": total, "cost": a.cost,
                                         "columns": list(a.columns)})
    out.manifest("assign", args)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cases = read_cases(args.cases)
    if args.client == "http":
        if not args.endpoint:
            raise UsageError("--client http needs --endpoint")
        client = HttpClient(args.endpoint, args.model, args.api_key_env)
    else:
        quality = json.loads(Path(args.mock_quality).read_text()) if args.mock_quality else {}
        client = MockClient(quality={str(k): float(v) for k, v in quality.items()})
    cache = ResponseCache(args.cache) if args.cache else ResponseCache()
    verdicts = run_batch(client, cases, cache, jobs=args.jobs, max_retries=args.retries)
    out = _Outputs(args.out)
    log = out.path("verdicts.jsonl")
    log.write_text("")
    append_verdicts(verdicts, log)
    ok = [v for v in verdicts if v.ok]
    summary = {"cases": len(verdicts), "failed": len(verdicts) - len(ok)}
    if ok:
        out.text("distribution.csv", distribution_csv([("evaluated", distribution_summary(verdicts))]))
    out.json("summary.json", summary)
    out.manifest("evaluate", args, n_cases=len(cases))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    names = args.names.split(",") if args.names else [Path(p).stem for p in args.verdicts]
    if len(names) != len(args.verdicts):
        raise UsageError("--names must give one name per --verdicts file")
    for name, path in zip(names, args.verdicts):
        try:
            rows.append((name, distribution_summary(read_verdicts(path))))
        except OSError as e:
            raise DataError(str(e)) from e
    if args.reference == "table2":
        rows += [(label, distribution_from_percentages(p)) for label, p in PUBLISHED_ABLATION]
    if not rows:
        raise UsageError("nothing to report: give --verdicts and/or --reference")
    out = _Outputs(args.out)
    out.text("distribution.csv", distribution_csv(rows))
    out.text("distribution.svg", distribution_svg(rows))
    out.manifest("report", args)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "masks": cmd_masks, "analyze": cmd_analyze, "ablate": cmd_ablate,
            "assign": cmd_assign, "evaluate": cmd_evaluate, "report": cmd_report}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
        return COMMANDS[args.command](args)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"deleaker: data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
