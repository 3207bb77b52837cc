"""Leakage reduction of the ablation toggle grid under the leakage plant, next to the
published major-mitigation percentages of the same rows."""
import argparse
from concurrent.futures import ProcessPoolExecutor

from deleaker.analysis import PUBLISHED_ABLATION
from deleaker.experiments import LEAK_MULT, run_seed, summarize
from deleaker.intervention import DeleakerConfig, ablation_configs
from deleaker.toy import Channel, ToyModelConfig


def _one(seed, leak_mult, channel):
    return run_seed(ToyModelConfig(seed=seed), ablation_configs(), "leak", leak_mult=leak_mult,
                    channel=Channel(channel))


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--leak-mult", type=float, default=LEAK_MULT)
    p.add_argument("--channel", default="IMG_TXT", choices=[c.value for c in Channel])
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    seeds = range(args.seeds)
    with ProcessPoolExecutor(args.jobs) as ex:
        results = list(ex.map(_one, seeds, [args.leak_mult] * len(seeds), [args.channel] * len(seeds)))
    window = DeleakerConfig().int_window(ToyModelConfig().total_blocks)
    orig, effects = summarize(results, window)
    published = dict(PUBLISHED_ABLATION)
    print(f"original in-window mean leakage: {orig:.3f}  (window {window})")
    print(f"{'row':24s} {'reduction':>9s} {'neg.cells':>9s} {'published major':>15s}")
    for e in effects:
        print(f"{e.label:24s} {100 * e.reduction:8.1f}% {100 * e.negative_fraction:8.1f}% "
              f"{published[e.label][0]:14.2f}%")


if __name__ == "__main__":
    main()
