"""Three-step comparative evaluation with the deterministic mock client.

Each case's candidate image gets a quality score; the mock ranks the two shown
images by quality, so the resulting distribution follows the scores whatever
order the images were shown in.
"""
import argparse

import numpy as np

from deleaker.analysis import distribution_summary
from deleaker.evalkit import ComparisonCase, MockClient, ResponseCache, run_batch


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--cases", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    rng = np.random.default_rng(args.seed)
    cases, quality = [], {}
    for i in range(args.cases):
        cid = f"case{i:03d}"
        cases.append(ComparisonCase(cid, "a zebra and a horse", ("zebra", "horse"), f"{cid}/original.png",
                                    f"{cid}/candidate.png", (), seed=args.seed * 100003 + i))
        quality[f"{cid}/original.png"] = 0.0
        quality[f"{cid}/candidate.png"] = float(rng.normal(0.8, 1.2))
    client = MockClient(quality=quality)
    verdicts = run_batch(client, cases, ResponseCache())
    dist = distribution_summary(verdicts)
    for name, pct in dist.as_dict().items():
        print(f"{name:18s} {pct:6.2f}%")
    print(f"{client.calls} client calls, {dist.failed} failed cases")


if __name__ == "__main__":
    main()
