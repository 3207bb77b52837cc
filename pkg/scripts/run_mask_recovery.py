"""Mask recovery on planted toy runs: F1 of extracted masks against the planted rectangles."""
import argparse

from deleaker.experiments import DEFAULT_SELF_MULT, make_plant, original_masks
from deleaker.intervention import DeleakerConfig
from deleaker.masking import EntityLayout, f1_score
from deleaker.toy import ToyModelConfig, run_diffusion


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--self-mult", type=float, default=DEFAULT_SELF_MULT)
    args = p.parse_args()
    cfg = DeleakerConfig()
    print("seed  f1_entity0  f1_entity1")
    for seed in range(args.seeds):
        toy = ToyModelConfig(seed=seed)
        plant = make_plant(toy, "default", self_mult=args.self_mult)
        layout = EntityLayout.from_plant(plant)
        masks = original_masks(run_diffusion(toy, plant), layout, cfg)
        f1 = [f1_score(m, e.image_indices(toy) - toy.text_tokens) for m, e in zip(masks.masks, plant.entities)]
        print(f"{seed:4d}  {f1[0]:10.4f}  {f1[1]:10.4f}")


if __name__ == "__main__":
    main()
