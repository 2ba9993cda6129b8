"""Sweep the perturbation std until the mean intra-class cosine hits a target.

Writes benchmarks/calibration.json. The mean is taken over all clean
samples of their self-excluded intra-class score, on a noise-free dataset
with the benchmark geometry (K=200, M=50, d=64).

    python scripts/calibrate_concentration.py [--target 0.7]
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from avcleanse.similarity import intra_class_scores
from avcleanse.synth import SynthConfig, generate

ROOT = Path(__file__).resolve().parents[1]


def mean_cosine(sigma: float, seed: int) -> float:
    cfg = replace(SynthConfig(), concentration_speech=sigma, concentration_face=sigma,
                  noise_rate=0.0, trials_per_label=0, seed=seed)
    ds = generate(cfg)
    return float(np.mean(intra_class_scores(ds.speech, ds.labels).values))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--target", type=float, default=0.7)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=ROOT / "benchmarks" / "calibration.json")
    args = ap.parse_args()

    grid = [round(s, 3) for s in np.linspace(0.02, 0.2, 19)]
    sweep = [{"sigma": s, "mean_cosine": mean_cosine(s, args.seed)} for s in grid]
    for row in sweep:
        print(f"sigma={row['sigma']:.3f}  mean intra-class cosine={row['mean_cosine']:.4f}")

    lo, hi = 0.02, 0.2
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if mean_cosine(mid, args.seed) > args.target:
            lo = mid
        else:
            hi = mid
    sigma = round(0.5 * (lo + hi), 4)
    achieved = mean_cosine(sigma, args.seed)
    print(f"calibrated sigma={sigma} (mean cosine {achieved:.4f})")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps({
        "target_mean_cosine": args.target,
        "seed": args.seed,
        "geometry": {"n_classes": 200, "samples_per_class": 50, "dim": 64},
        "sweep": sweep,
        "calibrated_sigma": sigma,
        "achieved_mean_cosine": achieved,
    }, indent=2) + "\n")


if __name__ == "__main__":
    main()
