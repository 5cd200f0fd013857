#!/usr/bin/env python3
"""Linear-probe accuracy as a function of a fixed masking ratio.

Uses the 20x20 synthetic variant (25 patches) so extreme ratios still leave
at least one patch on each side of the cut. The interesting question is the
shape: intermediate ratios should beat both extremes.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mlomae.data import SynthSpec, synth_generate
from mlomae.engine import MloConfig, mlo_train, probe_head
from mlomae.masking import FixedRatio
from mlomae.nn import ModelDims

SPEC25 = SynthSpec(side=20, informative=(0, 6, 12, 18, 24))
DIMS25 = ModelDims(image_side=20)


def probe_at_ratio(ratio: float, seed: int, epochs: int) -> float:
    cfg = MloConfig(seed=seed, total_epochs=epochs,
                    ratio_schedule=FixedRatio(ratio))
    bundle = synth_generate(SPEC25, seed)
    state, _ = mlo_train(bundle, DIMS25, cfg)
    return probe_head(state.E, DIMS25, bundle, seed)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ratios", type=float, nargs="+", default=[0.1, 0.75, 0.95])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=4)
    args = ap.parse_args()

    header = "seed  " + "".join(f"r={r:<8.2f}" for r in args.ratios)
    print(header)
    for seed in args.seeds:
        t0 = time.time()
        accs = [probe_at_ratio(r, seed, args.epochs) for r in args.ratios]
        row = f"{seed:>4}  " + "".join(f"{a:<10.4f}" for a in accs)
        print(row + f"({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
