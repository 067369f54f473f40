"""Count attention-score elements materialised at level 0 for each encoder mode.

The count is a proxy for activation memory: base mode builds a full T x T
score matrix, split mode one L x L block per segment, recurrence mode an
L x 2L block per segment and stream.
"""

import argparse

import numpy as np

from xltal import model as mdl
from xltal.numerics import Array


def level0_scores(mode: str, T: int, L: int, layers: int) -> int:
    cfg = mdl.ModelConfig(
        input_len=T, in_channels=4, embed_dim=8, num_heads=1, fpn_levels=1,
        encoder_mode=mode, segment_len=L, encoder_layers=layers, head_layers=1, num_classes=2,
    )
    x = Array(np.random.default_rng(0).standard_normal((T, 4)))
    with mdl.count_scores() as meter:
        mdl.forward(mdl.Model(cfg), x)
    return meter.counts[0]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--length", type=int, default=1024)
    p.add_argument("--segments", type=int, nargs="+", default=[128, 256])
    p.add_argument("--layers", type=int, nargs="+", default=[1, 2])
    args = p.parse_args()
    T = args.length
    print(f"{'mode':12s} {'L':>5s} {'layers':>6s} {'scores/layer':>13s} {'vs base':>8s}")
    for layers in args.layers:
        for L in args.segments:
            for mode in ("base", "split", "recurrence"):
                n = level0_scores(mode, T, L, layers) / layers
                print(f"{mode:12s} {L:5d} {layers:6d} {n:13.0f} {n / (T * T):8.3f}")


if __name__ == "__main__":
    main()
