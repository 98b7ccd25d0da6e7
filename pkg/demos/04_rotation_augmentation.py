"""
Equivariance versus rotation augmentation
=========================================

Three shape classifiers learn from upright objects only and are tested on
objects rotated by random multiples of 90 degrees:

* a plain CNN,
* the same CNN with random rotations of the training scenes,
* the equivariant backbone with rotation-invariant RoI features.

Pass a step count to train longer (the acceptance run uses 2000 steps,
three seeds and 2000 training objects).
"""

import sys

from regconv.train import TrainConfig
from regconv import verify as V

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cfg = TrainConfig(steps=steps, train_size=400, test_size=100, eval_every=max(steps // 4, 1))


def log(variant, seed, result):
    f = result.final
    print(f"{variant:<7} seed {seed}: upright {f['test_upright_acc']:.3f}  "
          f"rotated {f['test_rotated_acc']:.3f}  ({result.wall_seconds:.0f} s)", flush=True)


report = V.augmentation_comparison(cfg, seeds=(0,), log=log)

print("\nrotated test accuracy along training:")
for variant, runs in report["runs"].items():
    curve = " ".join(f"{row['test_rotated_acc']:.2f}" for row in runs[0]["curve"])
    print(f"  {variant:<7} {curve}")
