# %% relative pose AUC: ground truth under noise, then noisy matches before/after refinement
# usage: python demos/02_noise_and_pose.py [weights.xrfw]
import sys

from xrefine import model as M
from xrefine import refine as R

# small version of the default benchmark (the full one uses 50 pairs x 512 matches)
pairs, corr = R.make_sweep_benchmark(n_pairs=10, matches_per_pair=256)
sweep = R.eval_noise_sweep(pairs, corr, stds=(0.0, 0.5, 1.0, 2.0))
print(sweep.to_tsv())

# %% the AUC is the mean of clip(1 - err/tau), i.e. the area under the recall curve
from xrefine.geometry import auc

print(auc([0.0, 2.5, 10.0], thresholds=(5.0,)))  # (1 + 0.5 + 0) / 3 = 50%

# %% refinement on the pose benchmark
weights = M.load_weights(sys.argv[1]) if len(sys.argv) > 1 else None
if weights is None:
    print("no weights given: unrefined row only")
bench = R.make_pose_benchmark(n_pairs=10, matches_per_pair=256)
print(R.eval_pose(bench, weights, repetitions=2).to_tsv())
