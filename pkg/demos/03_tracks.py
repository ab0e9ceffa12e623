# %% multi-view tracks: hold one observation, pull the rest toward it, triangulate
# usage: python demos/03_tracks.py [second_only_weights.xrfw]
# e.g. from `xrefine train --out run_so --mode second_only`; the few-epoch fallback model changes little
import sys

import numpy as np

from xrefine import model as M
from xrefine import training as T
from xrefine.data import build_tracks, generate_multiview
from xrefine.refine import eval_triangulation, refine_tracks, triangulate_tracks

scene = generate_multiview(seed=3, n_views=5)
tracks = build_tracks(scene, 100, noise_std=1.5, seed=0)
print(len(tracks), "tracks, lengths", np.bincount([len(t) for t in tracks]))

# %% a model in second_only mode moves only the non-reference keypoint of each pair
if len(sys.argv) > 1:
    weights = M.load_weights(sys.argv[1])
else:
    cfg = T.TrainConfig(epochs=4, train_pairs=16, val_pairs=2)
    weights = T.train(cfg, M.ModelConfig(refine_mode=M.SECOND_ONLY)).best.weights

refined = refine_tracks(tracks, weights)
tr, out = tracks[0], refined[0]
print("reference unchanged:", np.array_equal(tr.keypoints[tr.reference], out.keypoints[out.reference]))
print("keypoint error before", np.linalg.norm(tr.keypoints - tr.true_keypoints, axis=1).round(2))
print("keypoint error after ", np.linalg.norm(out.keypoints - out.true_keypoints, axis=1).round(2))

# %% DLT triangulation, distance of each point to the true surface
X_raw = triangulate_tracks(scene, tracks)
X_ref = triangulate_tracks(scene, refined)
for name, X in (("raw", X_raw), ("refined", X_ref)):
    d = scene.room.distance_to_surface(X[np.isfinite(X).all(axis=1)])
    print(name, "median distance", np.median(d))

print(eval_triangulation(n_scenes=1, n_points=100, weights=weights).to_tsv())
