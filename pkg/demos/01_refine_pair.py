# %% refine the matches of one synthetic pair
# usage: python demos/01_refine_pair.py [weights.xrfw]
# without a weight file a small model is trained for a few epochs first (about a minute);
# that model barely moves the keypoints, pass run/best.xrfw from `xrefine train` to see the full effect
import sys

import numpy as np

from xrefine import model as M
from xrefine import training as T
from xrefine.geometry import rotation_angle_deg
from xrefine.data import SceneConfig, generate_pair, sample_training_matches
from xrefine.refine import FLAG_BORDER, refine_matches

scene = SceneConfig()  # 640x480 box room, f=560
pair = generate_pair(seed=7, config=scene)
print("image", pair.image_a.shape, "rotation", rotation_angle_deg(pair.pose.rotation, np.eye(3)), "deg")

# %% weights
if len(sys.argv) > 1:
    weights = M.load_weights(sys.argv[1])
else:
    cfg = T.TrainConfig(epochs=4, train_pairs=16, val_pairs=2)
    state = T.train(cfg, log=lambda e, loss, m: print(f"epoch {e}  loss {loss:.3f}  val error {m:.3f} px"))
    weights = state.best.weights
print(weights.config)

# %% noisy matches with known ground truth
ms = sample_training_matches(pair, 300, noise_std=1.5, seed=1)
matches = np.hstack([ms.keypoints_a, ms.keypoints_b])
refined, flags = refine_matches(pair.image_a, pair.image_b, matches, weights)
print("border matches passed through:", int((flags == FLAG_BORDER).sum()))

# %% transfer error: map A into B with the true geometry, compare with the B keypoint
err_raw = T.transfer_error(pair, matches[:, :2], matches[:, 2:])
err_ref = T.transfer_error(pair, refined[:, :2], refined[:, 2:])
print(f"mean error {err_raw.mean():.3f} px -> {err_ref.mean():.3f} px")
print("median shift", np.median(np.linalg.norm(refined - matches, axis=1)))
