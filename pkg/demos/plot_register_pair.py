"""
Registering two overlapping crops of a room
===========================================

Two crops of one synthetic room overlap by about half. The second crop is
turned and shifted into its own frame. Corners are described with the 3D
SIFT backend, matched one-to-one, and RANSAC recovers the similarity
transform taking grid b back into grid a.
"""

import numpy as np

from voxreg.pipeline import PipelineConfig, register_grids
from voxreg.register import transform_errors
from voxreg.synth import make_overlap_pair, random_transform, room_scene

rng = np.random.default_rng(4)
scene = room_scene(4, n_boxes=(10, 16), n_cylinders=(1, 3))
truth = random_transform(rng, max_angle_deg=60, max_translation=1.0, min_angle_deg=10)
crop_a = ((-0.6, -0.6, -0.6), (4.4, 5.4, 3.8))
crop_b = ((2.0, -0.6, -0.6), (7.0, 5.4, 3.8))
pair = make_overlap_pair(scene, crop_a, crop_b, truth, spacing=0.1)
print("grid a", pair.grid_a.dims, "grid b", pair.grid_b.dims, f"overlap {pair.overlap_fraction:.2f}")
angle = np.degrees(np.arccos(np.clip((np.trace(truth.rotation) - 1) / 2, -1, 1)))
print(f"true rotation {angle:.1f} deg, translation {np.round(truth.translation, 3)}")

# RANSAC thresholds are given in cells and converted with the grid spacing
cfg = PipelineConfig.from_dict({"ransac": {"iterations": 20000}})
run = register_grids(pair.grid_a, pair.grid_b, cfg)
res = run.result
print(f"{len(run.corners_a)} + {len(run.corners_b)} corners, {len(run.pairs)} matches, "
      f"{len(res.inliers)} inliers")

if res.success:
    center_b = pair.grid_b.world((np.asarray(pair.grid_b.dims) - 1) / 2.0)
    err = transform_errors(res.transform, truth, center_b)
    print(f"rotation error {err['rotation_deg']:.2f} deg, "
          f"translation error {err['translation'] / 0.1:.2f} cells, scale error {100 * err['scale_rel']:.2f}%")
    # mean squared inlier distance, expressed in squared cells
    print(f"average squared inlier error {res.avg_error / 0.01:.2f} cell^2")
else:
    print("no transform had enough inliers")
