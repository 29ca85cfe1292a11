"""
Why curvature weights pull harder
=================================

Two target points sit in regions of different curvature weight. Each has a
predicted point half a unit away. One plain gradient step on the weighted
Chamfer term moves the prediction near the heavier target further.
"""
import numpy as np

from cortexgeo.geometry import SampledCloud
from cortexgeo.losses import chamfer_curvature


def loose(points, kappa=None):
    # point clouds without mesh provenance
    p = np.atleast_2d(np.asarray(points, dtype=float))
    bary = np.tile([1.0, 0.0, 0.0], (len(p), 1))
    k = None if kappa is None else np.asarray(kappa, dtype=float)
    return SampledCloud(p, np.zeros_like(p), np.zeros(len(p), dtype=np.int64), bary, k)


a, b = np.zeros(3), np.array([3.0, 0.0, 0.0])
u, v = a + [0, 0.5, 0], b + [0, 0, 0.5]
rate = 0.02

for name, pred, gt, kappa in (("u -> a", u, a, 1.0), ("v -> b", v, b, 3.0)):
    value, grad = chamfer_curvature(loose(pred), loose(gt, [kappa]))
    moved = pred - rate * grad[0]
    print(f"{name}: kappa={kappa}  loss={value:.3f}  grad={grad[0]}  "
          f"distance {np.linalg.norm(pred - gt):.3f} -> {np.linalg.norm(moved - gt):.3f}")

# the gradient is 4*kappa*(pred - gt), so one step shrinks the gap by 1 - 8*rate*kappa
