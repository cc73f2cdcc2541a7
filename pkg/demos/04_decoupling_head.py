"""Offset-shifted RoI pooling and the margin losses, on a hand-made grid."""

import numpy as np

from detkit import RoiSpec, cml_cls, cml_reg, dhpool_cls, dhpool_reg, roi_avg_pool

# X[y, x] = x + 10 y, so moving right adds 1 and moving down adds 10
H, W = 8, 8
X = (np.arange(W)[None, :] + 10 * np.arange(H)[:, None]).astype(float)[..., None]
roi = RoiSpec(1.0, 1.0, 4.0, 4.0, k=2)

print("plain RoI average pooling:")
print(roi_avg_pool(X, roi)[..., 0])

offsets = np.zeros((2, 2, 2))
offsets[0, 1] = (1.0, 0.0)   # top-right bin looks one cell to the right
offsets[1, 0] = (0.0, 0.5)   # bottom-left bin looks half a cell down
print("\nclassification branch, per-bin offsets:")
print(dhpool_cls(X, roi, offsets)[..., 0])

print("\nregression branch, one offset (0.5, 0.5) for the whole RoI:")
print(dhpool_reg(X, roi, (0.5, 0.5))[..., 0])

print("\nalign-style sampling (2x2 points per bin):")
print(roi_avg_pool(X, roi, sampling="align")[..., 0])

# margin losses: zero once the decoupled branch wins by the margin
for s_o, s in ((0.5, 0.8), (0.5, 0.55), (0.7, 0.6)):
    print(f"\ncls  original {s_o}, decoupled {s}: loss {cml_cls(s_o, s):.2f}", end="")
for iou_o, iou in ((0.6, 0.9), (0.6, 0.65)):
    print(f"\nreg  original {iou_o}, decoupled {iou}: loss {cml_reg(iou_o, iou):.2f}", end="")
print()
