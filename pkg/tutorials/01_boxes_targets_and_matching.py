# Boxes, dense targets and the pseudo-label matching step on hand-made inputs.
# Run: python3 tutorials/01_boxes_targets_and_matching.py

# %%
import numpy as np

from stad.assignment import assign_fcos_targets
from stad.data import KeyframeAnnotation
from stad.geometry import Box, giou, iou
from stad.tla import cost_matrix_arrays, hungarian, tla_from_detections

a, b = Box(0, 0, 2, 2), Box(1, 1, 3, 3)
print("iou", iou(a, b), "giou", giou(a, b))  # 1/7 and 1/7 - 2/9

# %% one actor in the middle of a 64x64 frame
t = assign_fcos_targets([[20, 20, 36, 36]])
pos = np.flatnonzero(t.actorness)
print(len(pos), "positive locations, strides", sorted(set(t.strides[pos].tolist())))
print("decoded boxes agree:", np.allclose(t.decode()[pos], [20, 20, 36, 36]))

# %% two annotated keyframes around an unlabeled frame
left = KeyframeAnnotation(1.0, [[10, 10, 26, 30]], [[1, 0, 0, 0, 0, 0]], [0])
right = KeyframeAnnotation(2.0, [[40, 30, 56, 50]], [[0, 0, 1, 0, 1, 0]], [1])

# three teacher boxes: near the left actor, near the right one, and a stray
boxes = np.array([[12, 11, 28, 31], [38, 29, 55, 49], [0, 50, 10, 62]], float)
scores = np.array([
    [0.8, 0.1, 0.1, 0.0, 0.1, 0.0],
    [0.1, 0.0, 0.7, 0.1, 0.6, 0.0],
    [0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
])

cost = cost_matrix_arrays(boxes, scores, np.r_[left.boxes, right.boxes], np.r_[left.labels, right.labels], (64, 64))
print(np.round(cost, 3))  # last column is background padding
print("assignment", hungarian(cost))

p = tla_from_detections(boxes, scores, left, right)
for box, lab, bg in zip(p.boxes, p.labels, p.background):
    print(box, "background" if bg else np.flatnonzero(lab))
