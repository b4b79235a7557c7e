"""Desk keypoint skeleton and body-part vocabulary.

A 14-joint skeleton (head, neck, then right/left arm and leg chains) and
an 8-class part map (background plus 7 merged bilateral parts). These are
the label spaces every generated sample, head, and metric in this package
shares.
"""

from __future__ import annotations

import numpy as np

SKELETON_NAME = "desk14"

KEYPOINT_NAMES = [
    "head", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
]
N_KEYPOINTS = len(KEYPOINT_NAMES)

# left/right partner joints, used by horizontal flips
FLIP_PAIRS = [(2, 5), (3, 6), (4, 7), (8, 11), (9, 12), (10, 13)]

# visibility codes used in keypoint files and Keypoints structs
VIS_ABSENT = 0
VIS_OCCLUDED = 1
VIS_VISIBLE = 2

PART_NAMES = [
    "background", "head", "torso", "upper_arm", "lower_arm",
    "hand_foot", "upper_leg", "lower_leg",
]
N_PARTS = len(PART_NAMES)


def flip_index() -> np.ndarray:
    """Permutation sending each keypoint to its mirrored counterpart."""
    idx = np.arange(N_KEYPOINTS)
    for a, b in FLIP_PAIRS:
        idx[a], idx[b] = b, a
    return idx
