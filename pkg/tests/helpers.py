"""Small constructors shared by the test modules."""

import numpy as np

from monodense.geometry import CameraFrame, Pose


def make_frame(intr, t=(0.0, 0.0, 0.0), R=None, image=None, frame_id=0):
    if image is None:
        image = np.zeros(intr.shape)
    return CameraFrame(image, intr, Pose(np.eye(3) if R is None else R, t), frame_id=frame_id)


def rot(axis, angle):
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * Kx @ Kx
