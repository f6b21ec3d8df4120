"""
3D lines: representation, projection and triangulation
=======================================================

A wall edge is built from two points, carried through the minimal
orthonormal form used by the optimizer, projected into a stereo pair and
recovered from two views. The last step slides the camera along the line,
where the two back-projected planes coincide and triangulation refuses.
"""

import numpy as np

from plvo.geometry import (
    PinholeIntrinsics,
    PoseSE3,
    StereoRig,
    orthonormal_to_plucker,
    plucker_from_two_points,
    plucker_to_orthonormal,
    project_line,
    segment_from_endpoints,
    transform_line,
)
from plvo.triangulation import DegenerateLineError, triangulate_line_two_planes, trim_endpoints

np.set_printoptions(precision=4, suppress=True)

# a 1 m horizontal edge, 4 m in front of a camera at the origin
A, B = np.array([-0.5, 0.3, 4.0]), np.array([0.5, 0.3, 4.0])
L = plucker_from_two_points(A, B)
print("moment n:", L.n, " direction v:", L.v, " n.v =", L.n @ L.v)

# four numbers are enough: (U, W) in SO(3) x SO(2)
O = plucker_to_orthonormal(L)
back = orthonormal_to_plucker(O)
print("distance to origin before and after:",
      np.linalg.norm(L.n) / np.linalg.norm(L.v), np.linalg.norm(back.n) / np.linalg.norm(back.v))

# the image line is a linear map of the moment in camera coordinates
K = PinholeIntrinsics(420, 420, 320, 240, 640, 480)
rig = StereoRig(K, 0.12)
left = PoseSE3()
right = rig.right_pose(left)


def observe(pose):
    Xc = pose.apply(np.stack([A, B]))
    return segment_from_endpoints(*(K.project(Xc)))


for name, pose in (("left", left), ("right", right)):
    l = project_line(K, transform_line(pose, L))
    seg = observe(pose)
    print(f"{name:5s} image line {l}, endpoint residuals",
          np.abs(l @ np.c_[np.stack([seg.p1, seg.p2]), np.ones(2)].T))

# two views: intersect the planes through each camera center and its segment
moved = PoseSE3.from_camera_center(np.eye(3), np.array([0.0, -0.4, 0.2]))
L2 = triangulate_line_two_planes(observe(left), left, observe(moved), moved, K)
ends = trim_endpoints(L2, [(left, observe(left))], K)
print("recovered direction:", L2.normalized().v, " endpoints:", np.round(ends, 6))

# pure motion along the line: both planes contain the line and the baseline
along = PoseSE3.from_camera_center(np.eye(3), np.array([0.3, 0.0, 0.0]))
try:
    triangulate_line_two_planes(observe(left), left, observe(along), along, K)
except DegenerateLineError as exc:
    print("motion along the line:", exc)
