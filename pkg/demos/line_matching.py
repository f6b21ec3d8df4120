"""
From fragmented segments to line matches
=========================================

A synthetic frame is rendered with every segment cut into pieces. Merging
restores them, points near each segment are attached to it, and the point
matches between two frames vote for line matches.
"""

import numpy as np

from plvo.line2d import (
    MatchParams,
    MergeParams,
    associate_points_to_lines,
    filter_short,
    match_lines,
    merge_segments,
)
from plvo.synthetic import NoiseModel, SceneConfig, SyntheticFrontend, generate_scene, render_frame

scene = generate_scene(SceneConfig(n_frames=100), seed=1)
print(f"scene: {len(scene.landmarks)} landmarks, {len(scene.gt_lines)} lines")

# every detected segment arrives in two or more collinear pieces
whole = render_frame(scene, 10)
split = render_frame(scene, 10, NoiseModel(segment_split_prob=1.0))
merged = merge_segments(split.segments, MergeParams())
print(f"frame 10: {len(whole.segments)} segments, split into {len(split.segments)}, "
      f"merged back to {len(merged)}")

# segments shorter than 50 px carry little geometry and are dropped
kept = filter_short(merged, 50.0)
print(f"{len(kept)} segments survive the length filter")

# points within 3 px of a segment (and inside its extent) are attached to it
frontend = SyntheticFrontend(scene, NoiseModel(pixel_sigma=1.0, endpoint_sigma=2.0), seed=1)
a, b = frontend.frame(10), frontend.frame(13)
segs_a = filter_short(merge_segments(a.segments), 50.0)
segs_b = filter_short(merge_segments(b.segments), 50.0)
assoc_a = associate_points_to_lines(a.keypoints, segs_a)
assoc_b = associate_points_to_lines(b.keypoints, segs_b)
sizes = [len(v) for v in assoc_a.values()]
print(f"frame 10: {len(assoc_a)} segments with attached points, median {np.median(sizes):.0f} each")

# two segments match when most of their points are matched to each other
point_matches = frontend.match(a, b)
matches = match_lines(assoc_a, assoc_b, point_matches, MatchParams())
print(f"{len(point_matches)} point matches give {len(matches)} line matches")
for m, n, score in matches[:5]:
    print(f"  segment {m:2d} -> {n:2d}  score {score:.2f}")
