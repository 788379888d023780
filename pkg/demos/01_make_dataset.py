"""
Building multi-focus training triplets
======================================

A source image and its saliency label are all we need. The label picks the
foreground, the whole image is box-blurred once, and two copies are stitched
together: the near-focused one is sharp on the foreground, the far-focused
one is sharp on the background.
"""
import sys
from pathlib import Path

import numpy as np

from ufafuse import datasetgen, synthetic
from ufafuse.imageio import read_image

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")

# a handful of procedural scenes stand in for a real salient-object corpus
src, lab = synthetic.write_corpus(out / "src", out / "labels", 8, seed=0, size=64)
entries = datasetgen.generate(src, lab, out / "triplets", seed=0)
print(f"{len(entries)} triplets in {out / 'triplets'}")

# blur groups are dealt round-robin, kernel sizes drawn inside each group
for e in entries:
    print(f"  {e.near.name:28s} group {e.blur_group}  k={e.kernel_size}")

# the stitching is pure pixel selection, so near + far == sharp + blurred exactly
e = entries[3]
near, far, gt = (read_image(p, "rgb").astype(int) for p in (e.near, e.far, e.gt))
blurred = datasetgen.mean_blur(gt.astype(np.uint8), e.kernel_size)
print("sum identity holds:", np.array_equal(near + far, gt + blurred))

fmap = read_image(e.focus_map) > 0
print(f"foreground covers {fmap.mean():.0%} of the frame")
