"""
Fusing a pair and scoring the result
====================================

Run 02_train_tiny.py first for a trained checkpoint; without one a freshly
initialised network is used, which makes a blurry average.
"""
import json
import sys
from pathlib import Path

from ufafuse import metrics
from ufafuse.checkpoint import load_network
from ufafuse.cli import main
from ufafuse.imageio import from_unit, read_image, to_unit
from ufafuse.network import FusionNetwork, dump_attention

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
trip = out / "triplets4"
near, far, gt = (sorted(trip.glob(f"*_{part}.ppm"))[0] for part in ("near", "far", "gt"))

ck = out / "tiny.ufaf"
if ck.exists():
    net = load_network(ck)[0]
else:
    net = FusionNetwork.initialize(0)

# the CLI does the same thing from a shell: ufafuse fuse --checkpoint ... --a ... --b ...
if ck.exists():
    main(["fuse", "--checkpoint", str(ck), "--a", str(near), "--b", str(far), "--out", str(out / "fused.ppm"),
          "--dump-attention", str(out / "attention")])
    print(json.loads((out / "attention" / "attention.json").read_text()))

a, b = read_image(near), read_image(far)
fused = from_unit(net([to_unit(a), to_unit(b)]).data)

for name, img in (("near", a), ("far", b), ("fused", fused)):
    rep = metrics.evaluate(img, a, b, read_image(gt))
    print(f"{name:6s} AVG {rep.avg:6.2f}  STD {rep.std:6.2f}  SEN {rep.sen:5.3f}  "
          f"Qabf {rep.q_abf:.3f}  SSIM-gt {rep.ssim_to_gt:.3f}")

# attention: where does the spatial map favour the first source?
maps = dump_attention([to_unit(a), to_unit(b)], net)
print("mean spatial weight on source A:", float(maps.spatial_maps[0].data.mean()))
