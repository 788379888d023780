"""
Overfitting a fusion network on four scenes
===========================================

Full-scale training takes days. On four 64x64 triplets the loss still
shows the network learning to pick the sharp pixels, and a few hundred
Adam steps finish in a couple of minutes on one core.
"""
import sys
from pathlib import Path

from ufafuse import datasetgen, synthetic, train
from ufafuse.network import FusionNetwork

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 300

src, lab = synthetic.write_corpus(out / "src4", out / "labels4", 4, seed=1, size=64)
entries = datasetgen.generate(src, lab, out / "triplets4", seed=1)

# four triplets at batch 4 make one step per epoch; keep lr at 1e-4 throughout
cfg = train.TrainConfig(batch=4, crop=32, epochs=steps, lr_decay_every=10 ** 9, seed=1)
net = FusionNetwork.initialize(1)


def show(rep):
    if rep.step % 50 == 0 or rep.step == 1:
        print(f"step {rep.step:4d}  total {rep.total:.4f}  l1 {rep.l1:.4f}  1-ssim {rep.ssim_loss:.4f}")


result = train.train(net, entries, cfg, checkpoint_path=out / "tiny.ufaf", loss_csv=out / "tiny.csv",
                     on_step=show)
print(f"checkpoint: {out / 'tiny.ufaf'}   loss curve: {out / 'tiny.csv'}")
