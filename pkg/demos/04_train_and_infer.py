"""
A small distillation run
========================

Train both arms on a reduced configuration, then run the deployed student
from its checkpoint.  The full desk-scale comparison is the acceptance suite;
this script only shows the moving parts and finishes in well under a minute.
"""

import tempfile
from pathlib import Path

from skthdr.config import TrainConfig
from skthdr.raster import list_named
from skthdr.train import build_dataset, checkpoint_path, infer, train

out = Path(tempfile.mkdtemp())
cfg = TrainConfig(height=32, width=32, n_train=8, n_test=4, batch_size=4, epochs=3,
                  verify_detachment=True, out_dir=str(out))
report = train(cfg)

for arm, history in report.epochs.items():
    print(arm, "org loss per epoch:", [round(h["org"], 4) for h in history])
for name, m in report.metrics.items():
    print(f"{name:9s} PSNR-mu {m['psnr_mu']:.2f} dB  SSIM {m['ssim']:.3f}")
print("detachment:", report.detachment)

# the checkpoint holds every group, the student comes first
names = list_named(checkpoint_path(out, "distilled"))
print("checkpoint sections:", sorted({n.split(".")[0] for n in names}))

# inference builds and reads the student only
test = build_dataset(cfg).test
hdr, rec = infer(checkpoint_path(out, "distilled"), test.frames, test.exposure_times, test.gt)
print("inference output", hdr.shape, f"PSNR-mu {rec.psnr_mu:.2f} dB")
