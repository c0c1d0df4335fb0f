"""Time ``airwayseg infer`` on one 64x256x256 volume.

A generation-3 phantom at 64x128x128 is resampled 2x in-plane (halved in-plane
spacing) to reach the target grid.

    python demos/infer_runtime.py CHECKPOINT [workdir]
"""
import sys
from pathlib import Path

from scipy import ndimage

from airwayseg.cli import main
from airwayseg.phantom import PhantomConfig, generate
from airwayseg.volume import Volume, save_volume

checkpoint = sys.argv[1]
work = Path(sys.argv[2] if len(sys.argv) > 2 else "runs/infer_runtime")
work.mkdir(parents=True, exist_ok=True)
case = generate(PhantomConfig(max_generation=3, volume_shape=(64, 128, 128), seed=123), with_skeleton=False)
data = ndimage.zoom(case.volume.data.astype("float32"), (1, 2, 2), order=1)
sz, sy, sx = case.volume.spacing
save_volume(Volume(data, (sz, sy / 2, sx / 2)), work / "big_image.nvk")
print(f"volume {data.shape}")
sys.exit(main(["infer", "--checkpoint", checkpoint, "--image", str(work / "big_image.nvk"),
               "--out", str(work / "big_pred.nvk")]))
