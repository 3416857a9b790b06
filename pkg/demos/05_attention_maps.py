"""Inspect what the attention encoder looks at.

Dumps the first self-attention block's affinity matrix for a trained
checkpoint, pulls out one query point's row, and renders it as a grayscale
heatmap splatted over the image. Uniform rows mean the encoder ignores
context; a trained model concentrates weight on related regions.
"""

import os

import numpy as np

from hgtnormals import dataset as ds, evaluation as ev
from hgtnormals.model import ModelParams

ROOT = "/tmp/hgt_demo/dataset"
CKPT = "/tmp/hgt_demo/train_run/checkpoint.bin"
OUT = "/tmp/hgt_demo/attention"

if not os.path.exists(CKPT):
    raise SystemExit("run demos/04_train_estimator.py first to produce a checkpoint")

store = ds.FrameStore(ROOT)
params = ModelParams.load(CKPT)
fid = store.ids("test")[0]
frame = store.load(fid)

# query a mid-frame point
query = len(frame.points) // 2
paths = ev.dump_attention(params, store, fid, query, OUT, seed=0)

row = paths["row"]
print(f"frame {fid}, query point {query} at pixel "
      f"({frame.proj_map[query, 0]:.0f}, {frame.proj_map[query, 1]:.0f})")
print(f"attention row sums to {row.sum():.9f} over {row.size} points")
print(f"max weight {row.max():.4f}, uniform would be {1.0 / row.size:.4f}")

top = np.argsort(row)[::-1][:5]
print()
print("five most-attended points:")
for i in top:
    u, v = frame.proj_map[i]
    print(f"  point {i:4d} at pixel ({u:3.0f}, {v:3.0f}), weight {row[i]:.4f}, "
          f"depth {frame.points.points[i, 2]:.1f} m")

print()
print("artifacts written:")
for key in ("blocks", "index", "query_row", "heatmap"):
    print(" ", paths[key] if key != "blocks" else ", ".join(paths[key]))
