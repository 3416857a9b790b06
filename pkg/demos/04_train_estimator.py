"""Train the attention estimator on a desk-scale dataset.

The interesting mechanics on display:
  - pane batching: each frame's points are split 4x4 by their image
    projections, so the attention matrix per sample shrinks from N^2 to
    roughly (N/16)^2 while every sample still sees the whole image;
  - the loss is the mean squared error between unit prediction and unit
    ground truth, so it is sign-sensitive and relies on the shared
    face-the-sensor orientation convention;
  - everything is deterministic from the config seed.

Training here is shortened to keep the demo quick; bump epochs to ~150 to
reproduce the numbers quoted in the README.
"""

from hgtnormals import dataset as ds, evaluation as ev, training as tr
from hgtnormals.frontend import ModelConfig
from hgtnormals.model import ModelParams

ROOT = "/tmp/hgt_demo/dataset"
OUT = "/tmp/hgt_demo/train_run"
try:
    store = ds.FrameStore(ROOT)
except Exception:
    ds.generate_dataset(ROOT, n_train=4, n_test=2, size=64, noise_level=0.0,
                        seed=7, target_points=600)
    store = ds.FrameStore(ROOT)

desk_model = ModelConfig(
    d_img=16, d_geo=32, d_pos=16, d_token=64,
    neighbor_count=16, query_radius=0.75,
    unet_channels=(8, 16, 32), attention_blocks=3,
    head_width=64, point_hidden=16, hgn_hidden=64,
)
config = tr.TrainConfig(
    dataset_root=ROOT, out_dir=OUT, lr=1e-3, epochs=20, batch_size=8,
    pane_grid=(4, 4), seed=0, model=desk_model,
)

result = tr.train(config)
print("epoch  train_mse  test_mse  test_angle_deg")
for rep_train, rep_test in zip(result.reports[::2], result.reports[1::2]):
    print(f"{rep_train.epoch:5d}  {rep_train.mse:9.4f}  {rep_test.mse:8.4f}"
          f"  {rep_test.mean_angle_deg:10.2f}")

ratio = result.peak_pane_attention_entries / result.full_frame_attention_entries
print()
print(f"peak pane attention entries / full-frame entries = 1/{1/ratio:.0f} "
      "(4x4 panes shrink attention quadratically)")

pca = ev.evaluate_method(store, "test", "pca", seed=0)
model_rep = ev.evaluate_method(store, "test", "hgt",
                               params=ModelParams.load(result.checkpoint_path), seed=0)
print()
print(ev.summarize([pca, model_rep]))
