import os

import numpy as np
import pytest

from hgtnormals import dataset as ds
from hgtnormals import evaluation as ev
from hgtnormals import model as M
from hgtnormals import training as tr
from hgtnormals.errors import ContractError
from hgtnormals.frontend import ModelConfig
from hgtnormals.geometry import mean_angle_error


def tiny_model(**kw):
    base = dict(
        d_img=4, d_geo=5, d_pos=3, d_token=8,
        neighbor_count=4, query_radius=1.5,
        unet_channels=(2, 3), attention_blocks=1,
        head_width=6, point_hidden=4, hgn_hidden=5,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("data") / "d")
    ds.generate_dataset(root, n_train=2, n_test=2, size=16, noise_level=0.0,
                        seed=1, target_points=40)
    return ds.FrameStore(root)


# ---------------------------------------------------------------------------
# distributions and quantiles
# ---------------------------------------------------------------------------

def test_quantile_linear_interpolation_convention():
    dist = ev.ErrorDistribution.from_errors(np.array([1.0, 2.0, 3.0, 4.0]))
    assert dist.quantile(0.5) == pytest.approx(2.5)
    assert dist.quantile(0.0) == 1.0
    assert dist.quantile(1.0) == 4.0
    assert dist.mean == pytest.approx(2.5)


def test_quantile_curve_monotone():
    gen = np.random.default_rng(0)
    dist = ev.ErrorDistribution.from_errors(gen.uniform(0, np.pi / 2, size=500))
    curve = ev.quantile_curve(dist, resolution=101)
    assert curve.shape == (101, 2)
    assert np.all(np.diff(curve[:, 1]) >= 0.0)
    assert curve[0, 1] == dist.errors[0]
    assert curve[-1, 1] == dist.errors[-1]


def test_empty_distribution_rejected():
    with pytest.raises(ContractError):
        ev.ErrorDistribution.from_errors(np.array([]))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def test_ground_truth_predictions_zero_error(store):
    ids = store.ids("test")
    preds = {fid: store.load(fid).normals_gt.copy() for fid in ids}
    report = ev.report_from_predictions("gt", 0.0, store, ids, preds)
    assert report.mean_angle_deg == pytest.approx(0.0, abs=1e-5)


def test_pca_report_matches_metric_recomputation(store):
    report = ev.evaluate_method(store, "test", "pca", seed=0)
    # the report mean equals recomputation from the dumped per-point errors
    all_errs = np.concatenate([e for _, e in report.per_point])
    assert report.distribution.mean == pytest.approx(float(all_errs.mean()), abs=1e-12)
    # and each per-frame mean equals mean_angle_error on the same inputs
    order = {fid: i for i, fid in enumerate(store.ids())}
    for fid, errs in report.per_point:
        frame = store.load(fid)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(0, 777, order[fid])))
        pred = ev.pca_predict_frame(frame, ModelConfig().query_radius,
                                    ModelConfig().neighbor_count, rng)
        assert float(errs.mean()) == pytest.approx(
            mean_angle_error(pred.vectors, frame.normals_gt), abs=1e-12
        )


def test_model_eval_and_pane_eval(store):
    cfg = tiny_model()
    params = M.init_model_params(cfg, seed=0, variant="hgt")
    full = ev.evaluate_method(store, "test", "hgt", params=params, seed=0)
    paned = ev.evaluate_method(store, "test", "hgt", params=params, seed=0, pane_grid=(2, 2))
    assert 0.0 <= full.mean_angle_deg <= 90.0
    assert 0.0 <= paned.mean_angle_deg <= 90.0


def test_variant_mismatch_rejected(store):
    params = M.init_model_params(tiny_model(), seed=0, variant="hgn")
    with pytest.raises(ContractError):
        ev.evaluate_method(store, "test", "hgt", params=params)


def test_summarize_table(store):
    report = ev.evaluate_method(store, "test", "pca", seed=0)
    table = ev.summarize([report])
    assert "pca" in table
    assert "39.27" in table  # reference row shown for context
    assert f"{report.mean_angle_deg:.2f}" in table
    lone = ev.summarize([report], include_reference=False)
    assert "39.27" not in lone


def test_csv_writers_deterministic(store, tmp_path):
    report = ev.evaluate_method(store, "test", "pca", seed=0)
    p1 = str(tmp_path / "a.csv")
    p2 = str(tmp_path / "b.csv")
    ev.write_per_point_csv(p1, report)
    ev.write_per_point_csv(p2, report)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    q1 = str(tmp_path / "q.csv")
    ev.write_quantile_csv(q1, report)
    header, first = open(q1).read().splitlines()[:2]
    assert header == "q,angle_deg"
    assert first.startswith("0.0,")


# ---------------------------------------------------------------------------
# attention dumps
# ---------------------------------------------------------------------------

def test_attention_dump_row_properties(store, tmp_path):
    cfg = tiny_model()
    params = M.init_model_params(cfg, seed=0, variant="hgt")
    out = str(tmp_path / "attn")
    fid = store.ids("test")[0]
    paths = ev.dump_attention(params, store, fid, point_index=3, out_dir=out, seed=0)
    row = paths["row"]
    assert abs(row.sum() - 1.0) < 1e-9

    # the dumped blob reproduces the traced matrix bit-exactly
    n = len(store.load(fid).points)
    blob = ds.read_f64(paths["blocks"][0], (n, n))
    order = {f: i for i, f in enumerate(store.ids())}
    ctx = M.context_for_frame(store.load(fid), cfg, 0, order[fid])
    trace = M.AttentionTrace()
    M.predict_frame(params, ctx, trace=trace)
    np.testing.assert_array_equal(blob, trace.blocks[0])
    np.testing.assert_array_equal(blob[3], row)

    assert os.path.exists(paths["heatmap"])
    assert os.path.exists(paths["index"])
    with open(paths["query_row"]) as f:
        lines = f.read().splitlines()
    assert lines[0] == "point_id,pixel_u,pixel_v,weight"
    assert len(lines) == n + 1


def test_attention_dump_uniform_for_zeroed_query(store, tmp_path):
    cfg = tiny_model()
    params = M.init_model_params(cfg, seed=0, variant="hgt")
    params.tensors["enc0.wq"].data[...] = 0.0
    fid = store.ids("test")[0]
    paths = ev.dump_attention(params, store, fid, point_index=0,
                              out_dir=str(tmp_path / "attn"), seed=0)
    n = len(store.load(fid).points)
    np.testing.assert_allclose(paths["row"], np.full(n, 1.0 / n), atol=1e-12)


def test_attention_dump_bad_index(store, tmp_path):
    params = M.init_model_params(tiny_model(), seed=0, variant="hgt")
    with pytest.raises(ContractError):
        ev.dump_attention(params, store, store.ids("test")[0], point_index=10_000,
                          out_dir=str(tmp_path / "attn"), seed=0)
