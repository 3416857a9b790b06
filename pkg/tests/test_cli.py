import json
import os
import subprocess
import sys

import numpy as np
import pytest

from hgtnormals import dataset as ds
from hgtnormals.cli import main
from hgtnormals.frontend import ModelConfig
from hgtnormals.training import TrainConfig


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("cli") / "d")
    rc = run_cli("synth-gen", "--frames", "4", "--size", "16", "--noise", "0",
                 "--points", "40", "--seed", "1", "--out", root)
    assert rc == 0
    return root


def tiny_config_file(tmp_path, root, out, **kw):
    model = dict(
        d_img=4, d_geo=5, d_pos=3, d_token=8, neighbor_count=4, query_radius=1.5,
        unet_channels=[2, 3], attention_blocks=1, head_width=6, point_hidden=4,
        hgn_hidden=5,
    )
    cfg = dict(dataset_root=root, out_dir=out, lr=1e-2, epochs=1, batch_size=4,
               pane_grid=[2, 2], seed=3, model=model)
    cfg.update(kw)
    path = str(tmp_path / "config.json")
    with open(path, "w") as f:
        json.dump(cfg, f)
    return path


def test_synth_gen_count_contract(data_root):
    manifest = ds.read_manifest(data_root)
    assert len(manifest.frames) == 4
    assert len(manifest.train_ids) == 3
    assert len(manifest.test_ids) == 1


def test_unknown_flag_usage_error():
    with pytest.raises(SystemExit) as exc:
        run_cli("eval", "--bogus-flag", "x")
    assert exc.value.code != 0


def test_missing_input_nonzero_exit(tmp_path, capsys):
    rc = run_cli("baseline-pca", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o"))
    assert rc != 0
    assert "error" in capsys.readouterr().err


def test_baseline_pca_writes_reports(data_root, tmp_path):
    out = str(tmp_path / "pca")
    rc = run_cli("baseline-pca", "--data", data_root, "--out", out, "--seed", "0")
    assert rc == 0
    assert os.path.exists(os.path.join(out, "per_point.csv"))
    assert os.path.exists(os.path.join(out, "quantile.csv"))
    report = open(os.path.join(out, "report.csv")).read().splitlines()
    assert report[0] == "method,noise,mean_angle_deg"
    assert report[1].startswith("pca,0.0,")


def test_eval_byte_identical_across_runs(data_root, tmp_path):
    outs = [str(tmp_path / n) for n in ("r1", "r2")]
    for out in outs:
        rc = run_cli("eval", "--method", "pca", "--data", data_root,
                     "--out", out, "--seed", "7")
        assert rc == 0
    for name in ("per_point.csv", "quantile.csv", "report.csv"):
        a = open(os.path.join(outs[0], name), "rb").read()
        b = open(os.path.join(outs[1], name), "rb").read()
        assert a == b, name


def test_train_predict_eval_attn_roundtrip(data_root, tmp_path):
    run_out = str(tmp_path / "run")
    cfg_path = tiny_config_file(tmp_path, data_root, run_out)
    assert run_cli("train", "--config", cfg_path) == 0
    ckpt = os.path.join(run_out, "checkpoint.bin")
    assert os.path.exists(ckpt)
    assert os.path.exists(os.path.join(run_out, "loss_report.csv"))

    pred_out = str(tmp_path / "pred")
    assert run_cli("predict", "--checkpoint", ckpt, "--data", data_root,
                   "--out", pred_out, "--seed", "3") == 0
    manifest = ds.read_manifest(data_root)
    fid = manifest.test_ids[0]
    pred = ds.read_f64(os.path.join(pred_out, f"pred_{fid}.f64"))
    n = next(e.point_count for e in manifest.frames if e.frame_id == fid)
    assert pred.size == n * 3
    np.testing.assert_allclose(
        np.linalg.norm(pred.reshape(n, 3), axis=1), 1.0, atol=1e-9
    )

    eval_out = str(tmp_path / "eval")
    assert run_cli("eval", "--method", "hgt", "--checkpoint", ckpt,
                   "--data", data_root, "--out", eval_out, "--seed", "3") == 0
    assert os.path.exists(os.path.join(eval_out, "report.csv"))

    attn_out = str(tmp_path / "attn")
    assert run_cli("attn-dump", "--checkpoint", ckpt, "--data", data_root,
                   "--frame", fid, "--point", "0", "--out", attn_out,
                   "--seed", "3") == 0
    assert os.path.exists(os.path.join(attn_out, "attn_block0.f64"))
    assert os.path.exists(os.path.join(attn_out, "heatmap.ppm"))
    assert os.path.exists(os.path.join(attn_out, "query_row.csv"))


def test_eval_model_requires_checkpoint(data_root, tmp_path, capsys):
    rc = run_cli("eval", "--method", "hgt", "--data", data_root,
                 "--out", str(tmp_path / "o"))
    assert rc == 1
    assert "checkpoint" in capsys.readouterr().err


def test_pane_grid_flag_parses(data_root, tmp_path):
    out = str(tmp_path / "paned")
    rc = run_cli("eval", "--method", "pca", "--data", data_root,
                 "--out", out, "--pane-grid", "2x2")
    assert rc == 0


def test_eval_trace_flag_exports_attention(data_root, tmp_path):
    run_out = str(tmp_path / "run")
    cfg_path = tiny_config_file(tmp_path, data_root, run_out)
    assert run_cli("train", "--config", cfg_path) == 0
    out = str(tmp_path / "traced")
    rc = run_cli("eval", "--method", "hgt", "--checkpoint",
                 os.path.join(run_out, "checkpoint.bin"), "--data", data_root,
                 "--out", out, "--trace", "--seed", "3")
    assert rc == 0
    fid = ds.read_manifest(data_root).test_ids[0]
    assert os.path.exists(os.path.join(out, "trace", fid, "attn_block0.f64"))
    assert os.path.exists(os.path.join(out, "trace", fid, "attn_index.json"))


def test_console_entry_point_is_wired():
    result = subprocess.run(
        [sys.executable, "-m", "hgtnormals.cli", "--help"],
        capture_output=True, text=True,
    )
    assert result.returncode == 0
    for sub in ("synth-gen", "baseline-pca", "train", "predict", "eval", "attn-dump"):
        assert sub in result.stdout
