import os

import numpy as np
import pytest

from gloria import interp, model as model_mod, synthdata
from gloria.cli import run
from gloria.matcore import load_matrix


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_missing_command_is_usage_error():
    assert run([]) == 2


def test_unknown_flag_is_usage_error():
    assert run(["gen-data", "--no-such-flag"]) == 2


def test_grad_check_passes(capsys):
    assert run(["grad-check", "--instances", "2", "--seed", "3"]) == 0
    assert "max relative error" in capsys.readouterr().out


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """gen-data -> train -> extract-gates -> nmf -> aggregate, small sizes."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data.csv")
    model = str(root / "model")
    gates = str(root / "gates.txt")
    nmf = str(root / "nmf")
    agg = str(root / "agg.txt")
    assert run(["gen-data", "--out", data, "--n", "300", "--dims", "12",
                "--sites", "2", "--seed", "5"]) == 0
    assert run(["train", "--data", data, "--out", model, "--epochs", "2",
                "--rank", "4", "--hidden", "8", "--warmup-steps", "50",
                "--seed", "5"]) == 0
    assert run(["extract-gates", "--data", data, "--model", model,
                "--out", gates, "--max-locations", "40", "--seed", "5"]) == 0
    assert run(["nmf", "--gates", gates, "--k", "3", "--iters", "60",
                "--seed", "5"] + ["--out", nmf]) == 0
    assert run(["aggregate", "--gates", gates, "--nmf", nmf,
                "--out", agg]) == 0
    return {"root": root, "data": data, "model": model, "gates": gates,
            "nmf": nmf, "agg": agg}


def test_gen_data_artifacts_loadable(pipeline_dir):
    data = synthdata.load_dataset(pipeline_dir["data"])
    assert data.n == 300
    spec, seed, n = synthdata.load_world_manifest(pipeline_dir["data"] + ".manifest")
    assert (spec.d, seed, n) == (12, 5, 300)


def test_gen_data_refuses_overwrite(pipeline_dir, capsys):
    assert run(["gen-data", "--out", pipeline_dir["data"], "--n", "10"]) == 1
    assert "--force" in capsys.readouterr().err


def test_gen_data_force_overwrites(tmp_path):
    out = str(tmp_path / "d.csv")
    assert run(["gen-data", "--out", out, "--n", "20", "--dims", "6",
                "--sites", "1", "--seed", "1"]) == 0
    assert run(["gen-data", "--out", out, "--n", "25", "--dims", "6",
                "--sites", "1", "--seed", "1", "--force"]) == 0
    assert synthdata.load_dataset(out).n == 25


def test_trained_model_loadable_and_frozen_weights_match(pipeline_dir):
    m = model_mod.load_backbone(pipeline_dir["model"], mode="gloria")
    assert len(m.sites) == 2
    assert m.sites[0].pair.a.shape == (12, 4)


def test_train_writes_runlog_and_config(pipeline_dir):
    lines = open(os.path.join(pipeline_dir["model"], "runlog.csv")).read().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_loss,orth_loss,mean_entropy"
    assert len(lines) == 3  # header + 2 epochs
    cfg_text = open(os.path.join(pipeline_dir["model"], "config.txt")).read()
    assert "mode=gloria" in cfg_text and "epochs=2" in cfg_text


def test_eval_reports_per_region(pipeline_dir, capsys):
    assert run(["eval", "--data", pipeline_dir["data"],
                "--model", pipeline_dir["model"]]) == 0
    out = capsys.readouterr().out
    assert "mean_loss=" in out and "region 0:" in out


def test_gate_matrix_shape(pipeline_dir):
    gm = interp.load_gate_matrix(pipeline_dir["gates"],
                                 pipeline_dir["gates"] + ".locations.csv")
    assert gm.g.shape == (8, 40)  # 2 sites x rank 4, 40 locations
    assert all(loc.region >= 0 for loc in gm.locations)


def test_nmf_artifacts_loadable(pipeline_dir):
    f = interp.load_nmf(pipeline_dir["nmf"])
    assert f.s.shape == (8, 3) and f.l.shape == (3, 40)
    assert np.all(f.s >= 0) and np.all(f.l >= 0)


def test_aggregate_matrix_shape(pipeline_dir):
    agg = load_matrix(pipeline_dir["agg"])
    assert agg.shape == (3, 4)


def test_elbow_command(pipeline_dir, tmp_path, capsys):
    out = str(tmp_path / "elbow.csv")
    assert run(["elbow", "--gates", pipeline_dir["gates"], "--k-min", "1",
                "--k-max", "4", "--iters", "40", "--out", out]) == 0
    assert "k*=" in capsys.readouterr().out
    lines = open(out).read().splitlines()
    assert len(lines) == 5  # header + 4 candidates


def test_map_command(pipeline_dir, tmp_path):
    csv_out = str(tmp_path / "m.csv")
    svg_out = str(tmp_path / "m.svg")
    assert run(["map", "--gates", pipeline_dir["gates"],
                "--nmf", pipeline_dir["nmf"], "--component", "0",
                "--out-csv", csv_out, "--out-svg", svg_out]) == 0
    assert len(open(csv_out).read().splitlines()) == 41
    assert open(svg_out).read().startswith("<?xml")


def test_heatmap_command(pipeline_dir, tmp_path):
    out = str(tmp_path / "h.svg")
    assert run(["heatmap", "--aggregate", pipeline_dir["agg"],
                "--out", out]) == 0
    assert out and "</svg>" in open(out).read()


def test_missing_dataset_is_reported_not_raised(tmp_path, capsys):
    assert run(["train", "--data", str(tmp_path / "nope.csv"),
                "--out", str(tmp_path / "m")]) == 1
    assert "error:" in capsys.readouterr().err
