"""End-to-end command line coverage: exit codes, config precedence, artifacts."""

import json

import numpy as np
import pytest

from bodyfit import datagen, nnet
from bodyfit import model as body_model
from bodyfit.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main
from bodyfit.renderer import rasterize_mask, write_pgm


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: a toy model, a small dataset, and one trained run."""
    root = tmp_path_factory.mktemp("cli")
    paths = {
        "model": str(root / "model.json"),
        "data": str(root / "data.bfd"),
        "run": str(root / "run"),
        "root": root,
    }
    rc = main(["make-model", "--joints", "5", "--vertices", "120",
               "--shape-dims", "4", "--out", paths["model"]])
    assert rc == EXIT_OK
    rc = main(["gen", "--model", paths["model"], "--count", "6",
               "--viewpoints", "0,40", "--seed", "3", "--noise-sigma", "0.5",
               "--out", paths["data"]])
    assert rc == EXIT_OK
    rc = main(["train", "--model", paths["model"], "--data", paths["data"],
               "--variant", "rotMat+vertex", "--phase1-steps", "8",
               "--phase2-steps", "4", "--batch-size", "4", "--width", "24",
               "--channels", "2,4", "--out", paths["run"]])
    assert rc == EXIT_OK
    return paths


def test_make_model_sidecar_and_validation(ws, tmp_path):
    model = body_model.load_model(ws["model"])
    assert model.n_joints == 6 and model.n_shape == 4
    sidecar = json.loads(open(ws["model"] + ".config.json").read())
    assert sidecar["command"] == "make-model"
    assert sidecar["joints"] == 5 and sidecar["vertices"] == 120
    assert main(["make-model", "--joints", "0",
                 "--out", str(tmp_path / "m.json")]) == EXIT_VALIDATION


def test_gen_is_byte_deterministic(ws, tmp_path):
    args = ["gen", "--model", ws["model"], "--count", "6",
            "--viewpoints", "0,40", "--seed", "3", "--noise-sigma", "0.5"]
    a, b, c = (str(tmp_path / n) for n in ("a.bfd", "b.bfd", "c.bfd"))
    assert main(args + ["--out", a]) == EXIT_OK
    assert main(args + ["--out", b]) == EXIT_OK
    assert open(a, "rb").read() == open(b, "rb").read()
    assert open(a, "rb").read() == open(ws["data"], "rb").read()
    assert main(args[:-2] + ["--seed", "4", "--out", c]) == EXIT_OK
    assert open(a, "rb").read() != open(c, "rb").read()


def test_config_file_merging(ws, tmp_path):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"count": 2, "seed": 9, "noise_sigma": 0.5}))
    out = str(tmp_path / "cfg.bfd")
    rc = main(["gen", "--config", str(cfg), "--model", ws["model"],
               "--count", "3", "--out", out])
    assert rc == EXIT_OK
    model = body_model.load_model(ws["model"])
    records = datagen.read_dataset(out, model.n_pose, model.n_shape, model.n_joints)
    assert len(records) == 3  # flag overrides the config file
    sidecar = json.loads(open(out + ".config.json").read())
    assert sidecar["count"] == 3 and sidecar["seed"] == 9

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"not_an_option": 1}))
    assert main(["gen", "--config", str(bad), "--model", ws["model"],
                 "--out", out]) == EXIT_VALIDATION
    bad.write_text("[1, 2]")
    assert main(["gen", "--config", str(bad), "--model", ws["model"],
                 "--out", out]) == EXIT_VALIDATION
    assert main(["gen", "--config", str(tmp_path / "absent.json"),
                 "--model", ws["model"], "--out", out]) == EXIT_IO


def test_missing_inputs_exit_codes(ws, tmp_path):
    assert main(["gen", "--out", str(tmp_path / "x.bfd")]) == EXIT_VALIDATION
    assert main(["train", "--model", str(tmp_path / "absent.json"),
                 "--data", ws["data"], "--out", str(tmp_path / "r")]) == EXIT_IO
    assert main(["predict", "--model", ws["model"], "--data", ws["data"],
                 "--nets", str(tmp_path / "norun"),
                 "--out", str(tmp_path / "p.json")]) == EXIT_IO


def test_train_artifacts(ws):
    pose_net, step, extra = nnet.load_checkpoint(ws["run"] + "/pose")
    assert extra["role"] == "pose" and step == 12
    log_lines = open(ws["run"] + "/loss_log.csv").read().strip().split("\n")
    assert log_lines[0] == "step,phase,param_loss,mesh_loss,total"
    assert len(log_lines) == 13
    sidecar = json.loads(open(ws["run"] + "/config.json").read())
    assert sidecar["command"] == "train" and sidecar["variant"] == "rotMat+vertex"


def test_predict_eval_pipeline(ws, tmp_path):
    preds = str(tmp_path / "preds.json")
    rc = main(["predict", "--model", ws["model"], "--data", ws["data"],
               "--nets", ws["run"], "--out", preds])
    assert rc == EXIT_OK
    doc = json.loads(open(preds).read())
    assert len(doc["records"]) == 6
    theta0 = np.array([float(x) for x in doc["records"][0]["theta"]])
    assert theta0.shape == (18,) and np.all(np.isfinite(theta0))

    report_path = str(tmp_path / "report.json")
    rc = main(["eval", "--model", ws["model"], "--data", ws["data"],
               "--predictions", preds, "--out", report_path])
    assert rc == EXIT_OK
    report = json.loads(open(report_path).read())
    assert report["sample_count"] == 6
    assert report["mean_per_vertex_error"] >= 0.0
    assert 0.0 <= report["seg_f1"] <= 1.0
    csv_lines = open(str(tmp_path / "report.csv")).read().strip().split("\n")
    assert len(csv_lines) == 2

    limited = str(tmp_path / "preds3.json")
    rc = main(["predict", "--model", ws["model"], "--data", ws["data"],
               "--nets", ws["run"], "--limit", "3", "--out", limited])
    assert rc == EXIT_OK
    assert len(json.loads(open(limited).read())["records"]) == 3
    # fewer predictions than records is a validation failure
    assert main(["eval", "--model", ws["model"], "--data", ws["data"],
                 "--predictions", limited, "--out", report_path]) == EXIT_VALIDATION


def test_fit_plain_and_anchored(ws, tmp_path):
    fits = str(tmp_path / "fits.json")
    rc = main(["fit", "--model", ws["model"], "--data", ws["data"],
               "--limit", "2", "--max-iters", "5", "--out", fits])
    assert rc == EXIT_OK
    doc = json.loads(open(fits).read())
    assert doc["anchored"] is False and len(doc["records"]) == 2
    assert all(isinstance(r["converged"], bool) for r in doc["records"])

    preds = str(tmp_path / "preds.json")
    assert main(["predict", "--model", ws["model"], "--data", ws["data"],
                 "--nets", ws["run"], "--limit", "2", "--out", preds]) == EXIT_OK
    rc = main(["fit", "--model", ws["model"], "--data", ws["data"],
               "--anchor", preds, "--limit", "2", "--max-iters", "5",
               "--out", fits])
    assert rc == EXIT_OK
    assert json.loads(open(fits).read())["anchored"] is True
    # anchor file shorter than the record list
    assert main(["fit", "--model", ws["model"], "--data", ws["data"],
                 "--anchor", preds, "--limit", "4", "--max-iters", "5",
                 "--out", fits]) == EXIT_VALIDATION


def test_fit_nonfinite_anchor_is_numerical_error(ws, tmp_path):
    bad = tmp_path / "bad_preds.json"
    model = body_model.load_model(ws["model"])
    rec = {"theta": ["inf"] + ["0.0"] * (model.n_pose - 1),
           "beta": ["0.0"] * model.n_shape}
    bad.write_text(json.dumps({"records": [rec]}))
    rc = main(["fit", "--model", ws["model"], "--data", ws["data"],
               "--anchor", str(bad), "--limit", "1", "--max-iters", "5",
               "--out", str(tmp_path / "f.json")])
    assert rc == EXIT_NUMERICAL


def test_render_matches_direct_rasterization(ws, tmp_path):
    prefix = str(tmp_path / "view")
    rc = main(["render", "--model", ws["model"], "--data", ws["data"],
               "--index", "1", "--soft", "--out", prefix])
    assert rc == EXIT_OK

    model = body_model.load_model(ws["model"])
    records = datagen.read_dataset(ws["data"], model.n_pose, model.n_shape,
                                   model.n_joints)
    vertices, _ = body_model.forward(model, records[1].beta, records[1].theta)
    mask = rasterize_mask(vertices, model.faces, records[1].camera)
    expected = str(tmp_path / "expected.pgm")
    write_pgm(expected, mask.astype(np.float64))
    assert open(prefix + ".pgm", "rb").read() == open(expected, "rb").read()

    obj_lines = open(prefix + ".obj").read().strip().split("\n")
    v_lines = [l for l in obj_lines if l.startswith("v ")]
    f_lines = [l for l in obj_lines if l.startswith("f ")]
    assert len(v_lines) == model.n_vertices and len(f_lines) == len(model.faces)
    first = np.array([float(t) for t in v_lines[0].split()[1:]])
    assert np.allclose(first, vertices[0], rtol=1e-8, atol=1e-12)
    assert (tmp_path / "view_soft.pgm").exists()

    assert main(["render", "--model", ws["model"], "--data", ws["data"],
                 "--index", "99", "--out", prefix]) == EXIT_VALIDATION


def test_ablate_writes_comparison_table(ws, tmp_path):
    out = str(tmp_path / "ablation.csv")
    rc = main(["ablate", "--model", ws["model"], "--data", ws["data"],
               "--holdout", "0.25", "--phase1-steps", "6", "--phase2-steps", "2",
               "--batch-size", "4", "--width", "16", "--channels", "2,4",
               "--out", out])
    assert rc == EXIT_OK
    lines = open(out).read().strip().split("\n")
    assert lines[0] == "variant,held_out_mean_per_vertex_error"
    variants = [line.split(",")[0] for line in lines[1:]]
    assert variants == ["axisAngle", "rotMat", "rotMat+vertex"]
    for line in lines[1:]:
        assert float(line.split(",")[1]) >= 0.0
