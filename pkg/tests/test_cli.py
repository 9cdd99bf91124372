import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from priorloc.cli import (EXIT_BAD_INPUT, EXIT_CONFIG, EXIT_EVAL_FAILED, EXIT_INIT_FAILED,
                          EXIT_MISSING_FILE, EXIT_OK, EXIT_USAGE, main)
from priorloc.cloudio import PointCloud, load_cloud, save_cloud
from priorloc.evaluation import read_tum
from conftest import GOLDEN


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    payload = json.loads(err.strip().splitlines()[-1])
    assert set(payload) >= {"error", "exit_code", "message"}
    return payload


def kv(out):
    return dict(line.split("\t", 1) for line in out.splitlines() if "\t" in line)


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main(["--seed", "42", "simulate", str(GOLDEN / "scene.yaml"), "--out", str(root / "sim")])
    assert code == EXIT_OK
    return root


# ---------------------------------------------------------------- usage and help


def test_no_command_is_usage(capsys):
    code, _, err = run(capsys)
    assert code == EXIT_USAGE and "usage" in err


@pytest.mark.parametrize("command, keys", [
    ("craft", ["--sample.voxel_size", "--mls.search_radius", "--mls.polynomial_order"]),
    ("ground", ["--ground.cloth_resolution", "--ground.class_threshold", "--ground.rigidness"]),
    ("traverse", ["--traverse.slope_critical", "--traverse.cost_cutoff"]),
    ("localize", ["--localize.map_update_enable_time", "--refine.trim_sigmas", "--icp.max_iterations"]),
    ("eval", ["--eval.outlier_threshold"]),
])
def test_help_lists_config_keys(capsys, command, keys):
    code, out, _ = run(capsys, command, "--help")
    assert code == EXIT_OK
    for k in keys:
        assert k in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "priorloc", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout and "init-pose" in proc.stdout


def test_bad_threads(capsys, tmp_path):
    code, _, err = run(capsys, "--threads", "0", "craft", tmp_path / "x.ply", "--output", tmp_path / "y.ply")
    assert code == EXIT_USAGE and error_of(err)["error"] == "bad_threads"


# ---------------------------------------------------------------- error codes


def test_missing_input(capsys, tmp_path):
    code, _, err = run(capsys, "craft", tmp_path / "nope.ply", "--output", tmp_path / "o.ply")
    e = error_of(err)
    assert code == EXIT_MISSING_FILE and e["exit_code"] == EXIT_MISSING_FILE and "nope.ply" in e["message"]


def test_unknown_config_key(capsys, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"ground": {"stiffness": 3}}))
    save_cloud(PointCloud(np.zeros((3, 3))), tmp_path / "in.ply")
    code, _, err = run(capsys, "--config", cfg, "craft", tmp_path / "in.ply", "--output", tmp_path / "o.ply")
    assert code == EXIT_CONFIG and "ground.stiffness" in error_of(err)["message"]


def test_bad_override(capsys, tmp_path):
    save_cloud(PointCloud(np.zeros((3, 3))), tmp_path / "in.ply")
    code, _, err = run(capsys, "ground", tmp_path / "in.ply", "--ground-out", tmp_path / "g.ply",
                       "--nonground-out", tmp_path / "n.ply", "--ground.rigidness", "9")
    assert code == EXIT_CONFIG and error_of(err)["error"] == "invalid_config"


def test_bad_scene(capsys, tmp_path):
    scene = tmp_path / "s.yaml"
    scene.write_text(yaml.safe_dump({"bounds": [0, 1, 0, 1], "boxes": [{"min": [0, 0, 0]}]}))
    code, _, err = run(capsys, "simulate", scene, "--out", tmp_path / "o")
    assert code == EXIT_CONFIG and "scene.boxes[0]" in error_of(err)["message"]


def test_malformed_cloud(capsys, tmp_path):
    bad = tmp_path / "bad.ply"
    bad.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nend_header\n1\n")
    code, _, err = run(capsys, "craft", bad, "--output", tmp_path / "o.ply")
    assert code == EXIT_BAD_INPUT and error_of(err)["error"] == "parse_error"


def test_craft_empty_cloud(capsys, tmp_path):
    save_cloud(PointCloud.empty(), tmp_path / "empty.ply")
    code, out, _ = run(capsys, "craft", tmp_path / "empty.ply", "--output", tmp_path / "o.ply")
    assert code == EXIT_OK and kv(out)["output_points"] == "0"
    assert len(load_cloud(tmp_path / "o.ply")) == 0


def test_traverse_empty_cloud(capsys, tmp_path):
    save_cloud(PointCloud.empty(), tmp_path / "empty.ply")
    code, _, err = run(capsys, "traverse", tmp_path / "empty.ply", "--out-prefix", tmp_path / "c")
    assert code == EXIT_BAD_INPUT and error_of(err)["error"] == "empty_input"


# ---------------------------------------------------------------- commands on a simulated run


def test_simulate_outputs(sim):
    meta = json.loads((sim / "sim" / "metadata.json").read_text())
    assert meta["seed"] == 42 and meta["scans"] == 50
    assert len(read_tum(sim / "sim" / "ground_truth.tum")) == 50
    assert (sim / "sim" / "reference.ply").exists()


def test_ground_and_traverse(capsys, sim):
    ref = sim / "sim" / "reference.ply"
    code, out, _ = run(capsys, "ground", ref, "--ground-out", sim / "g.ply", "--nonground-out", sim / "n.ply")
    counts = kv(out)
    assert code == EXIT_OK
    assert int(counts["ground_points"]) + int(counts["nonground_points"]) == len(load_cloud(ref))
    code, out, _ = run(capsys, "traverse", sim / "g.ply", "--out-prefix", sim / "cm" / "cm")
    assert code == EXIT_OK
    for name in ("cm.pgm", "cm.yaml", "cm_slope.csv", "cm_traversability.csv", "cm_layers.png"):
        assert (sim / "cm" / name).stat().st_size > 0
    info = kv(out)
    cells = int(info["width"]) * int(info["height"])
    assert int(info["free_cells"]) + int(info["occupied_cells"]) + int(info["unknown_cells"]) == cells


def test_init_pose(capsys, sim):
    ref = sim / "sim" / "reference.ply"
    code, out, _ = run(capsys, "init-pose", sim / "sim", ref, "--guess", "-2 0 1 0",
                       "--output", sim / "init.tum")
    assert code == EXIT_OK and float(kv(out)["fitness"]) < 0.01
    (t, T), = read_tum(sim / "init.tum")
    assert np.linalg.norm(T.translation - [-2, 0, 1]) < 0.02


def test_init_pose_bad_guess(capsys, sim):
    code, out, err = run(capsys, "init-pose", sim / "sim", sim / "sim" / "reference.ply", "--guess", "1 3 1 40")
    e = error_of(err)
    assert code == EXIT_INIT_FAILED and e["error"] == "init_failed"
    assert e["fitness"] > 0.01 and float(kv(out)["fitness"]) == pytest.approx(e["fitness"], rel=1e-6)


def test_guess_format(capsys, sim):
    code, _, err = run(capsys, "init-pose", sim / "sim", sim / "sim" / "reference.ply", "--guess", "1 2")
    assert code == EXIT_USAGE and error_of(err)["error"] == "bad_guess"


def test_localize_and_eval(capsys, sim):
    ref = sim / "sim" / "reference.ply"
    code, out, _ = run(capsys, "localize", sim / "sim", ref, "--guess", "-2 0 1 0", "--out", sim / "loc")
    assert code == EXIT_OK and kv(out)["scans"] == "50" and kv(out)["inserted_points"] == "0"
    code, out, _ = run(capsys, "eval", "--map", ref, "--registered", sim / "loc" / "registered.ply",
                       "--trajectory", sim / "loc" / "trajectory.tum", "--truth", sim / "sim" / "ground_truth.tum",
                       "--out", sim / "rep")
    assert code == EXIT_OK and "ate.rmse_m" in out and "FAST-LIO-LOC" in out
    report = json.loads((sim / "rep" / "report.json").read_text())
    assert report["ate_rmse"] < 0.01
    for fig in ("c2c_histogram.png", "trajectory.png"):
        assert (sim / "rep" / fig).stat().st_size > 1000


def test_eval_failures(capsys, sim, tmp_path):
    ref = sim / "sim" / "reference.ply"
    far = tmp_path / "far.ply"
    save_cloud(PointCloud(load_cloud(ref).points[:50] + 100.0), far)
    code, _, err = run(capsys, "eval", "--map", ref, "--registered", far, "--out", tmp_path / "r", "--no-figures")
    assert code == EXIT_EVAL_FAILED and error_of(err)["error"] == "eval_failed"
    late = tmp_path / "late.tum"
    late.write_text("999.0 0 0 0 0 0 0 1\n")
    code, _, err = run(capsys, "eval", "--map", ref, "--registered", ref, "--trajectory", late,
                       "--truth", sim / "sim" / "ground_truth.tum", "--out", tmp_path / "r", "--no-figures")
    assert code == EXIT_EVAL_FAILED
