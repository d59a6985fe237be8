import json
import subprocess
import sys

import numpy as np
import pytest

from savt.analysis import BoxAnnotation, make_scenes, pib
from savt.cli import main
from savt.container import read
from savt.vit import VitConfig, forward_batch, load_model


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return json.loads(out)


@pytest.fixture
def workdir(tmp_path, capsys):
    """Tiny entmax model plus a 12-image synthetic dump."""
    m, f = tmp_path / "m.savt", tmp_path / "f.savt"
    run_json(capsys, "--seed", 1, "model", "init", "--preset", "tiny", "--normalizer", "entmax15",
             "--out", m)
    run_json(capsys, "--seed", 2, "model", "dump-features", "--weights", m, "--synthetic", 12,
             "--out", f)
    return tmp_path


# -- normalize -------------------------------------------------------------


def test_normalize_examples(tmp_path, capsys):
    (tmp_path / "z.csv").write_text("0,0\n10,0\n\n1,0,-1\n")
    report = run_json(capsys, "normalize", "--input", tmp_path / "z.csv", "--cross-check")
    rows = report["rows"]
    assert rows[0]["p"] == [0.5, 0.5]
    assert rows[1]["support_size"] == 1
    assert len(rows) == 3
    assert report["cross_check"]["passed"]


def test_normalize_json_input_and_softmax(tmp_path, capsys):
    (tmp_path / "z.json").write_text("[[1, 0], [3]]")
    report = run_json(capsys, "normalize", "--input", tmp_path / "z.json", "--normalizer", "softmax")
    assert report["rows"][1]["p"] == [1.0]
    assert report["rows"][0]["tau"] is None


@pytest.mark.parametrize("text,where", [("0,0\n1,abc\n", "line 2"), ("1,2\n\n3,nan\n", "line 3")])
def test_normalize_parse_error_reports_line(tmp_path, capsys, text, where):
    (tmp_path / "z.csv").write_text(text)
    code, _, err = run(capsys, "normalize", "--input", tmp_path / "z.csv")
    assert code == 2
    assert where in err


def test_normalize_bad_json(tmp_path, capsys):
    (tmp_path / "z.json").write_text("[[1, 2],\n [3,")
    code, _, err = run(capsys, "normalize", "--input", tmp_path / "z.json")
    assert code == 2 and "line 2" in err


# -- exit codes ------------------------------------------------------------


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["model", "init"],
    ["model", "init", "--out", "x.savt", "--unknown-flag"],
    ["--threads", "0", "normalize", "--input", "x.csv"],
    ["probe", "cls", "--features", "x", "--lr-grid", "a,b"],
    ["probe", "dense", "--features", "x", "--train-fraction", "1.5"],
])
def test_usage_errors_exit_2(capsys, argv):
    assert run(capsys, *argv)[0] == 2


def test_missing_file_exits_1(tmp_path, capsys):
    code, _, err = run(capsys, "model", "forward", "--weights", tmp_path / "nope.savt", "--zeros")
    assert code == 1 and "error" in err


def test_corrupt_model_exits_1(tmp_path, capsys):
    (tmp_path / "bad.savt").write_bytes(b"NOPE" + bytes(40))
    assert run(capsys, "model", "forward", "--weights", tmp_path / "bad.savt", "--zeros")[0] == 1


def test_help_exits_0(capsys):
    assert run(capsys, "--help")[0] == 0


# -- model -----------------------------------------------------------------


def test_init_twice_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        run_json(capsys, "--seed", 7, "model", "init", "--registers", 2, "--out", tmp_path / f"{name}.savt")
    assert (tmp_path / "a.savt").read_bytes() == (tmp_path / "b.savt").read_bytes()


def test_config_file_overrides(tmp_path, capsys):
    (tmp_path / "cfg.txt").write_text("# smaller model\nn_layers = 1\nd_model=8\nn_heads=2\n")
    report = run_json(capsys, "model", "init", "--config-file", tmp_path / "cfg.txt",
                      "--out", tmp_path / "m.savt")
    assert report["config"]["n_layers"] == 1
    assert load_model(tmp_path / "m.savt").config.d_model == 8
    (tmp_path / "bad.txt").write_text("depth=3\n")
    assert run(capsys, "model", "init", "--config-file", tmp_path / "bad.txt",
               "--out", tmp_path / "x.savt")[0] == 2


def test_forward_zero_image(workdir, capsys):
    report = run_json(capsys, "model", "forward", "--weights", workdir / "m.savt", "--zeros",
                      "--out", workdir / "z.savt")
    t = VitConfig.tiny().n_tokens
    assert report["n_tokens"] == t
    _, _, tensors = read(workdir / "z.savt")
    assert tensors["layer.1"].shape == (1, t, 16)
    assert tensors["final"].shape == (1, t, 16)


def test_forward_npy_and_ppm_images(workdir, capsys):
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    np.save(workdir / "img.npy", img)
    from savt.analysis.imageio import write_ppm
    write_ppm(workdir / "img.ppm", img)
    for name in ("img.npy", "img.ppm"):
        report = run_json(capsys, "model", "forward", "--weights", workdir / "m.savt",
                          "--image", workdir / name)
        assert report["images"] == 1


def test_dump_then_pib_matches_in_process(workdir, capsys):
    report = run_json(capsys, "analyze", "pib", "--features", workdir / "f.savt")
    model = load_model(workdir / "m.savt")
    cfg = model.config
    scenes = make_scenes(12, cfg.image_size, cfg.patch_size, seed=2)
    batch = forward_batch(model, scenes.images, scenes.ids)
    direct = pib(batch, scenes.boxes).to_dict()
    assert report == json.loads(json.dumps(direct))


def test_pib_with_boxes_file(workdir, capsys):
    boxes = [BoxAnnotation(f"img{i:05d}", (0, 0, 32, 32)).to_dict() for i in range(12)]
    (workdir / "boxes.json").write_text(json.dumps(boxes))
    report = run_json(capsys, "analyze", "pib", "--features", workdir / "f.savt",
                      "--boxes", workdir / "boxes.json")
    assert report["fractions"] == [1.0, 1.0]


# -- analyze ---------------------------------------------------------------


def test_pca_ppm_dimensions(workdir, capsys):
    report = run_json(capsys, "analyze", "pca", "--features", workdir / "f.savt",
                      "--out", workdir / "pca.ppm", "--upscale", 3)
    assert report["grid"] == [4, 4]
    assert (workdir / "pca.ppm").read_bytes().startswith(b"P6\n12 12\n255\n")


def test_sim_grid(workdir, capsys):
    report = run_json(capsys, "analyze", "sim", "--features", workdir / "f.savt", "--layer", 2)
    sim = np.array(report["similarity"])
    assert sim.shape == (4, 4) and np.abs(sim).max() <= 1.0
    assert run(capsys, "analyze", "sim", "--features", workdir / "f.savt", "--image-index", 99)[0] == 2


def test_support_stats(workdir, capsys):
    report = run_json(capsys, "analyze", "support", "--weights", workdir / "m.savt", "--synthetic", 2)
    assert [l["layer"] for l in report["layers"]] == [1, 2]
    dense = run_json(capsys, "analyze", "support", "--weights", workdir / "m.savt", "--synthetic", 2,
                     "--normalizer", "softmax")
    assert all(l["mean"] == 1.0 for l in dense["layers"])


# -- probe -----------------------------------------------------------------


@pytest.mark.parametrize("task,metric", [("cls", "top1"), ("dense", "miou"), ("depth", "rmse")])
def test_probe_reports(workdir, capsys, task, metric):
    report = run_json(capsys, "probe", task, "--features", workdir / "f.savt", "--iters", 30)
    assert report["metric_name"] == metric
    assert report["hyper"]["iters"] == 30
    assert report["curve"]


def test_probe_dense_layer_sweep_global_bit(tmp_path, capsys):
    m, f = tmp_path / "m.savt", tmp_path / "f.savt"
    run_json(capsys, "model", "init", "--normalizer", "entmax15", "--out", m)
    run_json(capsys, "model", "dump-features", "--weights", m, "--synthetic", 48, "--out", f)
    report = run_json(capsys, "probe", "dense", "--layer-sweep", "--global-bit", "--features", f,
                      "--iters", 400)
    curves = report["curves"]
    assert len(curves["patch_only"]) == len(curves["cls_concat"]) == 2
    assert all(c >= p for c, p in zip(curves["cls_concat"], curves["patch_only"]))


def test_probe_four_layer_set_needs_four_layers(workdir, capsys):
    code, _, err = run(capsys, "probe", "dense", "--features", workdir / "f.savt", "--layer-set", "four")
    assert code == 2 and "n_layers" in err


def test_probe_output_is_deterministic(workdir, capsys):
    argv = ["--seed", 3, "probe", "cls", "--features", workdir / "f.savt", "--iters", 40,
            "--lr-grid", "0.01,0.1"]
    assert run(capsys, *argv)[1] == run(capsys, *argv)[1]


# -- accept ----------------------------------------------------------------


def test_accept_subset_writes_json(tmp_path, capsys):
    code, out, _ = run(capsys, "accept", "--only", "4,5", "--json", tmp_path / "s.json")
    assert code == 0 and "ALL PASS" in out
    summary = json.loads((tmp_path / "s.json").read_text())
    assert [c["id"] for c in summary["criteria"]] == [4, 5]
    assert "seconds" not in summary


def test_accept_negative_control_names_failures(capsys):
    code, out, _ = run(capsys, "accept", "--only", "1,3,4", "--inject-fault", "tau")
    assert code == 1
    failed_line = out.split("FAILED:")[1]
    for name in ("entmax simplex", "VJP finite-difference", "closed-form"):
        assert name in failed_line


def test_console_script_entry_point(tmp_path):
    (tmp_path / "z.csv").write_text("10,0\n")
    proc = subprocess.run([sys.executable, "-m", "savt.cli", "normalize", "--input", str(tmp_path / "z.csv")],
                          capture_output=True, text=True, env={"SAVT_THREADS": "2", "PATH": ""})
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["rows"][0]["p"] == [1.0, 0.0]
