import csv
import json

import numpy as np
import pytest

from diffmask.cli import main, read_pgm, sweep_grid, build_parser
from diffmask.masks import load_theta
from diffmask.mri import load_mask


def run(tmp_path, *argv):
    return main([argv[0], "--out", str(tmp_path), *argv[1:]])


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root), "--name", "data"]) == 0
    return root / "data"


def test_gen_data_defaults(data):
    man = json.loads((data / "manifest.json").read_text())
    files = sorted((data / "images").iterdir())
    assert len(files) == 45
    ids = [set(man["splits"][s]) for s in ("train", "val", "test")]
    assert [len(i) for i in ids] == [20, 5, 20]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert json.loads((data / "config.json").read_text())["args"]["command"] == "gen-data"


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run(tmp_path, "gen-data", "--name", name, "--n-train", "2", "--n-val", "1", "--n-test", "2", "--seed", "4") == 0
    for f in (tmp_path / "a" / "images").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_run_directory_is_never_overwritten(tmp_path, capsys):
    assert run(tmp_path, "gen-data", "--name", "d", "--n-train", "1", "--n-val", "0", "--n-test", "1") == 0
    before = (tmp_path / "d" / "manifest.json").read_bytes()
    assert run(tmp_path, "gen-data", "--name", "d", "--n-train", "2", "--n-val", "0", "--n-test", "1") == 2
    assert "already exists" in capsys.readouterr().err
    assert (tmp_path / "d" / "manifest.json").read_bytes() == before


def test_out_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DIFFMASK_OUT", str(tmp_path / "env"))
    assert main(["gen-data", "--n-train", "1", "--n-val", "0", "--n-test", "1"]) == 0
    assert (tmp_path / "env" / "gen-data" / "manifest.json").is_file()


def test_train_score_zero_epochs_and_reruns(tmp_path):
    small = ["--n-images", "4", "--h", "8", "--w", "8", "--arch", "mlp", "--hidden", "8"]
    assert run(tmp_path, "train-score", "--name", "z", "--epochs", "0", *small) == 0
    assert len(read_csv(tmp_path / "z" / "loss.csv")) == 1
    for name in ("a", "b"):
        assert run(tmp_path, "train-score", "--name", name, "--epochs", "2", *small) == 0
    assert (tmp_path / "a" / "model.dmnet").read_bytes() == (tmp_path / "b" / "model.dmnet").read_bytes()
    assert (tmp_path / "a" / "model.dmnet").read_bytes() != (tmp_path / "z" / "model.dmnet").read_bytes()


def test_learn_mask_zero_epochs(tmp_path, data):
    assert run(tmp_path, "learn-mask", "--data", str(data), "--score", "gmm", "--epochs", "0") == 0
    out = tmp_path / "learn-mask"
    assert not np.any(load_theta(out / "theta.bin").theta)
    assert {p.name for p in out.iterdir()} >= {"theta.bin", "train_log.csv", "mask.txt", "probs.pgm", "config.json"}


def test_learn_mask_render_header(tmp_path, data):
    argv = ["--data", str(data), "--score", "gmm", "--epochs", "1", "--n-train", "2", "--val-steps", "5"]
    assert run(tmp_path, "learn-mask", *argv, "--pattern", "point", "--R", "6") == 0
    out = tmp_path / "learn-mask"
    px, notes = read_pgm(out / "probs.pgm")
    head = dict(n.split(" ", 1) for n in notes)
    assert head["pattern"] == "POINT" and float(head["target_R"]) == 6.0
    assert abs(float(head["expected_R"]) - 6.0) < 1e-8
    mask = load_mask(out / "mask.txt")
    assert float(head["sampled_R"]) == mask.n_sites / mask.n_kept
    # a hard draw at R=6 on 1024 sites: within four binomial standard errors of 1/6
    assert abs(mask.n_kept / 1024 - 1 / 6) < 4 * np.sqrt((1 / 6) * (5 / 6) / 1024) + 16 / 1024
    assert px.shape == (32, 32)
    log = read_csv(out / "train_log.csv")
    assert len(log) == 2 and log[-1]["val_error"] != ""


def test_reconstruct_missing_mask(tmp_path, data, capsys):
    assert run(tmp_path, "reconstruct", "--data", str(data), "--score", "gmm", "--mask", str(tmp_path / "nope.txt")) == 2
    assert "not found" in capsys.readouterr().err
    assert not (tmp_path / "reconstruct").exists()


def test_reconstruct_outputs_and_determinism(tmp_path, data):
    argv = ["--data", str(data), "--score", "gmm", "--mask", "full-line", "--limit", "2", "--steps", "10"]
    for name in ("a", "b"):
        assert run(tmp_path, "reconstruct", "--name", name, *argv) == 0
    files = sorted(p.name for p in (tmp_path / "a" / "recon").iterdir())
    assert files == sorted(f"test-00{i}{s}" for i in range(2) for s in (".cimg", ".pgm", "_residual_x4.pgm"))
    for f in files:
        assert (tmp_path / "a" / "recon" / f).read_bytes() == (tmp_path / "b" / "recon" / f).read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    _, notes = read_pgm(tmp_path / "a" / "recon" / "test-000_residual_x4.pgm")
    assert "residual x4" in notes


@pytest.mark.slow
def test_reconstruct_full_mask_with_trained_score(tmp_path, data, desk_net_path):
    # the normalized DPS step has a fixed length of about 2 rho, so exact recovery needs many small steps
    argv = ["--data", str(data), "--checkpoint", str(desk_net_path), "--mask", "full-line", "--steps", "400", "--rho", "0.25"]
    assert run(tmp_path, "reconstruct", *argv) == 0
    rows = read_csv(tmp_path / "reconstruct" / "metrics.csv")
    assert len(rows) == 20
    assert min(float(r["ssim"]) for r in rows) > 0.99


def test_evaluate_two_masks_two_rows(tmp_path, data):
    assert run(tmp_path, "reconstruct", "--name", "probe", "--data", str(data), "--score", "gmm", "--mask", "full-line", "--limit", "1", "--steps", "1") == 0
    mask_file = tmp_path / "m.txt"
    mask_file.write_text("MASK LINE 32 32 0\n" + ("1" * 16 + "0" * 16 + "\n") * 32)
    argv = ["--data", str(data), "--score", "gmm", "--mask", "full-line", "--mask", str(mask_file), "--steps", "2"]
    assert run(tmp_path, "evaluate", *argv) == 0
    rows = read_csv(tmp_path / "evaluate" / "aggregate.csv")
    assert [r["mask_id"] for r in rows] == ["full-line", "m"]
    assert [float(r["R"]) for r in rows] == [1.0, 2.0]
    assert all(int(r["n_images"]) == 20 for r in rows)


def test_evaluate_empty_test_set(tmp_path):
    assert run(tmp_path, "gen-data", "--name", "d", "--n-train", "2", "--n-val", "0", "--n-test", "0") == 0
    argv = ["--data", str(tmp_path / "d"), "--score", "gmm", "--mask", "full-line"]
    assert run(tmp_path, "evaluate", *argv) == 2


def test_sweep_grid_cardinality(tmp_path):
    args = build_parser().parse_args(["sweep", "--data", "x", "--steps", "25,100,400", "--rho", "0.5,1", "--s-churn", "0,10,20,50"])
    assert len(sweep_grid(args)) == 24
    assert run(tmp_path, "gen-data", "--name", "d", "--n-train", "3", "--n-val", "0", "--n-test", "2") == 0
    argv = ["--data", str(tmp_path / "d"), "--score", "gmm", "--baseline", "equispaced", "--R", "4,8", "--steps", "1,2", "--rho", "0,1"]
    assert run(tmp_path, "sweep", *argv) == 0
    rows = read_csv(tmp_path / "sweep" / "aggregate.csv")
    assert len(rows) == 2 * 2 * 2
    assert {r["mask_id"] for r in rows} == {"equispaced-R4", "equispaced-R8"}


def test_replay_reproduces_outputs(tmp_path, data):
    argv = ["--data", str(data), "--score", "gmm", "--mask", "full-point", "--limit", "2", "--steps", "5", "--s-churn", "3"]
    assert run(tmp_path, "reconstruct", *argv) == 0
    assert main(["replay", str(tmp_path / "reconstruct" / "config.json"), "--out", str(tmp_path)]) == 0
    a, b = tmp_path / "reconstruct", tmp_path / "reconstruct-replay"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "recon" / "test-001.cimg").read_bytes() == (b / "recon" / "test-001.cimg").read_bytes()
