import shutil

import numpy as np
import pytest

from cordseg import pipeline as pl
from cordseg.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Phantom data plus a short training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["phantom", "--out", str(data), "--subjects", "3",
                 "--scans", "3", "--slices", "1", "--seed", "21"]) == 0
    run = root / "run"
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--profile", "phantom", "--iterations", "6",
                 "--validation-interval", "3", "--seed", "5",
                 "--train-subjects", "S00", "--val-subjects", "S01",
                 "--test-subjects", "S02"]) == 0
    return root


def test_phantom_writes_dataset_and_snapshot(workspace):
    data = workspace / "data"
    assert (data / "dataset.txt").exists()
    assert (data / "run_config.yaml").exists()
    assert len(list((data / "images").glob("*.mcs"))) == 9


def test_train_artifacts(workspace):
    run = workspace / "run"
    for name in ("final.ckpt", "best.ckpt", "training_log.csv", "timing.csv",
                 "run_config.yaml"):
        assert (run / name).exists(), name


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", "/tmp/x"])
    assert exc.value.code == 2


def test_lambda_out_of_range_exits_2(workspace, tmp_path):
    code = main(["train", "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "bad"), "--iterations", "2",
                 "--lam", "1.5"])
    assert code == 2


def test_unknown_data_dir_exits_2(tmp_path):
    code = main(["train", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")])
    assert code == 2


def test_segment_and_evaluate_roundtrip(workspace, tmp_path):
    data = workspace / "data"
    seg = tmp_path / "seg"
    inputs = sorted(str(p) for p in (data / "images").glob("S02_*.mcs"))
    assert main(["segment", "--checkpoint", str(workspace / "run/final.ckpt"),
                 "--input", *inputs, "--out", str(seg),
                 "--reference", str(data / "labels")]) == 0
    produced = sorted((seg / "labels").glob("*.lbl"))
    assert len(produced) == 3
    assert len(list((seg / "overlays").glob("*.png"))) == 3

    ev = tmp_path / "eval"
    assert main(["evaluate", "--auto", f"model={seg / 'labels'}",
                 "--reference", str(data / "labels"),
                 "--out", str(ev), "--sessions"]) == 0
    assert (ev / "per_slice_model.csv").exists()
    assert (ev / "table3_summary.csv").exists()
    assert (ev / "table1_summary.csv").exists()
    assert (ev / "by_slice_position_model.csv").exists()


def test_evaluate_reference_against_itself_is_perfect(workspace, tmp_path):
    data = workspace / "data"
    ev = tmp_path / "self"
    assert main(["evaluate", "--auto", f"ref={data / 'labels'}",
                 "--reference", str(data / "labels"), "--out", str(ev)]) == 0
    rows = (ev / "per_slice_ref.csv").read_text().splitlines()[1:]
    for row in rows:
        dsc = float(row.split(",")[4])
        assert dsc == 1.0


def test_evaluate_warns_on_unmatched(workspace, tmp_path):
    data = workspace / "data"
    partial = tmp_path / "partial"
    partial.mkdir()
    some = sorted((data / "labels").glob("*.lbl"))[:4]
    for p in some:
        shutil.copy(p, partial / p.name)
    with pytest.warns(UserWarning, match="one side only"):
        code = main(["evaluate", "--auto", f"p={partial}",
                     "--reference", str(data / "labels"),
                     "--out", str(tmp_path / "ev")])
    assert code == 0


def test_vote_identical_inputs_reproduce(workspace, tmp_path):
    data = workspace / "data"
    dirs = []
    for i in range(4):
        d = tmp_path / f"r{i}"
        shutil.copytree(data / "labels", d)
        dirs.append(str(d))
    out = tmp_path / "consensus"
    assert main(["vote", "--inputs", *dirs, "--out", str(out),
                 "--threshold", "2"]) == 0
    produced = sorted((out / "labels").glob("*.lbl"))
    assert len(produced) == 9
    original = pl.load_labels(sorted((data / "labels").glob("*.lbl"))[0])
    consensus = pl.load_labels(produced[0])
    np.testing.assert_array_equal(consensus.classes, original.classes)


def test_vote_threshold_strictness(tmp_path):
    base = np.zeros((4, 4), dtype=np.uint8)
    marked = base.copy()
    marked[1, 1] = pl.GM
    for i, classes in enumerate([marked, marked, base, base]):
        d = tmp_path / f"d{i}"
        d.mkdir()
        pl.save_labels(pl.LabelMap(classes, (1, 1), "X", 1, 1), d / "x.lbl")
    out = tmp_path / "out"
    assert main(["vote", "--inputs", *(str(tmp_path / f"d{i}") for i in range(4)),
                 "--out", str(out)]) == 0
    consensus = pl.load_labels(next((out / "labels").glob("*.lbl")))
    assert consensus.classes[1, 1] == 0  # 2 of 4 is not strictly more than 2


def test_vote_needs_two_dirs(tmp_path):
    d = tmp_path / "only"
    d.mkdir()
    assert main(["vote", "--inputs", str(d), "--out", str(tmp_path / "o")]) == 2


def test_augment_preview(workspace, tmp_path):
    out = tmp_path / "aug"
    assert main(["augment-preview", "--data", str(workspace / "data"),
                 "--out", str(out), "-n", "4", "--seed", "3"]) == 0
    assert len(list(out.glob("augmented_*.png"))) == 4


def test_metrics_subcommand(workspace, tmp_path, capsys):
    labels = sorted((workspace / "data" / "labels").glob("*.lbl"))
    assert main(["metrics", "--auto", str(labels[0]),
                 "--reference", str(labels[0]),
                 "--out", str(tmp_path / "m")]) == 0
    captured = capsys.readouterr().out
    assert "dsc" in captured and "1.000000" in captured
    assert (tmp_path / "m" / "pair_metrics.csv").exists()


def test_cli_reproducibility(workspace, tmp_path):
    data = workspace / "data"
    args = ["train", "--data", str(data), "--profile", "phantom",
            "--iterations", "4", "--validation-interval", "2", "--seed", "9",
            "--train-subjects", "S00", "--val-subjects", "S01",
            "--test-subjects", "S02"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert ((tmp_path / "a/training_log.csv").read_bytes()
            == (tmp_path / "b/training_log.csv").read_bytes())
    assert ((tmp_path / "a/final.ckpt").read_bytes()
            == (tmp_path / "b/final.ckpt").read_bytes())
    assert ((tmp_path / "a/run_config.yaml").read_bytes()
            == (tmp_path / "b/run_config.yaml").read_bytes())


def test_threads_flag_keeps_results_identical(workspace, tmp_path):
    data = workspace / "data"
    for label, extra in (("t1", ["--threads", "1"]), ("t2", ["--threads", "2"])):
        assert main(["evaluate", "--auto", f"ref={data / 'labels'}",
                     "--reference", str(data / "labels"),
                     "--out", str(tmp_path / label), *extra]) == 0
    assert ((tmp_path / "t1/per_slice_ref.csv").read_bytes()
            == (tmp_path / "t2/per_slice_ref.csv").read_bytes())


def test_config_file_profile_merge(workspace, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("train:\n  iterations: 3\n  lam: 0.25\n")
    out = tmp_path / "cfgrun"
    assert main(["train", "--data", str(workspace / "data"), "--out", str(out),
                 "--config", str(cfg), "--seed", "2",
                 "--train-subjects", "S00", "--val-subjects", "S01",
                 "--test-subjects", "S02"]) == 0
    import yaml

    snapshot = yaml.safe_load((out / "run_config.yaml").read_text())
    assert snapshot["train"]["iterations"] == 3
    assert snapshot["train"]["lam"] == 0.25
