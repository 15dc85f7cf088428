import hashlib
from pathlib import Path

import numpy as np
import pytest

from lungrisk import cli, fileio, pancan
from lungrisk.pancan import placeholder_weights_path


def run(argv):
    return cli.main([str(a) for a in argv])


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    """A tiny simulated dataset shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli_data")
    data = root / "data"
    assert run(["simulate", "--n", 24, "--prevalence", 0.35, "--seed", 99,
                "--out", data, "--dims", 72]) == 0
    return data


@pytest.fixture(scope="module")
def small_model(small_data, tmp_path_factory):
    model = tmp_path_factory.mktemp("cli_model") / "model"
    assert run(["train", "--data", small_data, "--folds", 2, "--dropout", 0.25,
                "--epochs", 2, "--seed", 1, "--out", model]) == 0
    return model


# ---------------------------------------------------------------------------
# simulate


def test_simulate_outputs(small_data):
    assert (small_data / "candidates.csv").exists()
    assert (small_data / "labels.csv").exists()
    assert (small_data / "manifest.txt").exists()
    labels = fileio.read_labels_csv(small_data / "labels.csv")
    assert len(labels) == 24
    assert len(list((small_data / "volumes").glob("*.lrvol"))) == 24


def test_simulate_rerun_identical_manifest(small_data, tmp_path):
    out = tmp_path / "again"
    assert run(["simulate", "--n", 24, "--prevalence", 0.35, "--seed", 99,
                "--out", out, "--dims", 72]) == 0
    assert file_hash(out / "manifest.txt") == file_hash(small_data / "manifest.txt")
    assert file_hash(out / "candidates.csv") == file_hash(small_data / "candidates.csv")


def test_simulate_requires_seed(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run(["simulate", "--n", 5, "--prevalence", 0.2, "--out", tmp_path / "x"])
    assert exc.value.code == 2


def test_simulate_bad_prevalence_is_usage_error(tmp_path):
    assert run(["simulate", "--n", 5, "--prevalence", 1.5, "--seed", 1,
                "--out", tmp_path / "x"]) == cli.EXIT_USAGE


# ---------------------------------------------------------------------------
# train


def test_train_writes_fold_files_and_logs(small_model):
    folds = sorted(p.name for p in small_model.glob("fold*.lrnn"))
    assert folds == ["fold0.lrnn", "fold1.lrnn"]
    loss = (small_model / "training_loss.csv").read_text().splitlines()
    assert loss[0] == "fold,epoch,loss"
    assert len(loss) == 1 + 2 * 2  # 2 folds x 2 epochs
    assert "dropout_rate=0.25" in (small_model / "resolved_config.txt").read_text()


def test_train_rejects_dropout_one(small_data, tmp_path):
    assert run(["train", "--data", small_data, "--folds", 1, "--dropout", 1.0,
                "--epochs", 1, "--seed", 1, "--out", tmp_path / "m"]) == cli.EXIT_USAGE


def test_train_accepts_high_dropout_regime(small_data, tmp_path):
    assert run(["train", "--data", small_data, "--folds", 1, "--dropout", 0.9,
                "--epochs", 1, "--seed", 1, "--out", tmp_path / "m"]) == 0


def test_train_data_consistency_error_lists_offenders(small_data, tmp_path, capsys):
    data = tmp_path / "broken"
    data.mkdir()
    (data / "volumes").symlink_to(small_data / "volumes")
    (data / "candidates.csv").write_text(
        (small_data / "candidates.csv").read_text())
    labels = fileio.read_labels_csv(small_data / "labels.csv")
    dropped = sorted(labels)[0]
    del labels[dropped]
    fileio.write_labels_csv(data / "labels.csv", labels)
    code = run(["train", "--data", data, "--folds", 1, "--epochs", 1,
                "--seed", 1, "--out", tmp_path / "m"])
    assert code == cli.EXIT_DATA
    assert dropped in capsys.readouterr().err


def test_train_config_file_with_flag_override(small_data, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs=1\ndropout_rate=0.5\nbatch_size=8\n")
    model = tmp_path / "m"
    assert run(["train", "--data", small_data, "--folds", 1, "--seed", 2,
                "--config", cfg, "--out", model]) == 0
    resolved = (model / "resolved_config.txt").read_text()
    assert "dropout_rate=0.5" in resolved and "epochs=1" in resolved


# ---------------------------------------------------------------------------
# score


def test_score_deterministic_and_in_range(small_data, small_model, tmp_path):
    out1 = tmp_path / "s1.csv"
    out2 = tmp_path / "s2.csv"
    assert run(["score", "--model", small_model, "--data", small_data, "--out", out1]) == 0
    assert run(["score", "--model", small_model, "--data", small_data, "--out", out2]) == 0
    assert file_hash(out1) == file_hash(out2)
    scores = fileio.read_scores_csv(out1)
    assert len(scores) == 24
    assert all(0.0 <= v <= 1.0 for v in scores.values())


def test_score_threads_do_not_change_results(small_data, small_model, tmp_path):
    out1 = tmp_path / "t1.csv"
    out4 = tmp_path / "t4.csv"
    assert run(["score", "--model", small_model, "--data", small_data, "--out", out1,
                "--threads", 1]) == 0
    assert run(["score", "--model", small_model, "--data", small_data, "--out", out4,
                "--threads", 4]) == 0
    assert file_hash(out1) == file_hash(out4)


def test_score_unknown_scan_id_is_explicit_error(small_data, small_model, tmp_path, capsys):
    scan_list = tmp_path / "scans.txt"
    scan_list.write_text("scan_00000\nno_such_scan\n")
    code = run(["score", "--model", small_model, "--data", small_data,
                "--out", tmp_path / "s.csv", "--scans", scan_list])
    assert code == cli.EXIT_DATA
    assert "no_such_scan" in capsys.readouterr().err


def test_score_checksum_failure_is_io_error(small_data, small_model, tmp_path):
    broken = tmp_path / "broken_model"
    broken.mkdir()
    for p in small_model.glob("fold*.lrnn"):
        blob = bytearray(p.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        (broken / p.name).write_bytes(bytes(blob))
    assert run(["score", "--model", broken, "--data", small_data,
                "--out", tmp_path / "s.csv"]) == cli.EXIT_IO


# ---------------------------------------------------------------------------
# eval / compare / pancan


def test_eval_prints_auc_and_writes_reports(small_data, small_model, tmp_path, capsys):
    scores_csv = tmp_path / "scores.csv"
    run(["score", "--model", small_model, "--data", small_data, "--out", scores_csv])
    capsys.readouterr()
    code = run(["eval", "--scores", scores_csv, "--labels", small_data / "labels.csv",
                "--out", tmp_path / "rep"])
    assert code == 0
    out = capsys.readouterr().out
    assert "AUC: 0." in out or "AUC: 1." in out
    assert (tmp_path / "rep_report.csv").exists()
    assert (tmp_path / "rep_roc.csv").exists()


def test_eval_group_by_lungrads_adds_rows(small_data, small_model, tmp_path, capsys):
    scores_csv = tmp_path / "scores.csv"
    run(["score", "--model", small_model, "--data", small_data, "--out", scores_csv])
    code = run(["eval", "--scores", scores_csv, "--labels", small_data / "labels.csv",
                "--group-by", "lungrads", "--candidates", small_data / "candidates.csv",
                "--out", tmp_path / "rep"])
    assert code == 0
    report = (tmp_path / "rep_report.csv").read_text()
    assert "lungrads_" in report


def test_eval_degenerate_cohort_diagnostic(tmp_path, capsys):
    fileio.write_scores_csv(tmp_path / "s.csv", {"a": 0.5, "b": 0.6})
    fileio.write_labels_csv(tmp_path / "l.csv", {"a": 1, "b": 1})
    code = run(["eval", "--scores", tmp_path / "s.csv", "--labels", tmp_path / "l.csv"])
    assert code == 1
    assert "both classes" in capsys.readouterr().err


def test_compare_p_value_and_reproducibility(small_data, tmp_path, capsys):
    labels = fileio.read_labels_csv(small_data / "labels.csv")
    rng = np.random.default_rng(0)
    good = {sid: 0.8 * label + 0.2 * rng.random() for sid, label in labels.items()}
    bad = {sid: rng.random() for sid in labels}
    fileio.write_scores_csv(tmp_path / "good.csv", good)
    fileio.write_scores_csv(tmp_path / "bad.csv", bad)
    code = run(["compare", "--a", tmp_path / "good.csv", "--b", tmp_path / "bad.csv",
                "--labels", small_data / "labels.csv", "--perms", 500, "--seed", 3,
                "--out", tmp_path / "cmp.csv"])
    assert code == 0
    out = capsys.readouterr().out
    assert "p-value" in out
    first = (tmp_path / "cmp.csv").read_text()
    run(["compare", "--a", tmp_path / "good.csv", "--b", tmp_path / "bad.csv",
         "--labels", small_data / "labels.csv", "--perms", 500, "--seed", 3,
         "--out", tmp_path / "cmp.csv"])
    assert (tmp_path / "cmp.csv").read_text() == first


def test_pancan_max_vs_mean_and_single_nodule_identity(small_data, tmp_path):
    features_csv = small_data / "pancan_features.csv"
    max_csv = tmp_path / "max.csv"
    mean_csv = tmp_path / "mean.csv"
    assert run(["pancan", "--weights", placeholder_weights_path(), "--features",
                features_csv, "--agg", "max", "--out", max_csv]) == 0
    assert run(["pancan", "--weights", placeholder_weights_path(), "--features",
                features_csv, "--agg", "mean", "--out", mean_csv]) == 0
    smax = fileio.read_scores_csv(max_csv)
    smean = fileio.read_scores_csv(mean_csv)
    features = pancan.read_features_csv(features_csv)
    multi = [sid for sid, nods in features.items() if len(nods) > 1]
    single = [sid for sid, nods in features.items() if len(nods) == 1]
    assert any(smax[sid] != smean[sid] for sid in multi)
    assert all(smax[sid] == smean[sid] for sid in single)


def test_pancan_zero_weight_file_scores_half(small_data, tmp_path):
    weights = pancan.PanCanWeights(values={k: 0.0 for k in pancan.WEIGHT_KEYS})
    wpath = tmp_path / "zero.txt"
    pancan.save_weights(weights, wpath)
    out = tmp_path / "s.csv"
    assert run(["pancan", "--weights", wpath, "--features",
                small_data / "pancan_features.csv", "--out", out]) == 0
    assert all(v == 0.5 for v in fileio.read_scores_csv(out).values())


def test_pancan_missing_weight_key_is_usage_error(small_data, tmp_path, capsys):
    wpath = tmp_path / "partial.txt"
    wpath.write_text("version=1\nage=0.1\n")
    code = run(["pancan", "--weights", wpath, "--features",
                small_data / "pancan_features.csv", "--out", tmp_path / "s.csv"])
    assert code == cli.EXIT_USAGE
    assert "diameter_mm" in capsys.readouterr().err
