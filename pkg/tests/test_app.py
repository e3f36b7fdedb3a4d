import logging
import os

import numpy as np
import pandas as pd
import pytest

import data
from app import configure_logging, main
from conftest import write_dataset
from errors import EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE

TINY = ["--channel-scale", "0.0625", "--train-size", "32", "--threads", "1", "--quiet"]


def _train(tmp_path, *extra, samples=8):
    manifest = write_dataset(str(tmp_path / "set"), count=samples, size=32)
    checkpoint = str(tmp_path / "model.fcnw")
    code = main(["train", "--manifest", manifest, "--out-checkpoint", checkpoint, *TINY, *extra])
    return code, manifest, checkpoint


def test_configure_logging_sets_only_the_root_level():
    library = logging.getLogger("dotenv.main")
    before = library.level
    configure_logging("DEBUG")
    assert logging.getLogger().level == logging.DEBUG
    assert library.level == before
    configure_logging("WARNING")
    assert logging.getLogger().level == logging.WARNING

@pytest.mark.parametrize("command", ["train", "predict", "eval", "pr-curve", "gradcheck"])
def test_help_lists_defaults(command, capsys):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    assert "--seed" in out and "(default:" in out
    assert "--corrupt-op" not in out


def test_train_smoke_run(tmp_path):
    code, _, checkpoint = _train(tmp_path, "--epochs", "1", "--batch-size", "4")
    assert code == EXIT_OK
    log = pd.read_csv(checkpoint + ".log.csv")
    assert list(log["epoch"]) == [0, 0]
    assert list(log["step"]) == [0, 1]
    assert os.path.isfile(checkpoint)


def test_train_with_missing_manifest_writes_nothing(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    code = main(["train", "--manifest", str(tmp_path / "nope.txt"),
                 "--out-checkpoint", str(out / "model.fcnw"), *TINY])
    assert code == EXIT_USAGE
    assert os.listdir(out) == []


def test_train_requires_out_checkpoint(tmp_path):
    manifest = write_dataset(str(tmp_path), count=1)
    assert main(["train", "--manifest", manifest, *TINY]) == EXIT_USAGE


def test_invalid_flag_value_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["train", "--epochs", "many"])
    assert info.value.code == EXIT_USAGE


def test_zero_learning_rate_logs_constant_loss(tmp_path):
    code, _, checkpoint = _train(tmp_path, "--epochs", "3", "--batch-size", "1", "--lr", "0", samples=1)
    assert code == EXIT_OK
    assert pd.read_csv(checkpoint + ".log.csv")["loss"].nunique() == 1


def test_equal_seeds_give_identical_logs(tmp_path):
    logs = []
    for run in ("a", "b"):
        code, _, checkpoint = _train(tmp_path / run, "--epochs", "2", "--batch-size", "3", "--seed", "5")
        assert code == EXIT_OK
        logs.append(open(checkpoint + ".log.csv").read())
    assert logs[0] == logs[1]


def test_config_file_values_yield_to_flags(tmp_path):
    settings = tmp_path / "run.cfg"
    settings.write_text("# tiny run\nepochs=2\nbatch_size=4\nlog_csv=" + str(tmp_path / "file.csv") + "\n")
    code, _, _ = _train(tmp_path, "--config", str(settings), "--epochs", "1")
    assert code == EXIT_OK
    log = pd.read_csv(tmp_path / "file.csv")
    assert len(log) == 2


def test_unknown_config_key_is_rejected(tmp_path):
    settings = tmp_path / "run.cfg"
    settings.write_text("learning_speed=3\n")
    code, _, _ = _train(tmp_path, "--config", str(settings))
    assert code == EXIT_USAGE


def test_resume_continues_from_checkpoint(tmp_path):
    code, manifest, checkpoint = _train(tmp_path, "--epochs", "1", "--batch-size", "4")
    assert code == EXIT_OK
    resumed = str(tmp_path / "resumed.fcnw")
    code = main(["train", "--manifest", manifest, "--out-checkpoint", resumed, "--resume", checkpoint,
                 "--epochs", "2", "--batch-size", "4", *TINY])
    assert code == EXIT_OK
    log = pd.read_csv(resumed + ".log.csv")
    assert list(log["epoch"]) == [1, 1]


def _checkpoint(tmp_path):
    code, _, checkpoint = _train(tmp_path, "--epochs", "1", "--batch-size", "8")
    assert code == EXIT_OK
    return checkpoint


def test_predict_keeps_input_size(tmp_path, rng):
    checkpoint = _checkpoint(tmp_path)
    image_path = str(tmp_path / "photo.ppm")
    data.write_image(data.ImageBuffer.from_array(rng.integers(0, 256, (100, 100, 3), dtype=np.uint8)), image_path)
    out_dir = tmp_path / "maps"
    code = main(["predict", "--checkpoint", checkpoint, "--input", image_path, "--out-dir", str(out_dir),
                 "--threads", "1", "--quiet"])
    assert code == EXIT_OK
    saliency = data.read_image(str(out_dir / "photo.pgm"))
    assert (saliency.width, saliency.height, saliency.channels) == (100, 100, 1)


def test_predict_directory_skips_corrupt_images(tmp_path, rng, capsys):
    checkpoint = _checkpoint(tmp_path)
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    for name in ("a", "b"):
        data.write_image(data.ImageBuffer.from_array(rng.integers(0, 256, (40, 48, 3), dtype=np.uint8)),
                         str(inputs / f"{name}.ppm"))
    (inputs / "broken.ppm").write_bytes(b"P6\n40 40\n255\n")
    out_dir = tmp_path / "maps"
    code = main(["predict", "--checkpoint", checkpoint, "--input", str(inputs), "--out-dir", str(out_dir),
                 "--threads", "2", "--quiet"])
    assert code == EXIT_OK
    assert sorted(os.listdir(out_dir)) == ["a.pgm", "b.pgm"]
    assert "Skipped 1" in capsys.readouterr().out


def test_predict_with_resize(tmp_path, rng):
    checkpoint = _checkpoint(tmp_path)
    image_path = str(tmp_path / "small.ppm")
    data.write_image(data.ImageBuffer.from_array(rng.integers(0, 256, (20, 30, 3), dtype=np.uint8)), image_path)
    code = main(["predict", "--checkpoint", checkpoint, "--input", image_path, "--out-dir", str(tmp_path / "m"),
                 "--resize", "32", "--quiet"])
    assert code == EXIT_OK
    saliency = data.read_image(str(tmp_path / "m" / "small.pgm"))
    assert (saliency.width, saliency.height) == (30, 20)


def test_predict_with_unreadable_checkpoint(tmp_path):
    bad = tmp_path / "bad.fcnw"
    bad.write_bytes(b"garbage")
    image_path = str(tmp_path / "x.ppm")
    data.write_image(data.ImageBuffer.from_array(np.zeros((8, 8, 3), np.uint8)), image_path)
    code = main(["predict", "--checkpoint", str(bad), "--input", image_path, "--out-dir", str(tmp_path / "m")])
    assert code == EXIT_USAGE


def _perfect_predictions(tmp_path, count=4):
    manifest_path = write_dataset(str(tmp_path / "gt"), count=count, size=32)
    manifest = data.load_manifest(manifest_path)
    pred_dir = tmp_path / "pred"
    pred_dir.mkdir()
    for i in range(count):
        mask = data.read_image(manifest.paths(i)[1])
        data.write_image(mask, str(pred_dir / f"{manifest.name(i)}.pgm"))
    return manifest_path, pred_dir


def test_eval_perfect_predictions(tmp_path, capsys):
    manifest, pred_dir = _perfect_predictions(tmp_path)
    out = tmp_path / "metrics.csv"
    code = main(["eval", "--pred-dir", str(pred_dir), "--manifest", manifest, "--out", str(out),
                 "--threads", "1", "--quiet"])
    assert code == EXIT_OK
    average = pd.read_csv(out).iloc[-1]
    assert average["image"] == "__average__"
    assert (average["precision"], average["recall"], average["mae"]) == (1.0, 1.0, 0.0)
    assert average["f_measure"] == pytest.approx(1.0)
    assert "__average__" in capsys.readouterr().out


def test_eval_lists_missing_predictions(tmp_path, capsys):
    manifest, pred_dir = _perfect_predictions(tmp_path)
    os.remove(pred_dir / "img1.pgm")
    os.remove(pred_dir / "img3.pgm")
    code = main(["eval", "--pred-dir", str(pred_dir), "--manifest", manifest, "--out", str(tmp_path / "m.csv"),
                 "--quiet"])
    assert code == EXIT_OK
    assert "img1, img3" in capsys.readouterr().out
    assert len(pd.read_csv(tmp_path / "m.csv")) == 3


def test_eval_several_manifests(tmp_path):
    manifest, pred_dir = _perfect_predictions(tmp_path)
    second = tmp_path / "gt" / "subset.txt"
    second.write_text(open(manifest).read().splitlines()[0] + "\n")
    code = main(["eval", "--pred-dir", str(pred_dir), "--manifest", manifest, str(second),
                 "--out", str(tmp_path / "m.csv"), "--quiet"])
    assert code == EXIT_OK
    assert len(pd.read_csv(tmp_path / "m_train.csv")) == 5
    assert len(pd.read_csv(tmp_path / "m_subset.csv")) == 2


def test_eval_without_overlap_is_a_usage_error(tmp_path):
    manifest, _ = _perfect_predictions(tmp_path)
    empty = tmp_path / "none"
    empty.mkdir()
    code = main(["eval", "--pred-dir", str(empty), "--manifest", manifest, "--out", str(tmp_path / "m.csv")])
    assert code == EXIT_USAGE


def test_pr_curve_export(tmp_path):
    manifest, pred_dir = _perfect_predictions(tmp_path)
    out = tmp_path / "pr.csv"
    code = main(["pr-curve", "--pred-dir", str(pred_dir), "--manifest", manifest, "--out", str(out), "--quiet"])
    assert code == EXIT_OK
    curve = pd.read_csv(out)
    assert len(curve) == 256
    assert (curve["precision"][curve["threshold"] < 1.0] == 1.0).all()
    assert curve["recall"].is_monotonic_decreasing


def test_gradcheck_default_run_passes(capsys):
    assert main(["gradcheck", "--quiet"]) == EXIT_OK
    assert "All" in capsys.readouterr().out


def test_gradcheck_catches_corrupted_rule(capsys):
    assert main(["gradcheck", "--quiet", "--repeats", "1", "--corrupt-op", "sigmoid"]) == EXIT_CHECK_FAILED
    assert "sigmoid" in capsys.readouterr().err


def test_gradcheck_rejects_zero_epsilon():
    assert main(["gradcheck", "--epsilon", "0"]) == EXIT_USAGE
