import os

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

import data
import evaluation as ev
from errors import ConfigurationError, DimensionError, UsageError
from training import l1_loss

BITS = np.array([(code >> np.arange(8)) & 1 for code in range(256)], dtype=np.uint8).reshape(256, 2, 4)


def _recount(m_bits, g_bits):
    m = bin(m_bits).count("1")
    g = bin(g_bits).count("1")
    both = bin(m_bits & g_bits).count("1")
    if m == 0:
        precision = 1.0 if g == 0 else 0.0
    else:
        precision = both / m
    recall = 1.0 if g == 0 else both / g
    return precision, recall


def test_precision_recall_exhaustive_over_2x4_masks():
    for a in range(256):
        for b in range(256):
            assert ev.precision_recall(BITS[a], BITS[b]) == _recount(a, b), (a, b)


def test_degenerate_cases():
    empty = np.zeros((2, 2), np.uint8)
    full = np.ones((2, 2), np.uint8)
    assert ev.precision_recall(empty, full) == (0.0, 0.0)
    assert ev.precision_recall(empty, empty) == (1.0, 1.0)
    assert ev.precision_recall(full, empty) == (0.0, 1.0)
    assert ev.f_measure(0.0, 0.0) == 0.0


def test_f_measure_matches_formula(rng):
    for p, r in rng.random((200, 2)):
        expected = (1 + 0.09) * p * r / (0.09 * p + r)
        assert abs(ev.f_measure(p, r) - expected) < 1e-12
    assert ev.f_measure(0.8, 0.5, beta_squared=1.0) == pytest.approx(2 * 0.8 * 0.5 / 1.3)


def test_mae_equals_l1_loss(rng):
    for _ in range(20):
        s = rng.random((1, 1, 9, 7)).astype(np.float32)
        g = (rng.random((1, 1, 9, 7)) > 0.5).astype(np.float32)
        assert abs(ev.mae(s, g) - l1_loss(s, g)) < 1e-12
        assert abs(ev.mae(s[0, 0], g[0, 0]) - l1_loss(s, g)) < 1e-12


def test_binarize_is_strict():
    s = np.array([0.2, 0.5, 0.50001, 1.0])
    assert list(ev.binarize(s, 0.5)) == [0, 0, 1, 1]
    with pytest.raises(ConfigurationError):
        ev.binarize(s, 1.5)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        ev.precision_recall(np.zeros((2, 2)), np.zeros((2, 3)))


def test_pr_curve_matches_brute_force_and_recall_never_increases(rng):
    for _ in range(50):
        shape = tuple(rng.integers(2, 12, size=2))
        s = rng.random(shape).astype(np.float32)
        s[rng.random(shape) < 0.1] = 0.5
        g = rng.random(shape) > 0.6
        curve = ev.pr_curve(s, g, 64)
        assert len(curve) == 64
        recalls = [r for _, _, r in curve]
        assert all(later <= earlier for earlier, later in zip(recalls, recalls[1:]))
        for t, p, r in curve[::7]:
            assert (p, r) == ev.precision_recall(ev.binarize(s, t), g)


def test_pr_curve_on_byte_maps_matches_binarize_at_every_level():
    levels = np.arange(256, dtype=np.uint8).reshape(16, 16)
    s = data.mask_to_tensor(data.ImageBuffer.from_array(levels))
    g = np.zeros(s.shape, bool)
    g[..., ::2] = True
    curve = ev.pr_curve(s, g, 256)
    for k, (t, p, r) in enumerate(curve):
        mask = ev.binarize(s, t)
        assert int(mask.sum()) == 255 - k
        assert (p, r) == ev.precision_recall(mask, g)


def test_pr_curve_of_perfect_prediction():
    g = np.zeros((4, 4), bool)
    g[1:3, 1:3] = True
    curve = ev.pr_curve(g.astype(np.float32), g, 256)
    assert curve[0][0] == 0.0 and curve[-1][0] == 1.0
    for t, p, r in curve:
        if t < 1.0:
            assert (p, r) == (1.0, 1.0)


def test_eval_config_validation():
    with pytest.raises(ConfigurationError, match="beta_squared"):
        ev.EvalConfig(beta_squared=0.0)
    with pytest.raises(ConfigurationError, match="pr_thresholds"):
        ev.EvalConfig(pr_thresholds=1)


def _write_maps(pred_dir, manifest, maps):
    os.makedirs(pred_dir, exist_ok=True)
    for index, saliency in maps.items():
        data.write_image(data.saliency_to_image(saliency), os.path.join(pred_dir, manifest.name(index) + ".pgm"))


def _ground_truth(manifest, index):
    return data.mask_to_tensor(data.read_image(manifest.paths(index)[1]))


def test_identical_predictions_score_perfectly(dataset_dir):
    root, path = dataset_dir
    manifest = data.load_manifest(path)
    pred_dir = str(root / "pred")
    _write_maps(pred_dir, manifest, {i: _ground_truth(manifest, i) for i in range(len(manifest))})
    report = ev.evaluate_dataset(ev.DirectoryMaps(pred_dir), manifest)
    avg = report.averages
    assert (avg.precision, avg.recall, avg.f_measure, avg.mae) == (1.0, 1.0, pytest.approx(1.0), 0.0)
    assert not report.skipped


def test_metrics_match_independent_recount(dataset_dir, rng):
    root, path = dataset_dir
    manifest = data.load_manifest(path)
    pred_dir = str(root / "pred")
    maps = {i: rng.random((1, 1, 32, 32)).astype(np.float32) for i in range(3)}
    _write_maps(pred_dir, manifest, maps)
    report = ev.evaluate_dataset(ev.DirectoryMaps(pred_dir), manifest, ev.EvalConfig(threshold=0.41))
    assert report.skipped == ["img3"]
    assert len(report.images) == 3
    for metrics in report.images:
        index = int(metrics.name[3:])
        s = np.floor(maps[index].astype(np.float64) * 255 + 0.5) / 255
        g = _ground_truth(manifest, index)[0, 0] > 0.5
        m = s[0, 0] > 0.41
        both = np.logical_and(m, g).sum()
        assert metrics.precision == pytest.approx(both / m.sum() if m.sum() else (1.0 if not g.any() else 0.0))
        assert metrics.recall == pytest.approx(both / g.sum() if g.sum() else 1.0)
        assert metrics.mae == pytest.approx(np.abs(s[0, 0] - g).mean(), abs=1e-6)
    assert report.averages.mae == pytest.approx(np.mean([m.mae for m in report.images]))


def test_threads_do_not_change_results(dataset_dir, rng):
    root, path = dataset_dir
    manifest = data.load_manifest(path)
    pred_dir = str(root / "pred")
    _write_maps(pred_dir, manifest, {i: rng.random((1, 1, 32, 32)) for i in range(4)})
    serial = ev.evaluate_dataset(ev.DirectoryMaps(pred_dir), manifest, threads=1)
    parallel = ev.evaluate_dataset(ev.DirectoryMaps(pred_dir), manifest, threads=3)
    assert serial.images == parallel.images
    assert serial.pr_curve == parallel.pr_curve


def test_no_overlap_is_a_usage_error(dataset_dir):
    root, path = dataset_dir
    os.makedirs(root / "empty")
    with pytest.raises(UsageError):
        ev.evaluate_dataset(ev.DirectoryMaps(str(root / "empty")), data.load_manifest(path))


def test_csv_exports(dataset_dir, tmp_path):
    root, path = dataset_dir
    manifest = data.load_manifest(path)
    pred_dir = str(root / "pred")
    _write_maps(pred_dir, manifest, {i: _ground_truth(manifest, i) for i in range(2)})
    report = ev.evaluate_dataset(ev.DirectoryMaps(pred_dir), manifest, ev.EvalConfig(pr_thresholds=11))
    report.to_csv(tmp_path / "metrics.csv")
    report.pr_to_csv(tmp_path / "pr.csv")
    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert list(metrics.columns) == ["image", "precision", "recall", "f_measure", "mae"]
    assert list(metrics["image"]) == ["img0", "img1", ev.AVERAGE_ROW]
    pr = pd.read_csv(tmp_path / "pr.csv")
    assert list(pr.columns) == ["threshold", "precision", "recall"]
    assert_allclose(pr["threshold"], np.linspace(0, 1, 11))


def test_model_maps_feed_evaluation(dataset_dir, tiny_config):
    from models import build_model

    _, path = dataset_dir
    manifest = data.load_manifest(path)
    model, params = build_model(tiny_config)
    report = ev.evaluate_dataset(ev.ModelMaps(model, params, manifest), manifest)
    assert len(report.images) == 4
    assert all(0.0 <= m.mae <= 1.0 for m in report.images)
