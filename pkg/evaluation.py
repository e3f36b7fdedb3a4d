"""Saliency evaluation: thresholding, precision/recall, F-measure, MAE,
precision-recall curves and dataset-level aggregation."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

import data
import tensor_core as tc
from errors import ConfigurationError, DimensionError, SampleError, UsageError

logger = logging.getLogger(__name__)

AVERAGE_ROW = "__average__"


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    # the F-measure weight is given as beta = 0.3, i.e. beta^2 = 0.09
    beta_squared: float = 0.09
    pr_thresholds: int = 256

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError("must lie in [0, 1]", field="threshold")
        if not self.beta_squared > 0:
            raise ConfigurationError("must be positive", field="beta_squared")
        if self.pr_thresholds < 2:
            raise ConfigurationError("must be >= 2", field="pr_thresholds")


@dataclass
class ImageMetrics:
    name: str
    precision: float
    recall: float
    f_measure: float
    mae: float


@dataclass
class MetricsReport:
    images: list = field(default_factory=list)
    pr_curve: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def averages(self):
        if not self.images:
            return ImageMetrics(AVERAGE_ROW, float("nan"), float("nan"), float("nan"), float("nan"))
        return ImageMetrics(
            AVERAGE_ROW,
            float(np.mean([m.precision for m in self.images])),
            float(np.mean([m.recall for m in self.images])),
            float(np.mean([m.f_measure for m in self.images])),
            float(np.mean([m.mae for m in self.images])),
        )

    def to_frame(self):
        rows = [(m.name, m.precision, m.recall, m.f_measure, m.mae) for m in self.images + [self.averages]]
        return pd.DataFrame(rows, columns=["image", "precision", "recall", "f_measure", "mae"])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    def pr_frame(self):
        return pd.DataFrame(self.pr_curve, columns=["threshold", "precision", "recall"])

    def pr_to_csv(self, path):
        self.pr_frame().to_csv(path, index=False)


def _plane(x):
    return np.asarray(x)


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"shapes differ: {np.shape(a)} vs {np.shape(b)}", axis="shape")


def _float_map(saliency):
    s = _plane(saliency)
    return s if np.issubdtype(s.dtype, np.floating) else s.astype(np.float64)


def _threshold_for(s, threshold):
    # thresholds are compared in the map's own dtype
    return np.asarray(threshold, dtype=s.dtype)


def binarize(saliency, threshold):
    """1 where S > threshold (strict), else 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigurationError("must lie in [0, 1]", field="threshold")
    s = _float_map(saliency)
    return (s > _threshold_for(s, threshold)).astype(np.uint8)


def precision_recall_counts(m_count, g_count, overlap):
    """Precision and recall from integer counts |M|, |G|, |M n G|.

    Empty denominators: |M| = 0 gives precision 0, or 1 when |G| is also 0.
    |G| = 0 gives recall 1.
    """
    if m_count == 0:
        precision = 1.0 if g_count == 0 else 0.0
    else:
        precision = overlap / m_count
    recall = 1.0 if g_count == 0 else overlap / g_count
    return float(precision), float(recall)


def precision_recall(mask, gt):
    _check_shapes(mask, gt)
    m = _plane(mask).astype(bool)
    g = _plane(gt).astype(bool)
    return precision_recall_counts(int(m.sum()), int(g.sum()), int(np.logical_and(m, g).sum()))


def f_measure(precision, recall, beta_squared=0.09):
    """(1 + b2) P R / (b2 P + R); 0 when the denominator is 0."""
    denominator = beta_squared * precision + recall
    if denominator == 0:
        return 0.0
    return float((1.0 + beta_squared) * precision * recall / denominator)


def mae(saliency, gt):
    """Mean absolute pixel difference between a continuous map and ground truth."""
    _check_shapes(saliency, gt)
    s = np.asarray(saliency)
    g = np.asarray(gt)
    if s.ndim < 4:
        s = s.reshape((1,) * (4 - s.ndim) + s.shape)
        g = g.reshape(s.shape)
    return tc.mean_abs_error(s, g)


def pr_thresholds(count):
    return np.linspace(0.0, 1.0, count)


def pr_curve(saliency, gt, n_thresholds=256):
    """(threshold, precision, recall) at evenly spaced thresholds over [0, 1]."""
    if n_thresholds < 2:
        raise ConfigurationError("must be >= 2", field="n_thresholds")
    _check_shapes(saliency, gt)
    s = _float_map(saliency).reshape(-1)
    g = _plane(gt).reshape(-1).astype(bool)
    g_count = int(g.sum())
    positives = np.sort(s[g])
    everything = np.sort(s)
    curve = []
    for t in pr_thresholds(n_thresholds):
        # counts of S > t via binary search on the sorted maps
        cut = _threshold_for(s, t)
        m_count = everything.size - int(np.searchsorted(everything, cut, side="right"))
        overlap = positives.size - int(np.searchsorted(positives, cut, side="right"))
        p, r = precision_recall_counts(m_count, g_count, overlap)
        curve.append((float(t), p, r))
    return curve


def image_metrics(name, saliency, gt, config):
    """Per-image metrics; ``gt`` may be soft, it is binarized at 0.5 for P/R."""
    _check_shapes(saliency, gt)
    gt_binary = _plane(gt) > 0.5
    p, r = precision_recall(binarize(saliency, config.threshold), gt_binary)
    return ImageMetrics(name, p, r, f_measure(p, r, config.beta_squared), mae(saliency, gt))


class DirectoryMaps:
    """Saliency maps stored as ``<pred_dir>/<name>.pgm``."""

    def __init__(self, pred_dir, extension=".pgm"):
        self.pred_dir = pred_dir
        self.extension = extension

    def names(self):
        return {os.path.splitext(f)[0] for f in os.listdir(self.pred_dir) if f.endswith(self.extension)}

    def __call__(self, name):
        path = os.path.join(self.pred_dir, name + self.extension)
        if not os.path.isfile(path):
            return None
        image = data.read_image(path)
        return data.mask_to_tensor(image)


class ModelMaps:
    """Saliency maps computed on the fly by a model in infer mode."""

    def __init__(self, model, params, manifest, means=data.IMAGENET_MEANS):
        self.model = model
        self.params = params
        self.manifest = manifest
        self.means = means
        self._index = {manifest.name(i): i for i in range(len(manifest))}

    def __call__(self, name):
        image_path, _ = self.manifest.paths(self._index[name])
        image = data.normalize(data.read_image(image_path), self.means)
        return self.model.forward(self.params, image, "infer")


def evaluate_dataset(map_source, manifest, config=None, threads=1, progress=False):
    """Per-image metrics at ``config.threshold``, unweighted averages, and the
    pointwise-averaged PR curve. Entries without a map are listed as skipped.

    ``map_source`` is a callable ``name -> saliency map or None`` (see
    ``DirectoryMaps`` and ``ModelMaps``).
    """
    config = config or EvalConfig()

    def one(index):
        name = manifest.name(index)
        try:
            saliency = map_source(name)
        except Exception as e:
            logger.warning("Cannot load map for %s: %s", name, e)
            return name, None
        if saliency is None:
            return name, None
        _, mask_path = manifest.paths(index)
        try:
            gt = data.mask_to_tensor(data.read_image(mask_path))
        except Exception as e:
            logger.warning("Skipping %s: %s", name, SampleError(mask_path, e))
            return name, None
        if saliency.shape != gt.shape:
            logger.warning("Skipping %s: map %s and ground truth %s differ in size", name, saliency.shape, gt.shape)
            return name, None
        metrics = image_metrics(name, saliency, gt, config)
        curve = pr_curve(saliency, gt > 0.5, config.pr_thresholds)
        return name, (metrics, curve)

    indices = range(len(manifest))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(tqdm(pool.map(one, indices), total=len(manifest), disable=not progress, desc="eval"))
    else:
        results = [one(i) for i in tqdm(indices, disable=not progress, desc="eval")]

    report = MetricsReport()
    curves = []
    for name, result in results:
        if result is None:
            report.skipped.append(name)
            continue
        metrics, curve = result
        report.images.append(metrics)
        curves.append(curve)
    if curves:
        points = np.asarray(curves, dtype=np.float64)
        averaged = points.mean(axis=0)
        report.pr_curve = [(float(t), float(p), float(r)) for t, p, r in averaged]
    if report.skipped:
        logger.warning("Skipped %d of %d images without a usable map", len(report.skipped), len(manifest))
    if not report.images:
        raise UsageError("no image in the manifest has a matching saliency map")
    return report
