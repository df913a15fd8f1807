#!/usr/bin/env python3
"""Metrics, entropy densities and decision-surface grids of frozen models."""

import math
from dataclasses import dataclass
from enum import StrEnum
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .domains import LabeledSet, UnlabeledSet
from .errors import ConfigError, DimensionError
from .laplace import (
    LaplaceConfig,
    Posterior,
    augment,
    entropy_weights,
    predictive_entropy,
    predictive_mean,
)
from .netcore import DenseNet, softmax
from .utils import STREAM_EVAL, STREAM_SPLIT, make_rng

__all__ = [
    "PredictionMode",
    "MetricsReport",
    "predict_proba",
    "evaluate",
    "split_holdout",
    "entropy_threshold",
    "entropy_histogram",
    "decision_grid",
]

Bounds = Tuple[float, float, float, float]


class PredictionMode(StrEnum):
    """How class probabilities are obtained from a model."""

    MAP = "map"
    PREDICTIVE = "predictive"


@dataclass
class MetricsReport:
    """Classification metrics.

    Attributes:
        accuracy: trace(confusion) / n
        per_class_acc: Recall of each label; NaN for labels absent from the data
        os: Mean per-class accuracy over every label, unknown included
        os_star: Mean per-class accuracy over the known classes
        confusion: Counts, true labels along rows, predictions along columns
    """

    accuracy: float
    per_class_acc: np.ndarray
    os: float
    os_star: float
    confusion: np.ndarray

    @classmethod
    def from_confusion(cls, confusion: np.ndarray, n_known: int) -> "MetricsReport":
        """Derive every metric from a confusion matrix.

        Args:
            confusion (np.ndarray): Square count matrix
            n_known (int): Number K of classes known to the model

        Returns:
            MetricsReport: The metrics
        """
        confusion = np.asarray(confusion)
        support = confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_class = np.diag(confusion) / support
        return cls.from_per_class(
            per_class,
            n_known,
            accuracy=float(np.trace(confusion) / confusion.sum()),
            confusion=confusion,
        )

    @classmethod
    def from_per_class(
        cls,
        per_class_acc: Sequence[float],
        n_known: int,
        accuracy: float = math.nan,
        confusion: Optional[np.ndarray] = None,
    ) -> "MetricsReport":
        """Build a report from per-class accuracies; OS over all, OS* over the first n_known."""
        per_class = np.asarray(per_class_acc, dtype=np.float64)
        if confusion is None:
            confusion = np.zeros((per_class.size, per_class.size), dtype=np.int64)
        return cls(
            accuracy=accuracy,
            per_class_acc=per_class,
            os=float(np.nanmean(per_class)),
            os_star=float(np.nanmean(per_class[:n_known])),
            confusion=confusion,
        )

    def to_frame(self) -> pd.DataFrame:
        """Per-label rows: accuracy, support and the confusion counts."""
        n = self.confusion.shape[0]
        df = pd.DataFrame(self.confusion, columns=[f"pred_{k}" for k in range(n)])
        df.insert(0, "support", self.confusion.sum(axis=1))
        df.insert(0, "accuracy", self.per_class_acc)
        df.insert(0, "label", np.arange(n))
        return df


def _default_rng(rng: Optional[np.random.Generator]) -> np.random.Generator:
    return rng if rng is not None else make_rng(0, STREAM_EVAL)


def predict_proba(
    net: DenseNet,
    inputs: np.ndarray,
    mode: PredictionMode = PredictionMode.MAP,
    posterior: Optional[Posterior] = None,
    cfg: Optional[LaplaceConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Class probabilities of the MAP head or of the Laplace predictive.

    Args:
        net (DenseNet): The model
        inputs (np.ndarray): n x D inputs
        mode (PredictionMode): MAP or predictive. Defaults to MAP.
        posterior (Optional[Posterior]): Head posterior, required in predictive mode
        cfg (Optional[LaplaceConfig]): Provides M and τ. Defaults to LaplaceConfig().
        rng (Optional[np.random.Generator]): Random generator for the posterior draws

    Returns:
        np.ndarray: n x K probabilities
    """
    fwd = net.forward(inputs)
    if mode == PredictionMode.MAP:
        return softmax(fwd.logits)
    if posterior is None:
        raise ConfigError("Predictive mode needs a posterior")
    cfg = cfg if cfg is not None else LaplaceConfig()
    return predictive_mean(posterior, augment(fwd.latents), cfg, _default_rng(rng))


def evaluate(
    net: DenseNet,
    data: LabeledSet,
    mode: PredictionMode = PredictionMode.MAP,
    posterior: Optional[Posterior] = None,
    cfg: Optional[LaplaceConfig] = None,
    rng: Optional[np.random.Generator] = None,
    unknown_threshold: Optional[float] = None,
) -> MetricsReport:
    """Evaluate a model on labelled data.

    With an unknown_threshold, samples whose predictive entropy exceeds it are
    assigned the unknown class index K. Argmax ties go to the lowest index.

    Args:
        net (DenseNet): The model, with K classes
        data (LabeledSet): Data labelled over K classes, or K + 1 in open-set mode
        mode (PredictionMode): MAP or predictive. Defaults to MAP.
        posterior (Optional[Posterior]): Head posterior, required in predictive mode
        cfg (Optional[LaplaceConfig]): Laplace hyperparameters
        rng (Optional[np.random.Generator]): Random generator for the posterior draws
        unknown_threshold (Optional[float]): Entropy rejection threshold

    Returns:
        MetricsReport: The metrics
    """
    k = net.n_classes
    n_labels = data.n_classes
    if n_labels not in (k, k + 1):
        raise DimensionError(f"Data has {n_labels} labels, the model {k} classes")
    if unknown_threshold is not None and n_labels != k + 1:
        raise DimensionError("Open-set evaluation needs data labelled over K + 1 classes")

    probs = predict_proba(net, data.inputs, mode, posterior, cfg, rng)
    predictions = np.argmax(probs, axis=1)
    if unknown_threshold is not None:
        predictions[predictive_entropy(probs) > unknown_threshold] = k

    flat = data.indices * n_labels + predictions
    confusion = np.bincount(flat, minlength=n_labels * n_labels).reshape(
        n_labels, n_labels
    )
    return MetricsReport.from_confusion(confusion, n_known=k)


def split_holdout(
    data: LabeledSet, fraction: float = 0.2, seed: int = 0
) -> Tuple[LabeledSet, LabeledSet]:
    """Seeded split into (kept, held-out) parts."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"Hold-out fraction must lie in (0, 1), got {fraction}")
    n_holdout = math.ceil(fraction * data.n)
    if n_holdout >= data.n:
        raise ConfigError(f"Cannot hold out {n_holdout} of {data.n} samples")
    order = make_rng(seed, STREAM_SPLIT).permutation(data.n)
    return data.subset(np.sort(order[n_holdout:])), data.subset(np.sort(order[:n_holdout]))


def entropy_threshold(
    net: DenseNet,
    holdout: Union[LabeledSet, UnlabeledSet],
    mode: PredictionMode = PredictionMode.PREDICTIVE,
    posterior: Optional[Posterior] = None,
    cfg: Optional[LaplaceConfig] = None,
    rng: Optional[np.random.Generator] = None,
    percentile: float = 99.0,
) -> float:
    """Unknown-class rejection threshold: a percentile of held-out source entropies.

    Args:
        net (DenseNet): The source model
        holdout (Union[LabeledSet, UnlabeledSet]): Source samples unseen during training
        mode (PredictionMode): MAP or predictive. Defaults to predictive.
        posterior (Optional[Posterior]): Head posterior, required in predictive mode
        cfg (Optional[LaplaceConfig]): Laplace hyperparameters
        rng (Optional[np.random.Generator]): Random generator for the posterior draws
        percentile (float): Percentile in [0, 100]. Defaults to 99.

    Returns:
        float: The entropy threshold in nats
    """
    if not 0.0 <= percentile <= 100.0:
        raise ConfigError(f"percentile must lie in [0, 100], got {percentile}")
    probs = predict_proba(net, holdout.inputs, mode, posterior, cfg, rng)
    return float(np.percentile(predictive_entropy(probs), percentile))


def entropy_histogram(
    net: DenseNet,
    data: LabeledSet,
    bins: int = 20,
    mode: PredictionMode = PredictionMode.MAP,
    posterior: Optional[Posterior] = None,
    cfg: Optional[LaplaceConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> pd.DataFrame:
    """Predictive entropy histograms of correct and incorrect predictions.

    Bin edges split [0, log K] uniformly; the last bin is closed.

    Returns:
        pd.DataFrame: Columns bin_lo, bin_hi, count_correct, count_incorrect
    """
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")

    probs = predict_proba(net, data.inputs, mode, posterior, cfg, rng)
    max_entropy = math.log(net.n_classes)
    entropies = np.clip(predictive_entropy(probs), 0.0, max_entropy)
    correct = np.argmax(probs, axis=1) == data.indices

    edges = np.linspace(0.0, max_entropy, bins + 1)
    count_correct, _ = np.histogram(entropies[correct], bins=edges)
    count_incorrect, _ = np.histogram(entropies[~correct], bins=edges)
    return pd.DataFrame(
        {
            "bin_lo": edges[:-1],
            "bin_hi": edges[1:],
            "count_correct": count_correct,
            "count_incorrect": count_incorrect,
        }
    )


def decision_grid(
    net: DenseNet,
    bounds: Bounds,
    resolution: Union[int, Tuple[int, int]],
    mode: PredictionMode = PredictionMode.MAP,
    posterior: Optional[Posterior] = None,
    cfg: Optional[LaplaceConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> pd.DataFrame:
    """Evaluate a 2-D model at the cell centers of a regular grid.

    Args:
        net (DenseNet): Model with 2 inputs
        bounds (Bounds): (x_min, x_max, y_min, y_max)
        resolution (Union[int, Tuple[int, int]]): Cells along x and y
        mode (PredictionMode): MAP or predictive. Defaults to MAP.
        posterior (Optional[Posterior]): Head posterior, required in predictive mode
        cfg (Optional[LaplaceConfig]): Laplace hyperparameters
        rng (Optional[np.random.Generator]): Random generator for the posterior draws

    Returns:
        pd.DataFrame: Row-major cells (y outer, x inner) with columns x, y, class, confidence, weight
    """
    if net.input_dim != 2:
        raise DimensionError(f"Decision grids need a 2-D model, got {net.input_dim} inputs")
    nx, ny = (resolution, resolution) if isinstance(resolution, int) else resolution
    if nx < 1 or ny < 1:
        raise ConfigError(f"Grid resolution must be positive, got {resolution}")
    x_min, x_max, y_min, y_max = bounds
    if not (x_max > x_min and y_max > y_min):
        raise ConfigError(f"Empty grid bounds: {bounds}")

    xs = x_min + (np.arange(nx) + 0.5) * (x_max - x_min) / nx
    ys = y_min + (np.arange(ny) + 0.5) * (y_max - y_min) / ny
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    points = np.column_stack([grid_x.ravel(), grid_y.ravel()])

    probs = predict_proba(net, points, mode, posterior, cfg, rng)
    return pd.DataFrame(
        {
            "x": points[:, 0],
            "y": points[:, 1],
            "class": np.argmax(probs, axis=1),
            "confidence": probs.max(axis=1),
            "weight": entropy_weights(probs),
        }
    )
