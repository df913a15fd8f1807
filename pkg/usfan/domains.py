#!/usr/bin/env python3
"""Source/target datasets: seeded toy domains and CSV ingestion."""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg

from .errors import ConfigError, DataError
from .utils import STREAM_DATA, make_rng

__all__ = [
    "LabeledSet",
    "UnlabeledSet",
    "BlobSpec",
    "OpenSetSpec",
    "mild_preset",
    "strong_preset",
    "interpolated_preset",
    "open_set_preset",
    "crossing_classes",
    "crossing_distances",
    "gen_toy",
    "gen_open_set",
    "load_csv",
    "save_csv",
    "PRESETS_VERSION",
]

# Toy presets: three classes in the plane (0: red, 1: blue, 2: green)
CLASS_MEANS = ((-2.5, 0.0), (2.5, 0.0), (0.0, 3.5))
CLASS_VARIANCE = 0.3
MILD_SHIFTS = ((0.3, 0.2), (-0.3, 0.3), (0.2, -0.3))
# The blue target cluster drops below the red class, where the head saw no data;
# the red target cluster leans toward the blue region
STRONG_SHIFTS = ((1.5, 0.0), (-3.5, -3.0), (0.2, -0.3))
PRIVATE_MEAN = (0.0, -6.0)
PRESETS_VERSION = 2


@dataclass
class LabeledSet:
    """Inputs with one-hot labels.

    Attributes:
        inputs: n x D matrix
        labels: n x K one-hot matrix
    """

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise DataError(f"Expected a non-empty n x D input matrix, got {self.inputs.shape}")
        if self.labels.shape[0] != self.inputs.shape[0] or self.labels.ndim != 2:
            raise DataError(
                f"Labels {self.labels.shape} do not match inputs {self.inputs.shape}"
            )
        is_binary = np.all((self.labels == 0.0) | (self.labels == 1.0))
        if not is_binary or not np.all(self.labels.sum(axis=1) == 1.0):
            raise DataError("Label rows must be one-hot")

    @classmethod
    def from_indices(
        cls, inputs: np.ndarray, indices: Sequence[int], n_classes: int
    ) -> "LabeledSet":
        """Build a set from integer class indices."""
        indices = np.asarray(indices, dtype=np.int64)
        if np.any(indices < 0) or np.any(indices >= n_classes):
            raise DataError(f"Labels must lie in [0, {n_classes})")
        return cls(inputs=inputs, labels=np.eye(n_classes)[indices])

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def indices(self) -> np.ndarray:
        """Integer class labels."""
        return np.argmax(self.labels, axis=1)

    def unlabeled(self) -> "UnlabeledSet":
        """Drop the labels."""
        return UnlabeledSet(inputs=self.inputs)

    def subset(self, rows: np.ndarray) -> "LabeledSet":
        return LabeledSet(inputs=self.inputs[rows], labels=self.labels[rows])


@dataclass
class UnlabeledSet:
    """Inputs only.

    Attributes:
        inputs: n x D matrix
    """

    inputs: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise DataError(f"Expected a non-empty n x D input matrix, got {self.inputs.shape}")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class BlobSpec:
    """Gaussian blobs, one per class, with a per-class translation for the target.

    Attributes:
        class_means: K points in R²
        class_covs: One 2 x 2 SPD covariance per class
        n_per_class: Number of samples per class and domain
        shifts: Per-class translations producing the target domain
        seed: Run seed
    """

    class_means: Tuple[Tuple[float, float], ...]
    class_covs: Tuple[Tuple[Tuple[float, float], Tuple[float, float]], ...]
    n_per_class: int
    shifts: Tuple[Tuple[float, float], ...]
    seed: int = 0

    def __post_init__(self) -> None:
        k = len(self.class_means)
        if len(self.class_covs) != k or len(self.shifts) != k:
            raise ConfigError("Means, covariances and shifts must have one entry per class")
        if self.n_per_class < 1:
            raise ConfigError(f"n_per_class must be positive, got {self.n_per_class}")

    @property
    def n_classes(self) -> int:
        return len(self.class_means)


@dataclass(frozen=True)
class OpenSetSpec:
    """A BlobSpec plus a target-only private class.

    Attributes:
        base: The shared-class specification
        n_private: Number of private samples
        private_mean: Mean of the private class
        private_cov: Covariance of the private class
    """

    base: BlobSpec
    n_private: int
    private_mean: Tuple[float, float] = PRIVATE_MEAN
    private_cov: Tuple[Tuple[float, float], Tuple[float, float]] = (
        (CLASS_VARIANCE, 0.0),
        (0.0, CLASS_VARIANCE),
    )

    def __post_init__(self) -> None:
        if self.n_private < 0:
            raise ConfigError(f"n_private must be >= 0, got {self.n_private}")


def _isotropic(variance: float) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    return ((variance, 0.0), (0.0, variance))


def interpolated_preset(
    shift_scale: float, seed: int = 0, n_per_class: int = 150
) -> BlobSpec:
    """Toy preset with shifts interpolated between the mild (0) and strong (1) presets.

    Args:
        shift_scale (float): Interpolation factor; values outside [0, 1] extrapolate
        seed (int): Run seed. Defaults to 0.
        n_per_class (int): Samples per class. Defaults to 150.

    Returns:
        BlobSpec: The specification
    """
    mild = np.array(MILD_SHIFTS)
    strong = np.array(STRONG_SHIFTS)
    shifts = mild + shift_scale * (strong - mild)
    return BlobSpec(
        class_means=CLASS_MEANS,
        class_covs=tuple(_isotropic(CLASS_VARIANCE) for _ in CLASS_MEANS),
        n_per_class=n_per_class,
        shifts=tuple((float(x), float(y)) for x, y in shifts),
        seed=seed,
    )


def mild_preset(seed: int = 0, n_per_class: int = 150) -> BlobSpec:
    """Target clusters stay close to their source clusters."""
    return interpolated_preset(0.0, seed, n_per_class)


def strong_preset(seed: int = 0, n_per_class: int = 150) -> BlobSpec:
    """The blue target cluster crosses into the red decision region."""
    return interpolated_preset(1.0, seed, n_per_class)


def open_set_preset(
    shift_scale: float = 0.0, seed: int = 0, n_per_class: int = 150, n_private: int = 150
) -> OpenSetSpec:
    """Toy preset with a private class far from every shared class."""
    return OpenSetSpec(
        base=interpolated_preset(shift_scale, seed, n_per_class), n_private=n_private
    )


def crossing_classes(spec: BlobSpec) -> List[int]:
    """Classes whose target centroid is closer to another source centroid than to its own.

    Args:
        spec (BlobSpec): The specification

    Returns:
        List[int]: The crossing class indices
    """
    means = np.array(spec.class_means)
    targets = means + np.array(spec.shifts)
    distances = np.linalg.norm(targets[:, None, :] - means[None, :, :], axis=2)
    return [k for k in range(spec.n_classes) if np.argmin(distances[k]) != k]


def crossing_distances(spec: BlobSpec) -> Dict[int, float]:
    """Distance of every crossing target centroid to its nearest other source centroid.

    Distances are Mahalanobis distances under that source class's covariance, so
    1.0 means the target centroid lies on the 1σ contour of the other class.

    Args:
        spec (BlobSpec): The specification

    Returns:
        Dict[int, float]: Crossing class index to distance
    """
    means = np.array(spec.class_means)
    targets = means + np.array(spec.shifts)
    out: Dict[int, float] = {}
    for k in crossing_classes(spec):
        gaps = []
        for j in range(spec.n_classes):
            if j == k:
                continue
            diff = targets[k] - means[j]
            gaps.append(float(np.sqrt(diff @ linalg.solve(np.array(spec.class_covs[j]), diff))))
        out[k] = min(gaps)
    return out


def _draw(
    rng: np.random.Generator, mean: Sequence[float], cov: np.ndarray, n: int
) -> np.ndarray:
    try:
        chol = linalg.cholesky(np.asarray(cov, dtype=np.float64), lower=True)
    except linalg.LinAlgError as e:
        raise DataError(f"Class covariance is not SPD: {cov}") from e
    return np.asarray(mean, dtype=np.float64) + rng.standard_normal((n, 2)) @ chol.T


def _draw_domain(spec: BlobSpec, domain: int, apply_shift: bool) -> LabeledSet:
    rng = make_rng(spec.seed, STREAM_DATA, domain)
    inputs = []
    for k in range(spec.n_classes):
        mean = np.array(spec.class_means[k])
        if apply_shift:
            mean = mean + np.array(spec.shifts[k])
        inputs.append(_draw(rng, mean, np.array(spec.class_covs[k]), spec.n_per_class))
    indices = np.repeat(np.arange(spec.n_classes), spec.n_per_class)
    return LabeledSet.from_indices(np.vstack(inputs), indices, spec.n_classes)


def gen_toy(spec: BlobSpec) -> Tuple[LabeledSet, LabeledSet]:
    """Draw the source and target domains of a toy specification.

    Target labels are kept for evaluation only.

    Args:
        spec (BlobSpec): The specification

    Returns:
        Tuple[LabeledSet, LabeledSet]: Source and target datasets
    """
    source = _draw_domain(spec, domain=0, apply_shift=False)
    target = _draw_domain(spec, domain=1, apply_shift=True)
    return source, target


def gen_open_set(spec: OpenSetSpec) -> Tuple[LabeledSet, LabeledSet]:
    """Draw an open-set problem; private target samples carry label index K.

    Args:
        spec (OpenSetSpec): The specification

    Returns:
        Tuple[LabeledSet, LabeledSet]: Source (K classes) and target (K + 1 classes)
    """
    source, target = gen_toy(spec.base)
    if spec.n_private == 0:
        return source, target

    k = spec.base.n_classes
    rng = make_rng(spec.base.seed, STREAM_DATA, 2)
    private = _draw(rng, spec.private_mean, np.array(spec.private_cov), spec.n_private)

    inputs = np.vstack([target.inputs, private])
    indices = np.concatenate([target.indices, np.full(spec.n_private, k)])
    return source, LabeledSet.from_indices(inputs, indices, k + 1)


def load_csv(
    path: Path, n_classes: Optional[int] = None
) -> Union[LabeledSet, UnlabeledSet]:
    """Load a dataset from a `f0,...,f{D-1}[,label]` CSV file.

    Args:
        path (Path): The CSV file
        n_classes (Optional[int]): Number of classes K. Defaults to max(label) + 1.

    Returns:
        Union[LabeledSet, UnlabeledSet]: LabeledSet when a label column is present
    """
    if not path.is_file():
        raise DataError(f"Data file not found: {path}")

    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"Malformed CSV file {path}: {e}") from e

    columns = list(df.columns)
    has_label = len(columns) > 0 and columns[-1] == "label"
    features = columns[:-1] if has_label else columns
    if not features or features != [f"f{i}" for i in range(len(features))]:
        raise DataError(f"Unexpected header in {path}: {','.join(columns)}")
    if len(df) == 0:
        raise DataError(f"No rows in {path}")
    if df.isna().to_numpy().any() or (df == "").to_numpy().any():
        raise DataError(f"Ragged or empty cells in {path}")

    try:
        inputs = (
            df[features]
            .apply(lambda col: col.map(lambda v: float(v)))
            .to_numpy(dtype=np.float64)
        )
    except ValueError as e:
        raise DataError(f"Non-numeric feature cell in {path}: {e}") from e

    if not has_label:
        return UnlabeledSet(inputs=inputs)

    try:
        labels = df["label"].map(int).to_numpy()
    except ValueError as e:
        raise DataError(f"Non-integer label in {path}: {e}") from e

    k = n_classes if n_classes is not None else int(labels.max()) + 1
    if np.any(labels < 0) or np.any(labels >= k):
        raise DataError(f"Labels of {path} must lie in [0, {k})")
    return LabeledSet.from_indices(inputs, labels, k)


def save_csv(path: Path, data: Union[LabeledSet, UnlabeledSet]) -> None:
    """Save a dataset with the `f0,...,f{D-1}[,label]` schema.

    Args:
        path (Path): The output file
        data (Union[LabeledSet, UnlabeledSet]): The dataset
    """
    columns = {f"f{i}": data.inputs[:, i] for i in range(data.inputs.shape[1])}
    df = pd.DataFrame(columns)
    if isinstance(data, LabeledSet):
        df["label"] = data.indices
    df.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
