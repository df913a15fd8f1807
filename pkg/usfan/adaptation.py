#!/usr/bin/env python3
"""Source training and source-free target adaptation.

The target objective is the information-maximization loss of SHOT-IM with
per-sample entropy weights:

    L = (1 - γ) * mean_i(w_i * H(p_i)) + γ * Σ_k p̂_k log p̂_k

where p_i are the MAP-head probabilities, p̂ their batch mean and w_i the
weights. Only the feature extractor is updated; the head stays frozen.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd
from rich.progress import track
from scipy import special

from .domains import LabeledSet, UnlabeledSet
from .errors import ConfigError, DataError, DimensionError
from .laplace import (
    LaplaceConfig,
    Posterior,
    augment,
    entropy_weights,
    predictive_mean,
)
from .netcore import (
    DenseNet,
    ForwardPass,
    NetPart,
    Sgd,
    SgdSchedule,
    label_smoothed_ce_grad,
    log_softmax,
    softmax,
)
from .utils import (
    STREAM_POSTERIOR,
    STREAM_SOURCE_SHUFFLE,
    STREAM_TARGET_SHUFFLE,
    console,
    make_rng,
)

__all__ = [
    "Weighting",
    "AdaptConfig",
    "LossTerms",
    "SourceReport",
    "AdaptReport",
    "RUN_LOG_COLUMNS",
    "loss_ent",
    "loss_div",
    "loss_ent_ug",
    "usfan_loss",
    "loss_ent_grad",
    "loss_div_grad",
    "loss_ent_ug_grad",
    "usfan_loss_grad",
    "iterate_minibatches",
    "compute_weights",
    "train_source",
    "adapt_target",
]

logger = logging.getLogger(__name__)

RUN_LOG_COLUMNS = [
    "epoch",
    "batch",
    "loss_total",
    "loss_ent_ug",
    "loss_div",
    "mean_weight",
    "target_acc_if_labels_available",
]


class Weighting(StrEnum):
    """Per-sample weighting of the entropy term, tagged as in the run-log header."""

    UNIFORM = "shot-im"
    MAP = "ent-weighting"
    LAPLACE = "u-sfan"


@dataclass(frozen=True)
class AdaptConfig:
    """Source training and adaptation hyperparameters.

    Attributes:
        alpha: Label smoothing of the source cross-entropy, in [0, 1)
        gamma: Mixing between the weighted entropy (1 - γ) and the diversity (γ) terms
        batch_size: Mini-batch size b
        epochs_source: Source training epochs
        epochs_target: Target adaptation epochs
        schedule: SGD hyperparameters, shared by both stages
        laplace: Laplace hyperparameters used for the weights
        baseline_mode: Use uniform weights (SHOT-IM)
        map_weighting: Weight with the tempered MAP head instead of the Laplace predictive
        seed: Run seed
    """

    alpha: float = 0.1
    gamma: float = 0.5
    batch_size: int = 64
    epochs_source: int = 50
    epochs_target: int = 30
    schedule: SgdSchedule = field(default_factory=SgdSchedule)
    laplace: LaplaceConfig = field(default_factory=LaplaceConfig)
    baseline_mode: bool = False
    map_weighting: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        _check_gamma(self.gamma)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs_source < 1 or self.epochs_target < 1:
            raise ConfigError("Epoch counts must be positive")
        if self.seed < 0:
            raise ConfigError(f"seed must be an unsigned integer, got {self.seed}")

    @property
    def weighting(self) -> Weighting:
        if self.baseline_mode:
            return Weighting.UNIFORM
        if self.map_weighting:
            return Weighting.MAP
        return Weighting.LAPLACE


@dataclass
class LossTerms:
    """Value of the adaptation objective and of its two terms."""

    total: float
    ent_ug: float
    div: float


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")


def _check_weights(probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (probs.shape[0],):
        raise DimensionError(
            f"Expected {probs.shape[0]} weights, got shape {weights.shape}"
        )
    return weights


def loss_ent(probs: np.ndarray) -> float:
    """Mean per-sample entropy of the predictions."""
    probs = np.atleast_2d(probs)
    return float(np.mean(special.entr(probs).sum(axis=1)))


def loss_div(probs: np.ndarray) -> float:
    """Negative entropy of the batch-mean prediction, in [-log K, 0]."""
    p_hat = np.atleast_2d(probs).mean(axis=0)
    return float(-special.entr(p_hat).sum())


def loss_ent_ug(probs: np.ndarray, weights: np.ndarray) -> float:
    """Uncertainty-guided entropy: mean of w_i * H(p_i).

    Args:
        probs (np.ndarray): b x K probability rows
        weights (np.ndarray): b per-sample weights

    Returns:
        float: The loss
    """
    probs = np.atleast_2d(probs)
    weights = _check_weights(probs, weights)
    return float(np.mean(weights * special.entr(probs).sum(axis=1)))


def usfan_loss(probs: np.ndarray, weights: np.ndarray, gamma: float) -> float:
    """(1 - γ) * loss_ent_ug + γ * loss_div."""
    _check_gamma(gamma)
    return (1.0 - gamma) * loss_ent_ug(probs, weights) + gamma * loss_div(probs)


def _entropy_rows_grad(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Softmax rows and dH(p_i)/dlogits_i = -p_i * (log p_i + H(p_i)), unscaled."""
    log_p = log_softmax(logits)
    probs = np.exp(log_p)
    row_entropy = special.entr(probs).sum(axis=1)
    return probs, -probs * (log_p + row_entropy[:, None])


def loss_ent_grad(logits: np.ndarray) -> Tuple[float, np.ndarray]:
    """loss_ent and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    probs, rows_grad = _entropy_rows_grad(logits)
    return loss_ent(probs), rows_grad / logits.shape[0]


def loss_ent_ug_grad(
    logits: np.ndarray, weights: np.ndarray
) -> Tuple[float, np.ndarray]:
    """loss_ent_ug and its gradient w.r.t. the logits, the weights held constant."""
    logits = np.atleast_2d(logits)
    probs, rows_grad = _entropy_rows_grad(logits)
    weights = _check_weights(probs, weights)
    grad = (weights[:, None] * rows_grad) / logits.shape[0]
    return loss_ent_ug(probs, weights), grad


def loss_div_grad(logits: np.ndarray) -> Tuple[float, np.ndarray]:
    """loss_div and its gradient w.r.t. the logits.

    Returns:
        Tuple[float, np.ndarray]: The loss and p_ik * (log p̂_k - Σ_j p_ij log p̂_j) / b
    """
    logits = np.atleast_2d(logits)
    probs = softmax(logits)
    log_p_hat = np.log(probs.mean(axis=0))
    centered = log_p_hat[None, :] - (probs * log_p_hat).sum(axis=1, keepdims=True)
    return loss_div(probs), probs * centered / logits.shape[0]


def usfan_loss_grad(
    logits: np.ndarray, weights: np.ndarray, gamma: float
) -> Tuple[LossTerms, np.ndarray]:
    """Adaptation objective and its gradient w.r.t. the logits.

    Args:
        logits (np.ndarray): b x K MAP-head logits
        weights (np.ndarray): b per-sample weights, treated as constants
        gamma (float): Mixing factor in [0, 1]

    Returns:
        Tuple[LossTerms, np.ndarray]: The loss terms and the b x K gradient
    """
    _check_gamma(gamma)
    ent, ent_grad = loss_ent_ug_grad(logits, weights)
    div, div_grad = loss_div_grad(logits)
    terms = LossTerms(total=(1.0 - gamma) * ent + gamma * div, ent_ug=ent, div=div)
    return terms, (1.0 - gamma) * ent_grad + gamma * div_grad


def iterate_minibatches(
    n: int, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """Yield shuffled row indices, batch_size at a time; the last batch may be smaller."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _clamp_batch_size(batch_size: int, n: int) -> int:
    if batch_size > n:
        logger.warning(f"Batch size {batch_size} exceeds the {n} samples, clamped to {n}")
        return n
    return batch_size


def compute_weights(
    weighting: Weighting,
    fwd: ForwardPass,
    posterior: Optional[Posterior],
    cfg: LaplaceConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-sample entropy weights of a batch.

    Args:
        weighting (Weighting): The weighting mode
        fwd (ForwardPass): Forward pass of the batch through the current network
        posterior (Optional[Posterior]): Head posterior, required for Weighting.LAPLACE
        cfg (LaplaceConfig): Provides τ and M
        rng (np.random.Generator): Random generator for the posterior draws

    Returns:
        np.ndarray: b weights in [1/K, 1]
    """
    if weighting == Weighting.UNIFORM:
        return np.ones(fwd.logits.shape[0])
    if weighting == Weighting.MAP:
        return entropy_weights(softmax(fwd.logits / cfg.temperature))
    if posterior is None:
        raise ConfigError("Laplace weighting needs a posterior")
    probs = predictive_mean(posterior, augment(fwd.latents), cfg, rng)
    return entropy_weights(probs)


def _accuracy(logits: np.ndarray, indices: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == indices))


@dataclass
class SourceReport:
    """Outcome of source training.

    Attributes:
        net: The trained network (θ_MAP, β_MAP)
        accuracy: Final source training accuracy
        history: Per-epoch mean loss and accuracy
    """

    net: DenseNet
    accuracy: float
    history: pd.DataFrame


def train_source(
    net: DenseNet, source: LabeledSet, cfg: AdaptConfig, progress: bool = False
) -> SourceReport:
    """Train both parts on labelled source data with label-smoothed cross-entropy.

    The input network is left untouched.

    Args:
        net (DenseNet): Initialized network
        source (LabeledSet): Source data
        cfg (AdaptConfig): Hyperparameters; weight decay acts as the Gaussian prior
        progress (bool): Show a progress bar. Defaults to False.

    Returns:
        SourceReport: The trained network and its source accuracy
    """
    if source.n_classes != net.n_classes or source.inputs.shape[1] != net.input_dim:
        raise DimensionError(
            f"Source data ({source.inputs.shape[1]} features, {source.n_classes} classes) "
            f"does not fit a {net.input_dim} -> {net.n_classes} network"
        )

    net = net.copy()
    for part in NetPart:
        net.unfreeze(part)

    batch_size = _clamp_batch_size(cfg.batch_size, source.n)
    total_steps = cfg.epochs_source * math.ceil(source.n / batch_size)
    sgd = Sgd(net, cfg.schedule)

    history: List[dict] = []
    step = 0
    for epoch in track(
        range(cfg.epochs_source),
        description="Source training...",
        console=console,
        disable=not progress,
    ):
        rng = make_rng(cfg.seed, STREAM_SOURCE_SHUFFLE, epoch)
        losses = []
        for rows in iterate_minibatches(source.n, batch_size, rng):
            labels = source.labels[rows]
            loss, grads = net.gradients(
                source.inputs[rows],
                lambda logits: label_smoothed_ce_grad(logits, labels, cfg.alpha),
                (NetPart.FEATURES, NetPart.HEAD),
            )
            sgd.step(grads, step / total_steps)
            losses.append(loss)
            step += 1

        accuracy = _accuracy(net.forward(source.inputs).logits, source.indices)
        history.append({"epoch": epoch, "loss": np.mean(losses), "accuracy": accuracy})

    accuracy = _accuracy(net.forward(source.inputs).logits, source.indices)
    logger.info(f"Source accuracy = {accuracy:0.4f}")
    return SourceReport(net=net, accuracy=accuracy, history=pd.DataFrame(history))


@dataclass
class AdaptReport:
    """Outcome of target adaptation.

    Attributes:
        net: Adapted network; the head is the source head, frozen
        weighting: Weighting mode used
        log: Per-batch run log with RUN_LOG_COLUMNS
    """

    net: DenseNet
    weighting: Weighting
    log: pd.DataFrame


def adapt_target(
    net: DenseNet,
    posterior: Optional[Posterior],
    target: UnlabeledSet,
    cfg: AdaptConfig,
    labels: Optional[np.ndarray] = None,
    progress: bool = False,
) -> AdaptReport:
    """Adapt the feature extractor to unlabelled target data.

    Each mini-batch draws fresh head samples from the posterior to weight the
    entropy term. The loss itself is computed on the MAP head, and gradients
    only reach the feature extractor. The input network is left untouched.

    Args:
        net (DenseNet): Source network
        posterior (Optional[Posterior]): Head posterior; unused with uniform or MAP weighting
        target (UnlabeledSet): Target inputs
        cfg (AdaptConfig): Hyperparameters
        labels (Optional[np.ndarray]): Target class indices, only used for the run log
        progress (bool): Show a progress bar. Defaults to False.

    Returns:
        AdaptReport: The adapted network and the run log
    """
    weighting = cfg.weighting
    if target.inputs.shape[1] != net.input_dim:
        raise DimensionError(
            f"Target data has {target.inputs.shape[1]} features, "
            f"the network expects {net.input_dim}"
        )
    if weighting == Weighting.LAPLACE:
        if posterior is None:
            raise ConfigError(
                "No posterior available: run fit-laplace first or enable baseline mode"
            )
        if not np.array_equal(posterior.map_matrix, net.head_matrix()):
            raise DataError("The posterior was not fitted on this network's head")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (target.n,):
            raise DimensionError(f"Expected {target.n} target labels, got {labels.shape}")

    net = net.copy()
    net.unfreeze(NetPart.FEATURES)
    net.freeze(NetPart.HEAD)
    head_digest = net.digest(NetPart.HEAD)

    batch_size = _clamp_batch_size(cfg.batch_size, target.n)
    total_steps = cfg.epochs_target * math.ceil(target.n / batch_size)
    sgd = Sgd(net, cfg.schedule)

    logger.debug(f"Adapting with mode={weighting} on {target.n} target samples")

    records: List[dict] = []
    step = 0
    for epoch in track(
        range(cfg.epochs_target),
        description="Target adaptation...",
        console=console,
        disable=not progress,
    ):
        shuffle_rng = make_rng(cfg.seed, STREAM_TARGET_SHUFFLE, epoch)
        posterior_rng = make_rng(cfg.seed, STREAM_POSTERIOR, epoch)
        for batch, rows in enumerate(
            iterate_minibatches(target.n, batch_size, shuffle_rng)
        ):
            fwd = net.forward(target.inputs[rows])
            weights = compute_weights(
                weighting, fwd, posterior, cfg.laplace, posterior_rng
            )
            terms, grad_logits = usfan_loss_grad(fwd.logits, weights, cfg.gamma)
            grads = net.backward(fwd, grad_logits, (NetPart.FEATURES,))

            accuracy = math.nan
            if labels is not None:
                accuracy = _accuracy(fwd.logits, labels[rows])

            sgd.step(grads, step / total_steps)
            step += 1

            records.append(
                {
                    "epoch": epoch,
                    "batch": batch,
                    "loss_total": terms.total,
                    "loss_ent_ug": terms.ent_ug,
                    "loss_div": terms.div,
                    "mean_weight": float(np.mean(weights)),
                    "target_acc_if_labels_available": accuracy,
                }
            )

        assert net.digest(NetPart.HEAD) == head_digest, "Head changed during adaptation"

    return AdaptReport(
        net=net, weighting=weighting, log=pd.DataFrame(records, columns=RUN_LOG_COLUMNS)
    )
