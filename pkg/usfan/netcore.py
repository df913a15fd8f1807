#!/usr/bin/env python3
"""Dense feed-forward network with exact reverse-mode gradients.

The network is split as f = h∘g: every layer but the last forms the feature
extractor g (parameters β), the last affine layer is the hypothesis head h
(parameters θ). Each part can be frozen independently.
"""

import hashlib
from dataclasses import dataclass
from enum import StrEnum
from typing import Callable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import special

from .errors import ConfigError, DimensionError, FrozenPartError, NumericalError

__all__ = [
    "Activation",
    "NetPart",
    "DenseLayer",
    "DenseNet",
    "ForwardPass",
    "Gradients",
    "SgdSchedule",
    "Sgd",
    "softmax",
    "log_softmax",
    "label_smoothed_ce",
    "label_smoothed_ce_grad",
]

LayerGrad = Tuple[np.ndarray, np.ndarray]
LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class Activation(StrEnum):
    """Activation tags."""

    RELU = "relu"
    IDENTITY = "identity"


class NetPart(StrEnum):
    """The two independently freezable parts of a DenseNet."""

    FEATURES = "features"
    HEAD = "head"


@dataclass
class DenseLayer:
    """Affine layer followed by an activation.

    Attributes:
        weight: (in_dim, out_dim) weight matrix
        bias: (out_dim,) bias vector
        activation: The activation applied to the affine output
    """

    weight: np.ndarray
    bias: np.ndarray
    activation: Activation

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ForwardPass:
    """Cached forward pass, consumed by DenseNet.backward.

    Attributes:
        activations: activations[0] is the input batch, activations[i + 1] the output of layer i
        pre_activations: Affine outputs of each layer, before the activation
    """

    activations: List[np.ndarray]
    pre_activations: List[np.ndarray]

    @property
    def latents(self) -> np.ndarray:
        """Activations entering the head."""
        return self.activations[-2]

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]


@dataclass
class Gradients:
    """Per-part parameter gradients; None for a part that was not requested."""

    features: Optional[List[LayerGrad]] = None
    head: Optional[LayerGrad] = None

    def parts(self) -> Set[NetPart]:
        """Return the parts carrying gradients."""
        result = set()
        if self.features is not None:
            result.add(NetPart.FEATURES)
        if self.head is not None:
            result.add(NetPart.HEAD)
        return result


class DenseNet:
    """Dense network f = h∘g."""

    def __init__(
        self, layers: Sequence[DenseLayer], frozen: Sequence[NetPart] = ()
    ) -> None:
        """Instantiate a network from its layers.

        Args:
            layers (Sequence[DenseLayer]): The layers, input first. The last one is the head.
            frozen (Sequence[NetPart]): Parts frozen from the start. Defaults to none.
        """
        if len(layers) < 1:
            raise DimensionError("A network needs at least a head layer")

        for i, layer in enumerate(layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise DimensionError(f"Layer {i} has inconsistent weight/bias shapes")
            if i > 0 and layers[i - 1].out_dim != layer.in_dim:
                raise DimensionError(
                    f"Layer {i} expects {layer.in_dim} inputs, "
                    f"previous layer outputs {layers[i - 1].out_dim}"
                )

        if layers[-1].activation != Activation.IDENTITY:
            raise DimensionError("The head must be a plain affine map")

        self.layers = list(layers)
        self._frozen: Set[NetPart] = set(frozen)

    @classmethod
    def initialize(cls, dims: Sequence[int], rng: np.random.Generator) -> "DenseNet":
        """Build a seeded ReLU network.

        Args:
            dims (Sequence[int]): Layer widths, e.g. (2, 32, 16, 3)
            rng (np.random.Generator): Random generator used for the weights

        Returns:
            DenseNet: The network, with He-initialized hidden layers and a Glorot head
        """
        if len(dims) < 2:
            raise DimensionError("At least an input and an output width are needed")

        layers = []
        n_layers = len(dims) - 1
        for i in range(n_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            is_head = i == n_layers - 1
            if is_head:
                scale = np.sqrt(2.0 / (fan_in + fan_out))
                activation = Activation.IDENTITY
            else:
                scale = np.sqrt(2.0 / fan_in)
                activation = Activation.RELU
            layers.append(
                DenseLayer(
                    weight=rng.standard_normal((fan_in, fan_out)) * scale,
                    bias=np.zeros(fan_out),
                    activation=activation,
                )
            )
        return cls(layers)

    @property
    def split_index(self) -> int:
        """Index of the first head layer."""
        return len(self.layers) - 1

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def latent_dim(self) -> int:
        return self.layers[-1].in_dim

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> List[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    @property
    def head(self) -> DenseLayer:
        return self.layers[-1]

    def freeze(self, part: NetPart) -> None:
        self._frozen.add(part)

    def unfreeze(self, part: NetPart) -> None:
        self._frozen.discard(part)

    def is_frozen(self, part: NetPart) -> bool:
        return part in self._frozen

    @property
    def frozen(self) -> Set[NetPart]:
        return set(self._frozen)

    def copy(self) -> "DenseNet":
        """Deep copy, frozen flags included."""
        layers = [
            DenseLayer(layer.weight.copy(), layer.bias.copy(), layer.activation)
            for layer in self.layers
        ]
        return DenseNet(layers, frozen=tuple(self._frozen))

    def head_matrix(self) -> np.ndarray:
        """Head parameters with the bias folded in as a last row.

        Returns:
            np.ndarray: The (d_z + 1) x K matrix [W_head; b_head]
        """
        return np.vstack([self.head.weight, self.head.bias[None, :]])

    def digest(self, part: Optional[NetPart] = None) -> str:
        """Hash of the parameters, optionally restricted to one part."""
        if part is None:
            layers = self.layers
        elif part == NetPart.HEAD:
            layers = self.layers[self.split_index :]
        else:
            layers = self.layers[: self.split_index]

        h = hashlib.sha256()
        for layer in layers:
            h.update(np.ascontiguousarray(layer.weight, dtype=np.float64).tobytes())
            h.update(np.ascontiguousarray(layer.bias, dtype=np.float64).tobytes())
        return h.hexdigest()

    def forward(self, batch: np.ndarray) -> ForwardPass:
        """Run a forward pass.

        Args:
            batch (np.ndarray): b x D input batch

        Returns:
            ForwardPass: The cached activations; latents and logits included
        """
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise DimensionError(
                f"Expected a batch with {self.input_dim} columns, got shape {batch.shape}"
            )

        activations = [batch]
        pre_activations = []
        h = batch
        for layer in self.layers:
            a = h @ layer.weight + layer.bias
            pre_activations.append(a)
            if layer.activation == Activation.RELU:
                h = np.maximum(a, 0.0)
            else:
                h = a
            activations.append(h)

        return ForwardPass(activations=activations, pre_activations=pre_activations)

    def backward(
        self,
        fwd: ForwardPass,
        grad_logits: np.ndarray,
        parts: Optional[Sequence[NetPart]] = None,
    ) -> Gradients:
        """Back-propagate a logits gradient.

        Args:
            fwd (ForwardPass): The forward pass of the batch
            grad_logits (np.ndarray): dLoss/dlogits, b x K
            parts (Optional[Sequence[NetPart]]): Parts to differentiate. Defaults to every unfrozen part.

        Returns:
            Gradients: The requested gradients
        """
        if parts is None:
            requested = {p for p in NetPart if p not in self._frozen}
        else:
            requested = set(parts)
            frozen = requested & self._frozen
            if frozen:
                names = ", ".join(sorted(frozen))
                raise FrozenPartError(f"Gradient requested for frozen part(s): {names}")

        if grad_logits.shape != fwd.logits.shape:
            raise DimensionError(
                f"Logits gradient shape {grad_logits.shape} != logits shape {fwd.logits.shape}"
            )

        grads = Gradients()
        d_h = grad_logits
        layer_grads: List[LayerGrad] = []
        lowest = 0 if NetPart.FEATURES in requested else self.split_index
        for i in range(len(self.layers) - 1, lowest - 1, -1):
            layer = self.layers[i]
            if layer.activation == Activation.RELU:
                d_a = d_h * (fwd.pre_activations[i] > 0.0)
            else:
                d_a = d_h
            layer_grads.append((fwd.activations[i].T @ d_a, d_a.sum(axis=0)))
            if i > lowest:
                d_h = d_a @ layer.weight.T
        layer_grads.reverse()

        if lowest == 0:
            feature_grads = layer_grads[: self.split_index]
            head_grad = layer_grads[self.split_index]
        else:
            feature_grads = []
            head_grad = layer_grads[0]

        if NetPart.FEATURES in requested:
            grads.features = feature_grads
        if NetPart.HEAD in requested:
            grads.head = head_grad

        return grads

    def gradients(
        self,
        batch: np.ndarray,
        loss_fn: LossFn,
        parts: Optional[Sequence[NetPart]] = None,
    ) -> Tuple[float, Gradients]:
        """Forward, evaluate a loss on the logits and back-propagate.

        Args:
            batch (np.ndarray): b x D input batch
            loss_fn (LossFn): Maps logits to (loss, dLoss/dlogits)
            parts (Optional[Sequence[NetPart]]): Parts to differentiate

        Returns:
            Tuple[float, Gradients]: The loss value and its gradients
        """
        fwd = self.forward(batch)
        loss, grad_logits = loss_fn(fwd.logits)
        return loss, self.backward(fwd, grad_logits, parts)


@dataclass(frozen=True)
class SgdSchedule:
    """SGD hyperparameters with a power-decay learning rate.

    eta(p) = eta0 * (1 + decay_a * p) ** (-decay_b), p being the completed fraction.
    """

    eta0: float = 1e-2
    decay_a: float = 10.0
    decay_b: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self) -> None:
        if self.eta0 <= 0:
            raise ConfigError(f"eta0 must be positive, got {self.eta0}")
        if self.decay_a < 0 or self.decay_b < 0:
            raise ConfigError("Power-decay coefficients must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def eta(self, progress: float) -> float:
        """Learning rate at a given training progress in [0, 1]."""
        if not 0.0 <= progress <= 1.0:
            raise ConfigError(f"progress must lie in [0, 1], got {progress}")
        return self.eta0 * (1.0 + self.decay_a * progress) ** (-self.decay_b)


class Sgd:
    """Momentum SGD with weight decay over the unfrozen parts of a DenseNet."""

    def __init__(self, net: DenseNet, schedule: SgdSchedule) -> None:
        """Bind an optimizer to a network.

        Args:
            net (DenseNet): The network updated in place
            schedule (SgdSchedule): The hyperparameters
        """
        self._net = net
        self._schedule = schedule
        self._velocity = [
            (np.zeros_like(layer.weight), np.zeros_like(layer.bias))
            for layer in net.layers
        ]

    @property
    def schedule(self) -> SgdSchedule:
        return self._schedule

    def step(self, grads: Gradients, progress: float) -> float:
        """Apply one update.

        Args:
            grads (Gradients): Gradients of the parts to update
            progress (float): Completed fraction of the training, in [0, 1]

        Returns:
            float: The learning rate used
        """
        net = self._net
        for part in grads.parts():
            if net.is_frozen(part):
                raise FrozenPartError(f"Cannot update frozen part: {part}")

        eta = self._schedule.eta(progress)

        indexed: List[Tuple[int, LayerGrad]] = []
        if grads.features is not None:
            indexed += list(enumerate(grads.features))
        if grads.head is not None:
            indexed.append((net.split_index, grads.head))

        mu = self._schedule.momentum
        wd = self._schedule.weight_decay
        for i, (g_w, g_b) in indexed:
            layer = net.layers[i]
            v_w, v_b = self._velocity[i]
            v_w *= mu
            v_w += g_w + wd * layer.weight
            v_b *= mu
            v_b += g_b + wd * layer.bias
            layer.weight -= eta * v_w
            layer.bias -= eta * v_b

        return eta


def _check_finite(logits: np.ndarray) -> None:
    if not np.all(np.isfinite(logits)):
        raise NumericalError("Non-finite logits")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Args:
        logits (np.ndarray): K-vector or b x K matrix

    Returns:
        np.ndarray: Probabilities, same shape
    """
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite(logits)
    return special.softmax(logits, axis=-1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite(logits)
    return special.log_softmax(logits, axis=-1)


def _smoothed_targets(labels: np.ndarray, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"alpha must lie in [0, 1), got {alpha}")
    n_classes = labels.shape[1]
    return labels * (1.0 - alpha) + alpha / n_classes


def label_smoothed_ce(logits: np.ndarray, labels: np.ndarray, alpha: float) -> float:
    """Label-smoothed cross-entropy, averaged over the batch.

    Args:
        logits (np.ndarray): b x K logits
        labels (np.ndarray): b x K one-hot labels
        alpha (float): Smoothing factor in [0, 1)

    Returns:
        float: The loss
    """
    loss, _ = label_smoothed_ce_grad(logits, labels, alpha)
    return loss


def label_smoothed_ce_grad(
    logits: np.ndarray, labels: np.ndarray, alpha: float
) -> Tuple[float, np.ndarray]:
    """Label-smoothed cross-entropy and its gradient w.r.t. the logits.

    Returns:
        Tuple[float, np.ndarray]: The loss and (softmax - y_smooth) / b
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_2d(labels)
    if logits.shape != labels.shape:
        raise DimensionError(
            f"Logits shape {logits.shape} != labels shape {labels.shape}"
        )
    targets = _smoothed_targets(labels, alpha)
    log_p = log_softmax(logits)
    n = logits.shape[0]
    loss = float(-np.sum(targets * log_p) / n)
    grad = (np.exp(log_p) - targets) / n
    return loss, grad
