#!/usr/bin/env python3
"""Last-layer Laplace approximation over the hypothesis head.

Head parameters are handled as the (d_z + 1) x K matrix Θ = [W; b], the bias
being folded in by appending a constant 1 feature to the latents. Vectorization
is column-major, so the Hessian of the head factorizes as H = V ⊗ U with U on
the input side ((d_z + 1) x (d_z + 1)) and V on the output side (K x K).
"""

import logging
from dataclasses import dataclass
from enum import StrEnum
from typing import Optional, Tuple, Union

import numpy as np
from scipy import linalg, special

from .domains import LabeledSet
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .netcore import DenseNet, softmax

__all__ = [
    "Variant",
    "LaplaceConfig",
    "FullPosterior",
    "KroneckerPosterior",
    "Posterior",
    "augment",
    "ggn_hessian_full",
    "ggn_hessian_kfac",
    "kron_relative_error",
    "fit",
    "predictive_mean",
    "predictive_entropy",
    "entropy_weights",
]

logger = logging.getLogger(__name__)


class Variant(StrEnum):
    """Hessian structure of the posterior."""

    FULL = "full"
    KRONECKER = "kronecker"


@dataclass(frozen=True)
class LaplaceConfig:
    """Laplace approximation hyperparameters.

    Attributes:
        prior_precision: Isotropic Gaussian prior precision λ, equal to the source weight decay
        temperature: Logit scaling 1/τ applied before averaging sampled predictions
        mc_samples: Number M of posterior samples per predictive mean
        variant: Full covariance or Kronecker-factored
    """

    prior_precision: float = 5e-4
    temperature: float = 0.4
    mc_samples: int = 10
    variant: Variant = Variant.KRONECKER

    def __post_init__(self) -> None:
        if not self.prior_precision > 0:
            raise ConfigError(
                f"prior_precision must be positive, got {self.prior_precision}"
            )
        if not 0.0 < self.temperature <= 1.0:
            raise ConfigError(f"temperature must lie in (0, 1], got {self.temperature}")
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError as e:
            raise ConfigError(f"Unknown Laplace variant: {self.variant}") from e


def _lower_cholesky(matrix: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError as e:
        raise NumericalError(f"{what} is not positive definite: {e}") from e


def _inverse_cholesky(matrix: np.ndarray, what: str) -> np.ndarray:
    """Lower Cholesky factor of the inverse of an SPD matrix."""
    c = _lower_cholesky(matrix, what)
    inverse = linalg.cho_solve((c, True), np.eye(matrix.shape[0]))
    inverse = 0.5 * (inverse + inverse.T)
    return _lower_cholesky(inverse, f"Inverse of {what}")


@dataclass
class FullPosterior:
    """Gaussian posterior N(vec(Θ_MAP), H⁻¹) with a dense precision.

    Attributes:
        theta_map: Column-major vec of the head matrix, length (d_z + 1) * K
        precision: The precision H
        chol_cov: Lower Cholesky factor of H⁻¹
        shape: The head matrix shape (d_z + 1, K)
    """

    theta_map: np.ndarray
    precision: np.ndarray
    chol_cov: np.ndarray
    shape: Tuple[int, int]

    variant = Variant.FULL

    @classmethod
    def from_precision(
        cls, theta_map: np.ndarray, precision: np.ndarray
    ) -> "FullPosterior":
        """Build a posterior around a head matrix.

        Args:
            theta_map (np.ndarray): (d_z + 1) x K head matrix
            precision (np.ndarray): Square SPD precision of matching order

        Returns:
            FullPosterior: The posterior, Cholesky cache included
        """
        n_params = theta_map.size
        if precision.shape != (n_params, n_params):
            raise DimensionError(
                f"Precision shape {precision.shape} does not match {n_params} head parameters"
            )
        return cls(
            theta_map=theta_map.flatten(order="F"),
            precision=precision,
            chol_cov=_inverse_cholesky(precision, "Posterior precision"),
            shape=(theta_map.shape[0], theta_map.shape[1]),
        )

    @property
    def map_matrix(self) -> np.ndarray:
        return self.theta_map.reshape(self.shape, order="F")

    def covariance(self) -> np.ndarray:
        """Dense covariance H⁻¹ of vec(Θ)."""
        return self.chol_cov @ self.chol_cov.T

    def sample_params(
        self, rng: np.random.Generator, n_samples: Optional[int] = None
    ) -> np.ndarray:
        """Draw head matrices θ_j = θ_MAP + L ε.

        ε is drawn as a (d_z + 1) x K matrix, then vectorized column-major, so
        that a KroneckerPosterior with the same precision consumes the same
        normals and returns the same draws.

        Args:
            rng (np.random.Generator): The random generator
            n_samples (Optional[int]): Number of draws. Defaults to a single unbatched draw.

        Returns:
            np.ndarray: (d_z + 1) x K matrix, or n x (d_z + 1) x K when n_samples is given
        """
        n = 1 if n_samples is None else n_samples
        d1, k = self.shape
        eps = rng.standard_normal((n, d1, k)).transpose(0, 2, 1).reshape(n, d1 * k)
        vecs = self.theta_map + eps @ self.chol_cov.T
        thetas = vecs.reshape(n, k, d1).transpose(0, 2, 1)
        return thetas[0] if n_samples is None else thetas


@dataclass
class KroneckerPosterior:
    """Matrix-normal posterior with precision V ⊗ U.

    Attributes:
        theta_map: (d_z + 1) x K head matrix
        factor_u: Input-side factor U
        factor_v: Output-side factor V
        chol_u_inv: Lower Cholesky factor of U⁻¹
        chol_v_inv: Lower Cholesky factor of V⁻¹
    """

    theta_map: np.ndarray
    factor_u: np.ndarray
    factor_v: np.ndarray
    chol_u_inv: np.ndarray
    chol_v_inv: np.ndarray

    variant = Variant.KRONECKER

    @classmethod
    def from_factors(
        cls, theta_map: np.ndarray, factor_u: np.ndarray, factor_v: np.ndarray
    ) -> "KroneckerPosterior":
        """Build a posterior from its Kronecker factors.

        Args:
            theta_map (np.ndarray): (d_z + 1) x K head matrix
            factor_u (np.ndarray): SPD input-side factor
            factor_v (np.ndarray): SPD output-side factor

        Returns:
            KroneckerPosterior: The posterior, Cholesky caches included
        """
        d1, k = theta_map.shape
        if factor_u.shape != (d1, d1) or factor_v.shape != (k, k):
            raise DimensionError(
                f"Factors {factor_u.shape}, {factor_v.shape} do not match head {theta_map.shape}"
            )
        return cls(
            theta_map=theta_map.copy(),
            factor_u=factor_u,
            factor_v=factor_v,
            chol_u_inv=_inverse_cholesky(factor_u, "Factor U"),
            chol_v_inv=_inverse_cholesky(factor_v, "Factor V"),
        )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.theta_map.shape

    @property
    def map_matrix(self) -> np.ndarray:
        return self.theta_map

    @property
    def precision(self) -> np.ndarray:
        """Dense V ⊗ U, only meant for small heads."""
        return np.kron(self.factor_v, self.factor_u)

    def covariance(self) -> np.ndarray:
        """Dense V⁻¹ ⊗ U⁻¹, only meant for small heads."""
        u_inv = self.chol_u_inv @ self.chol_u_inv.T
        v_inv = self.chol_v_inv @ self.chol_v_inv.T
        return np.kron(v_inv, u_inv)

    def sample_params(
        self, rng: np.random.Generator, n_samples: Optional[int] = None
    ) -> np.ndarray:
        """Draw head matrices θ_j = θ_MAP + A E Bᵀ, A = chol(U⁻¹), B = chol(V⁻¹)."""
        n = 1 if n_samples is None else n_samples
        eps = rng.standard_normal((n, *self.theta_map.shape))
        thetas = self.theta_map + self.chol_u_inv @ eps @ self.chol_v_inv.T
        return thetas[0] if n_samples is None else thetas


Posterior = Union[FullPosterior, KroneckerPosterior]


def augment(latents: np.ndarray) -> np.ndarray:
    """Append the constant 1 bias feature to a latent batch."""
    latents = np.atleast_2d(latents)
    return np.hstack([latents, np.ones((latents.shape[0], 1))])


def _check_curvature_inputs(
    latents: np.ndarray, probs: np.ndarray, prior_precision: float
) -> None:
    if prior_precision < 0:
        raise ConfigError(f"prior_precision must be >= 0, got {prior_precision}")
    if latents.ndim != 2 or probs.ndim != 2 or latents.shape[0] != probs.shape[0]:
        raise DimensionError(
            f"Latents {latents.shape} and probabilities {probs.shape} do not pair up"
        )


def _output_curvature(probs: np.ndarray) -> np.ndarray:
    """Per-sample softmax Hessians Λ_i = diag(p_i) - p_i p_iᵀ, n x K x K."""
    n, k = probs.shape
    lam = -probs[:, :, None] * probs[:, None, :]
    lam[:, np.arange(k), np.arange(k)] += probs
    return lam


def ggn_hessian_full(
    latents: np.ndarray, probs: np.ndarray, prior_precision: float
) -> np.ndarray:
    """Dense generalized Gauss-Newton of the head, plus the prior.

    Args:
        latents (np.ndarray): n x (d_z + 1) augmented latents
        probs (np.ndarray): n x K softmax outputs at θ_MAP
        prior_precision (float): λ >= 0

    Returns:
        np.ndarray: H = Σ_i Λ_i ⊗ z_i z_iᵀ + λI
    """
    _check_curvature_inputs(latents, probs, prior_precision)
    d1 = latents.shape[1]
    k = probs.shape[1]
    lam = _output_curvature(probs)
    h = np.einsum("nkl,na,nb->kalb", lam, latents, latents).reshape(d1 * k, d1 * k)
    h += prior_precision * np.eye(d1 * k)
    return h


def ggn_hessian_kfac(
    latents: np.ndarray, probs: np.ndarray, prior_precision: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Kronecker factors of the head GGN, prior split as √λ on each factor.

    Args:
        latents (np.ndarray): n x (d_z + 1) augmented latents
        probs (np.ndarray): n x K softmax outputs at θ_MAP
        prior_precision (float): λ >= 0

    Returns:
        Tuple[np.ndarray, np.ndarray]: U = Σ z zᵀ/√n + √λI and V = Σ Λ/√n + √λI
    """
    _check_curvature_inputs(latents, probs, prior_precision)
    n, d1 = latents.shape
    k = probs.shape[1]
    root_prior = np.sqrt(prior_precision)

    factor_u = root_prior * np.eye(d1)
    factor_v = root_prior * np.eye(k)
    if n > 0:
        scale = 1.0 / np.sqrt(n)
        factor_u = factor_u + scale * (latents.T @ latents)
        factor_v = factor_v + scale * _output_curvature(probs).sum(axis=0)
    return factor_u, factor_v


def kron_relative_error(
    factor_u: np.ndarray, factor_v: np.ndarray, hessian: np.ndarray
) -> float:
    """Relative Frobenius error of V ⊗ U against a dense Hessian."""
    approx = np.kron(factor_v, factor_u)
    return float(np.linalg.norm(approx - hessian) / np.linalg.norm(hessian))


def fit(net: DenseNet, source: LabeledSet, cfg: LaplaceConfig) -> Posterior:
    """Fit a last-layer Laplace posterior with a single pass over the source data.

    Args:
        net (DenseNet): Source model at its MAP estimate
        source (LabeledSet): The source data
        cfg (LaplaceConfig): The Laplace hyperparameters

    Returns:
        Posterior: FullPosterior or KroneckerPosterior, depending on cfg.variant
    """
    fwd = net.forward(source.inputs)
    latents = augment(fwd.latents)
    probs = softmax(fwd.logits)
    theta_map = net.head_matrix()

    if cfg.variant == Variant.FULL:
        hessian = ggn_hessian_full(latents, probs, cfg.prior_precision)
        posterior: Posterior = FullPosterior.from_precision(theta_map, hessian)
    else:
        factor_u, factor_v = ggn_hessian_kfac(latents, probs, cfg.prior_precision)
        posterior = KroneckerPosterior.from_factors(theta_map, factor_u, factor_v)
        if theta_map.size <= 512:
            hessian = ggn_hessian_full(latents, probs, cfg.prior_precision)
            error = kron_relative_error(factor_u, factor_v, hessian)
            logger.info(f"Kronecker relative Frobenius error = {error:0.4f}")

    logger.debug(
        f"Fitted {cfg.variant} posterior on {source.n} samples, head shape {theta_map.shape}"
    )
    return posterior


def predictive_mean(
    posterior: Posterior,
    latents: np.ndarray,
    cfg: LaplaceConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Monte-Carlo predictive mean (1/M) Σ_j softmax(h_θj(z) / τ).

    Args:
        posterior (Posterior): The fitted posterior
        latents (np.ndarray): b x (d_z + 1) augmented latents
        cfg (LaplaceConfig): Provides M and τ
        rng (np.random.Generator): Random generator for the parameter draws

    Returns:
        np.ndarray: b x K predictive probabilities
    """
    if cfg.mc_samples < 1:
        raise ConfigError(f"mc_samples must be >= 1, got {cfg.mc_samples}")
    latents = np.atleast_2d(latents)
    d1, _ = posterior.shape
    if latents.shape[1] != d1:
        raise DimensionError(
            f"Expected augmented latents with {d1} columns, got {latents.shape[1]}"
        )

    thetas = posterior.sample_params(rng, cfg.mc_samples)
    logits = np.einsum("bd,mdk->mbk", latents, thetas) / cfg.temperature
    return softmax(logits).mean(axis=0)


def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    """Row entropies in nats."""
    return special.entr(probs).sum(axis=-1)


def entropy_weights(probs: np.ndarray) -> np.ndarray:
    """Per-sample weights w_i = exp(-H(p_i)).

    Args:
        probs (np.ndarray): b x K probability rows

    Returns:
        np.ndarray: Weights in [1/K, 1]
    """
    probs = np.atleast_2d(probs)
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-9):
        raise DataError("Entropy weights need probability rows")
    return np.exp(-predictive_entropy(probs))
