#!/usr/bin/env python3
"""zarr containers for network checkpoints and Laplace posteriors.

Both are zarr directory groups. Attributes describe the content, arrays are
float64 in C order.

Checkpoint (`*.ckpt`):
    attrs: format="usfan-densenet", version, dims, activations, split_index, frozen
    arrays: weight_{i} (in x out), bias_{i} (out,) for every layer i

Posterior (`*.lap`):
    attrs: format="usfan-laplace", version, variant, head_shape
    full arrays: theta_map (column-major vec), precision, chol_cov
    kronecker arrays: theta_map (matrix), factor_u, factor_v, chol_u_inv, chol_v_inv
"""

from pathlib import Path
from typing import Any, Dict

import numpy as np
import zarr

from .errors import DataError
from .laplace import FullPosterior, KroneckerPosterior, Posterior, Variant
from .netcore import Activation, DenseLayer, DenseNet, NetPart

__all__ = [
    "NETWORK_FORMAT",
    "POSTERIOR_FORMAT",
    "FORMAT_VERSION",
    "save_network",
    "load_network",
    "save_posterior",
    "load_posterior",
    "container_info",
]

NETWORK_FORMAT = "usfan-densenet"
POSTERIOR_FORMAT = "usfan-laplace"
FORMAT_VERSION = 1

_FULL_ARRAYS = ("theta_map", "precision", "chol_cov")
_KRONECKER_ARRAYS = ("theta_map", "factor_u", "factor_v", "chol_u_inv", "chol_v_inv")


def _write_array(group: zarr.Group, name: str, array: np.ndarray) -> None:
    group.create_dataset(
        name,
        data=np.ascontiguousarray(array, dtype=np.float64),
        compressor=None,
    )


def _open(path: Path, expected_format: str) -> zarr.Group:
    if not path.is_dir():
        raise DataError(f"Container not found: {path}")
    try:
        group = zarr.open_group(str(path), mode="r")
    except (zarr.errors.GroupNotFoundError, KeyError, ValueError) as e:
        raise DataError(f"Unreadable container {path}: {e}") from e

    found = group.attrs.get("format")
    if found != expected_format:
        raise DataError(f"{path} holds '{found}', expected '{expected_format}'")
    version = group.attrs.get("version")
    if version != FORMAT_VERSION:
        raise DataError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    return group


def _read_array(group: zarr.Group, name: str, path: Path) -> np.ndarray:
    try:
        return np.asarray(group[name][:], dtype=np.float64)
    except KeyError as e:
        raise DataError(f"{path} lacks the '{name}' array") from e


def save_network(path: Path, net: DenseNet) -> None:
    """Write a network checkpoint, replacing any existing one."""
    root = zarr.open_group(str(path), mode="w")
    root.attrs.update(
        {
            "format": NETWORK_FORMAT,
            "version": FORMAT_VERSION,
            "dims": net.dims,
            "activations": [str(layer.activation) for layer in net.layers],
            "split_index": net.split_index,
            "frozen": sorted(str(part) for part in net.frozen),
        }
    )
    for i, layer in enumerate(net.layers):
        _write_array(root, f"weight_{i}", layer.weight)
        _write_array(root, f"bias_{i}", layer.bias)


def load_network(path: Path) -> DenseNet:
    """Read a network checkpoint.

    Args:
        path (Path): The checkpoint directory

    Returns:
        DenseNet: The network, frozen flags restored
    """
    root = _open(path, NETWORK_FORMAT)
    activations = root.attrs["activations"]

    try:
        layers = [
            DenseLayer(
                weight=_read_array(root, f"weight_{i}", path),
                bias=_read_array(root, f"bias_{i}", path),
                activation=Activation(tag),
            )
            for i, tag in enumerate(activations)
        ]
        frozen = [NetPart(part) for part in root.attrs.get("frozen", [])]
    except ValueError as e:
        raise DataError(f"Invalid checkpoint {path}: {e}") from e

    net = DenseNet(layers, frozen=frozen)
    if net.dims != list(root.attrs["dims"]) or net.split_index != root.attrs["split_index"]:
        raise DataError(f"Checkpoint {path} attributes do not match its arrays")
    return net


def save_posterior(path: Path, posterior: Posterior) -> None:
    """Write a posterior container, replacing any existing one."""
    root = zarr.open_group(str(path), mode="w")
    root.attrs.update(
        {
            "format": POSTERIOR_FORMAT,
            "version": FORMAT_VERSION,
            "variant": str(posterior.variant),
            "head_shape": list(posterior.shape),
        }
    )
    names = _FULL_ARRAYS if posterior.variant == Variant.FULL else _KRONECKER_ARRAYS
    for name in names:
        _write_array(root, name, getattr(posterior, name))


def load_posterior(path: Path) -> Posterior:
    """Read a posterior container, Cholesky caches included.

    Args:
        path (Path): The posterior directory

    Returns:
        Posterior: FullPosterior or KroneckerPosterior, following the variant tag
    """
    root = _open(path, POSTERIOR_FORMAT)
    try:
        variant = Variant(root.attrs["variant"])
    except (KeyError, ValueError) as e:
        raise DataError(f"Invalid variant tag in {path}") from e
    shape = tuple(root.attrs["head_shape"])

    if variant == Variant.FULL:
        arrays = {name: _read_array(root, name, path) for name in _FULL_ARRAYS}
        size = int(np.prod(shape))
        if (
            len(shape) != 2
            or arrays["theta_map"].shape != (size,)
            or arrays["precision"].shape != (size, size)
            or arrays["chol_cov"].shape != (size, size)
        ):
            raise DataError(f"Posterior {path} attributes do not match its arrays")
        return FullPosterior(shape=(shape[0], shape[1]), **arrays)

    arrays = {name: _read_array(root, name, path) for name in _KRONECKER_ARRAYS}
    posterior = KroneckerPosterior(**arrays)
    if posterior.shape != shape:
        raise DataError(f"Posterior {path} attributes do not match its arrays")
    return posterior


def container_info(path: Path) -> Dict[str, Any]:
    """Attributes and array shapes of a checkpoint or posterior container."""
    if not path.is_dir():
        raise DataError(f"Container not found: {path}")
    try:
        root = zarr.open_group(str(path), mode="r")
    except (zarr.errors.GroupNotFoundError, KeyError, ValueError) as e:
        raise DataError(f"Unreadable container {path}: {e}") from e

    info: Dict[str, Any] = dict(root.attrs)
    for name, array in root.arrays():
        info[name] = f"{array.dtype} {array.shape}"
    return info
