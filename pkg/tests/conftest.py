from pathlib import Path

import numpy as np
import pytest

from usfan.adaptation import AdaptConfig, train_source
from usfan.domains import LabeledSet, gen_toy, mild_preset
from usfan.laplace import LaplaceConfig, fit
from usfan.netcore import DenseNet, NetPart, SgdSchedule
from usfan.utils import STREAM_INIT, make_rng

# One and two hidden layers
NET_DIMS = [(2, 8, 3), (2, 16, 16, 3)]


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234, 0)


@pytest.fixture(params=NET_DIMS, ids=["2-8-3", "2-16-16-3"])
def net(request) -> DenseNet:
    return DenseNet.initialize(request.param, make_rng(7, STREAM_INIT))


@pytest.fixture
def deep_net() -> DenseNet:
    return DenseNet.initialize((2, 5, 4, 3), make_rng(7, STREAM_INIT))


@pytest.fixture
def toy_data() -> tuple[LabeledSet, LabeledSet]:
    return gen_toy(mild_preset(seed=0, n_per_class=30))


@pytest.fixture
def small_cfg() -> AdaptConfig:
    return AdaptConfig(
        batch_size=16,
        epochs_source=5,
        epochs_target=2,
        schedule=SgdSchedule(),
        laplace=LaplaceConfig(mc_samples=5),
        seed=3,
    )


@pytest.fixture
def source_model(toy_data, small_cfg):
    source, _ = toy_data
    net = DenseNet.initialize((2, 8, 3), make_rng(small_cfg.seed, STREAM_INIT))
    report = train_source(net, source, small_cfg)
    posterior = fit(report.net, source, small_cfg.laplace)
    return report.net, posterior


@pytest.fixture
def run_config(tmp_path: Path) -> Path:
    """Tiny toy run writing under tmp_path."""
    path = tmp_path / "tiny.py"
    path.write_text(
        "\n".join(
            [
                'experiment = "tiny"',
                f'output_root = "{tmp_path / "runs"}"',
                'preset = "strong"',
                "n_per_class = 20",
                "hidden_dims = (8,)",
                "batch_size = 16",
                "epochs_source = 3",
                "epochs_target = 2",
                "laplace_mc_samples = 5",
                "grid_resolution = 5",
                "histogram_bins = 4",
                "sweep_shift_scales = (0.0,)",
                "sweep_seeds = (0,)",
            ]
        )
    )
    return path


def _relative_errors(net: DenseNet, batch: np.ndarray, loss_fn, step: float = 1e-5):
    """Analytic vs central finite-difference gradients over every parameter."""
    _, grads = net.gradients(batch, loss_fn, (NetPart.FEATURES, NetPart.HEAD))
    analytic = [*grads.features, grads.head]

    errors = []
    for layer, (g_w, g_b) in zip(net.layers, analytic):
        for param, grad in ((layer.weight, g_w), (layer.bias, g_b)):
            for idx in np.ndindex(param.shape):
                orig = param[idx]
                param[idx] = orig + step
                plus, _ = loss_fn(net.forward(batch).logits)
                param[idx] = orig - step
                minus, _ = loss_fn(net.forward(batch).logits)
                param[idx] = orig
                numeric = (plus - minus) / (2 * step)
                denom = max(abs(grad[idx]) + abs(numeric), 1e-6)
                errors.append(abs(grad[idx] - numeric) / denom)
    return np.array(errors)


@pytest.fixture
def check_gradients():
    def check(net: DenseNet, batch: np.ndarray, loss_fn) -> None:
        errors = _relative_errors(net, batch, loss_fn)
        assert np.mean(errors < 1e-4) >= 0.99
        assert errors.max() < 1e-3

    return check
