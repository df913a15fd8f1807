"""Seeded end-to-end runs on the toy presets.

These train full-size models and take minutes; run them with `pytest -m slow`.
"""

from dataclasses import replace

import numpy as np
import pytest

from usfan.adaptation import train_source
from usfan.domains import gen_open_set, open_set_preset
from usfan.evaluation import (
    PredictionMode,
    decision_grid,
    entropy_histogram,
    evaluate,
    predict_proba,
)
from usfan.laplace import LaplaceConfig, Variant, fit, predictive_entropy
from usfan.pipeline import RunConfig, init_network, load_domains, run_toy
from usfan.utils import STREAM_EVAL, make_rng

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)


def _source_model(cfg: RunConfig):
    source, target = load_domains(cfg)
    report = train_source(init_network(cfg, source), source, cfg.adapt_config())
    return report.net, source, target


def test_strong_shift_flips_baseline_but_not_usfan():
    rows = [run_toy(RunConfig(preset="strong", seed=seed)) for seed in SEEDS]
    assert np.mean([row["shot_im_acc"] for row in rows]) <= 0.45
    assert sum(row["usfan_acc"] >= 0.9 for row in rows) >= 4


def test_mild_shift_parity():
    for seed in SEEDS:
        row = run_toy(RunConfig(preset="mild", seed=seed))
        assert row["shot_im_acc"] >= 0.95
        assert row["usfan_acc"] >= 0.95


def test_strong_shift_misleads_source_model():
    net, _, target = _source_model(RunConfig(preset="strong"))
    report = evaluate(net, target)
    assert report.accuracy < 0.6
    # the shifted class lands on its neighbour
    assert report.per_class_acc[1] < 0.2


@pytest.mark.parametrize("variant", list(Variant))
def test_entropy_grows_away_from_the_data(variant):
    cfg = RunConfig(preset="mild")
    net, source, _ = _source_model(cfg)
    laplace = LaplaceConfig(prior_precision=cfg.weight_decay, mc_samples=100, variant=variant)
    posterior = fit(net, source, laplace)

    centroids = [source.inputs[source.indices == k].mean(axis=0) for k in range(source.n_classes)]
    angles = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def ring_entropy(radius: float) -> float:
        rings = np.vstack([centroid + radius * circle for centroid in centroids])
        probs = predict_proba(
            net,
            rings,
            PredictionMode.PREDICTIVE,
            posterior,
            laplace,
            make_rng(0, STREAM_EVAL),
        )
        return float(predictive_entropy(probs).mean())

    assert ring_entropy(10.0) > ring_entropy(1.0)


def test_laplace_is_less_confident_on_mistakes():
    cfg = RunConfig(preset="strong")
    net, source, target = _source_model(cfg)
    posterior = fit(net, source, cfg.laplace)

    def incorrect_mean_entropy(mode: PredictionMode) -> float:
        df = entropy_histogram(net, target, 50, mode, posterior, cfg.laplace)
        centers = (df["bin_lo"] + df["bin_hi"]) / 2
        return float((centers * df["count_incorrect"]).sum() / df["count_incorrect"].sum())

    assert incorrect_mean_entropy(PredictionMode.PREDICTIVE) > incorrect_mean_entropy(
        PredictionMode.MAP
    )


def test_private_class_is_more_uncertain():
    cfg = RunConfig(preset="mild", open_set=True)
    source, target = gen_open_set(open_set_preset())
    net = train_source(init_network(cfg, source), source, cfg.adapt_config()).net
    posterior = fit(net, source, cfg.laplace)

    probs = predict_proba(net, target.inputs, PredictionMode.PREDICTIVE, posterior, cfg.laplace)
    entropy = predictive_entropy(probs)
    private = target.indices == 3
    assert entropy[private].mean() > entropy[~private].mean()


def test_usfan_run_is_reproducible():
    cfg = RunConfig(preset="strong", epochs_source=10, epochs_target=5)
    assert run_toy(cfg) == run_toy(replace(cfg))


def test_far_field_grid_cells_are_less_certain():
    cfg = RunConfig(preset="mild")
    net, source, _ = _source_model(cfg)
    posterior = fit(net, source, cfg.laplace)

    cx, cy = source.inputs.mean(axis=0)
    bounds = (cx - 15.0, cx + 15.0, cy - 15.0, cy + 15.0)
    grid = decision_grid(
        net,
        bounds,
        30,
        PredictionMode.PREDICTIVE,
        posterior,
        cfg.laplace,
        make_rng(0, STREAM_EVAL),
    )
    cells = grid[["x", "y"]].to_numpy()
    distance = np.linalg.norm(cells[:, None, :] - source.inputs[None], axis=2).min(axis=1)

    uniform = 1.0 / net.n_classes
    near = grid["weight"][distance < 0.5].mean()
    far = grid["weight"][distance > 8.0].mean()
    assert abs(far - uniform) < abs(near - uniform)
