import logging
import math

import numpy as np
import pytest

from usfan.adaptation import (
    RUN_LOG_COLUMNS,
    AdaptConfig,
    Weighting,
    adapt_target,
    compute_weights,
    iterate_minibatches,
    loss_div,
    loss_div_grad,
    loss_ent,
    loss_ent_grad,
    loss_ent_ug,
    loss_ent_ug_grad,
    train_source,
    usfan_loss,
    usfan_loss_grad,
)
from usfan.domains import BlobSpec, gen_toy
from usfan.errors import ConfigError, DataError, DimensionError
from usfan.laplace import KroneckerPosterior
from usfan.netcore import DenseNet, NetPart, Sgd, softmax
from usfan.utils import STREAM_INIT, STREAM_TARGET_SHUFFLE, make_rng


def test_loss_ent_values():
    assert loss_ent(np.eye(3)) == 0.0
    assert loss_ent(np.full((4, 3), 1 / 3)) == pytest.approx(math.log(3))
    probs = np.array([[0.75, 0.25], [0.5, 0.5]])
    assert loss_ent(probs) == pytest.approx(0.6277, abs=1e-4)


def test_loss_div_values():
    assert loss_div(np.eye(3)) == pytest.approx(-math.log(3))
    assert loss_div(np.tile([1.0, 0.0, 0.0], (5, 1))) == 0.0
    assert loss_div(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(-math.log(2))


def test_loss_ent_ug_values(rng):
    probs = softmax(rng.standard_normal((6, 3)))
    assert abs(loss_ent_ug(probs, np.ones(6)) - loss_ent(probs)) <= 1e-15
    assert loss_ent_ug(probs, np.zeros(6)) == 0.0
    single = np.array([[0.5, 0.5]])
    assert loss_ent_ug(single, np.array([0.5])) == pytest.approx(0.3466, abs=1e-4)

    with pytest.raises(DimensionError):
        loss_ent_ug(probs, np.ones(5))


def test_usfan_loss_mixing(rng):
    probs = softmax(rng.standard_normal((6, 3)))
    weights = rng.uniform(1 / 3, 1, size=6)
    assert usfan_loss(probs, weights, 0.0) == loss_ent_ug(probs, weights)
    assert usfan_loss(probs, weights, 1.0) == loss_div(probs)
    expected = 0.5 * loss_ent_ug(probs, weights) + 0.5 * loss_div(probs)
    assert usfan_loss(probs, weights, 0.5) == pytest.approx(expected)

    with pytest.raises(ConfigError):
        usfan_loss(probs, weights, 1.5)


def test_usfan_loss_is_bounded(rng):
    k = 4
    for gamma in (0.0, 0.3, 0.5, 1.0):
        for _ in range(20):
            probs = softmax(3 * rng.standard_normal((10, k)))
            weights = rng.uniform(1 / k, 1, size=10)
            value = usfan_loss(probs, weights, gamma)
            assert -gamma * math.log(k) - 1e-12 <= value
            assert value <= (1 - gamma) * math.log(k) + 1e-12


def test_entropy_gradients(net, rng, check_gradients):
    check_gradients(net, rng.standard_normal((8, 2)), loss_ent_grad)


def test_diversity_gradients(net, rng, check_gradients):
    check_gradients(net, rng.standard_normal((8, 2)), loss_div_grad)


def test_weighted_entropy_gradients(net, rng, check_gradients):
    weights = rng.uniform(1 / 3, 1, size=8)
    check_gradients(
        net,
        rng.standard_normal((8, 2)),
        lambda logits: loss_ent_ug_grad(logits, weights),
    )


def test_usfan_gradients(net, rng, check_gradients):
    weights = rng.uniform(1 / 3, 1, size=8)

    def loss_fn(logits):
        terms, grad = usfan_loss_grad(logits, weights, 0.5)
        return terms.total, grad

    check_gradients(net, rng.standard_normal((8, 2)), loss_fn)


def test_uniform_weights_reduce_to_plain_entropy(rng):
    logits = rng.standard_normal((6, 3))
    loss_a, grad_a = loss_ent_ug_grad(logits, np.ones(6))
    loss_b, grad_b = loss_ent_grad(logits)
    assert loss_a == loss_b
    np.testing.assert_array_equal(grad_a, grad_b)


def test_weights_are_detached(deep_net, rng):
    x = rng.standard_normal((8, 2))
    deep_net.freeze(NetPart.HEAD)
    fwd = deep_net.forward(x)
    weights = rng.uniform(1 / 3, 1, size=8)

    _, grad_a = usfan_loss_grad(fwd.logits, weights, 0.5)
    _, grad_b = usfan_loss_grad(fwd.logits, weights.copy(), 0.5)
    a = deep_net.backward(fwd, grad_a)
    b = deep_net.backward(fwd, grad_b)
    for (wa, ba), (wb, bb) in zip(a.features, b.features):
        np.testing.assert_array_equal(wa, wb)
        np.testing.assert_array_equal(ba, bb)


def test_weighting_resolution():
    assert AdaptConfig().weighting == Weighting.LAPLACE
    assert AdaptConfig(map_weighting=True).weighting == Weighting.MAP
    assert AdaptConfig(baseline_mode=True).weighting == Weighting.UNIFORM
    assert AdaptConfig(baseline_mode=True, map_weighting=True).weighting == Weighting.UNIFORM


def test_config_defaults_and_validation():
    cfg = AdaptConfig()
    assert (cfg.alpha, cfg.gamma, cfg.batch_size) == (0.1, 0.5, 64)
    with pytest.raises(ConfigError):
        AdaptConfig(alpha=1.0)
    with pytest.raises(ConfigError):
        AdaptConfig(gamma=-0.1)
    with pytest.raises(ConfigError):
        AdaptConfig(batch_size=0)
    with pytest.raises(ConfigError):
        AdaptConfig(epochs_target=0)


def test_minibatches_cover_every_row():
    batches = list(iterate_minibatches(10, 4, make_rng(0, 0)))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches)) == list(range(10))


def test_compute_weights_modes(source_model, toy_data, small_cfg):
    net, posterior = source_model
    _, target = toy_data
    fwd = net.forward(target.inputs[:10])
    rng = make_rng(0, 0)

    uniform = compute_weights(Weighting.UNIFORM, fwd, None, small_cfg.laplace, rng)
    np.testing.assert_array_equal(uniform, 1.0)
    for weighting in (Weighting.MAP, Weighting.LAPLACE):
        w = compute_weights(weighting, fwd, posterior, small_cfg.laplace, rng)
        assert w.shape == (10,)
        assert np.all(w >= 1 / 3 - 1e-12) and np.all(w <= 1.0)

    with pytest.raises(ConfigError):
        compute_weights(Weighting.LAPLACE, fwd, None, small_cfg.laplace, rng)


def test_train_source_separable_blobs():
    spec = BlobSpec(
        class_means=((-3.0, 0.0), (3.0, 0.0)),
        class_covs=(((0.3, 0.0), (0.0, 0.3)),) * 2,
        n_per_class=100,
        shifts=((0.0, 0.0), (0.0, 0.0)),
        seed=0,
    )
    source, _ = gen_toy(spec)
    net = DenseNet.initialize((2, 16, 2), make_rng(0, STREAM_INIT))
    report = train_source(net, source, AdaptConfig(epochs_source=50))
    assert report.accuracy >= 0.99
    assert list(report.history.columns) == ["epoch", "loss", "accuracy"]
    assert len(report.history) == 50


def test_train_source_is_deterministic_and_pure(toy_data, small_cfg):
    source, _ = toy_data
    net = DenseNet.initialize((2, 8, 3), make_rng(0, STREAM_INIT))
    digest = net.digest()
    a = train_source(net, source, small_cfg)
    b = train_source(net, source, small_cfg)
    assert a.net.digest() == b.net.digest()
    assert net.digest() == digest


def test_train_source_checks_dimensions(toy_data, small_cfg):
    source, _ = toy_data
    net = DenseNet.initialize((2, 8, 4), make_rng(0, STREAM_INIT))
    with pytest.raises(DimensionError):
        train_source(net, source, small_cfg)


def test_adapt_keeps_head_and_input(source_model, toy_data, small_cfg):
    net, posterior = source_model
    _, target = toy_data
    digest = net.digest()

    report = adapt_target(net, posterior, target.unlabeled(), small_cfg)
    assert report.weighting == Weighting.LAPLACE
    assert report.net.digest(NetPart.HEAD) == net.digest(NetPart.HEAD)
    assert report.net.digest(NetPart.FEATURES) != net.digest(NetPart.FEATURES)
    assert net.digest() == digest
    np.testing.assert_array_equal(posterior.map_matrix, net.head_matrix())


def test_adapt_run_log(source_model, toy_data, small_cfg):
    net, posterior = source_model
    _, target = toy_data

    report = adapt_target(net, posterior, target.unlabeled(), small_cfg)
    log = report.log
    assert list(log.columns) == RUN_LOG_COLUMNS
    # 90 samples in batches of 16 over 2 epochs
    assert len(log) == 2 * 6
    assert log["target_acc_if_labels_available"].isna().all()
    assert log["mean_weight"].between(1 / 3 - 1e-9, 1.0).all()

    labelled = adapt_target(
        net, posterior, target.unlabeled(), small_cfg, labels=target.indices
    )
    assert labelled.log["target_acc_if_labels_available"].between(0, 1).all()


def test_adapt_is_deterministic(source_model, toy_data, small_cfg):
    net, posterior = source_model
    _, target = toy_data
    a = adapt_target(net, posterior, target.unlabeled(), small_cfg)
    b = adapt_target(net, posterior, target.unlabeled(), small_cfg)
    assert a.net.digest() == b.net.digest()
    assert a.log.equals(b.log)


def test_adapt_needs_posterior(source_model, toy_data, small_cfg):
    net, _ = source_model
    _, target = toy_data
    with pytest.raises(ConfigError, match="fit-laplace"):
        adapt_target(net, None, target.unlabeled(), small_cfg)


def test_adapt_rejects_foreign_posterior(source_model, toy_data, small_cfg):
    net, posterior = source_model
    _, target = toy_data
    foreign = KroneckerPosterior.from_factors(
        posterior.theta_map + 1.0, posterior.factor_u, posterior.factor_v
    )
    with pytest.raises(DataError):
        adapt_target(net, foreign, target.unlabeled(), small_cfg)


def test_adapt_clamps_batch_size(source_model, toy_data, small_cfg, caplog):
    net, posterior = source_model
    _, target = toy_data
    cfg = AdaptConfig(
        batch_size=1000, epochs_target=1, laplace=small_cfg.laplace, seed=small_cfg.seed
    )
    with caplog.at_level(logging.WARNING, logger="usfan"):
        report = adapt_target(net, posterior, target.unlabeled(), cfg)
    assert "clamped" in caplog.text
    assert len(report.log) == 1


def test_baseline_matches_direct_shot_im(source_model, toy_data):
    net, _ = source_model
    _, target = toy_data
    cfg = AdaptConfig(baseline_mode=True, batch_size=16, epochs_target=17, seed=3)

    report = adapt_target(net, None, target.unlabeled(), cfg)
    assert report.weighting == Weighting.UNIFORM

    reference = net.copy()
    reference.unfreeze(NetPart.FEATURES)
    reference.freeze(NetPart.HEAD)
    sgd = Sgd(reference, cfg.schedule)
    total_steps = cfg.epochs_target * math.ceil(target.n / cfg.batch_size)
    gamma = cfg.gamma

    losses = []
    step = 0
    for epoch in range(cfg.epochs_target):
        rng = make_rng(cfg.seed, STREAM_TARGET_SHUFFLE, epoch)
        for rows in iterate_minibatches(target.n, cfg.batch_size, rng):
            fwd = reference.forward(target.inputs[rows])
            ent, ent_grad = loss_ent_grad(fwd.logits)
            div, div_grad = loss_div_grad(fwd.logits)
            grad = (1 - gamma) * ent_grad + gamma * div_grad
            sgd.step(reference.backward(fwd, grad, (NetPart.FEATURES,)), step / total_steps)
            losses.append((1 - gamma) * ent + gamma * div)
            step += 1

    assert step >= 100
    np.testing.assert_allclose(report.log["loss_total"], losses, rtol=0, atol=1e-12)
    for adapted, expected in zip(report.net.layers, reference.layers):
        np.testing.assert_allclose(adapted.weight, expected.weight, rtol=0, atol=1e-12)
        np.testing.assert_allclose(adapted.bias, expected.bias, rtol=0, atol=1e-12)
