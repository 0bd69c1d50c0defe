import numpy as np
import pytest

from latent_advection import config
from latent_advection.baselines import (
    LOG_DOMAIN_THRESHOLD,
    OversizedInputError,
    TransportError,
    direct_bundle,
    direct_pde_fit,
    epsilon_schedule,
    exact_transport_cost,
    grid_points,
    ot_interpolate,
    prepare_distribution,
    sinkhorn,
    splat_bilinear,
    squared_distance_cost,
)
from latent_advection.data import ImagePair, scan_patches
from latent_advection.models import LossWeights
from latent_advection.networks import IdentityCodec
from latent_advection.tensor import ShapeError
from latent_advection.training import OptimizerState, train


def blob(h, w, row, col):
    img = np.zeros((h, w))
    img[row, col] = 1.0
    return img


def test_prepare_distribution_floors_and_normalises():
    mu = prepare_distribution(np.array([[0.0, 3.0], [1.0, 0.0]]), floor=1e-3)
    assert mu.sum() == pytest.approx(1.0)
    assert mu.min() > 0


@pytest.mark.parametrize("values", [np.zeros((2, 2)), np.array([[1.0, -1.0]]), np.array([[np.inf, 1.0]])])
def test_prepare_distribution_rejects(values):
    with pytest.raises(TransportError):
        prepare_distribution(values)


def test_epsilon_schedule_cools_geometrically():
    steps = epsilon_schedule(2.0, 1e-3, 0.5)
    assert steps[0] == pytest.approx(2.0)
    assert steps[-1] == 1e-3
    assert all(a > b for a, b in zip(steps, steps[1:]))
    assert epsilon_schedule(1e-4, 1e-3) == [1e-3]


def test_standard_domain_converges_with_monotone_dual(rng):
    mu1 = rng.uniform(0.1, 1.0, size=(6, 6))
    mu2 = rng.uniform(0.1, 1.0, size=(6, 6))
    plan = sinkhorn(mu1, mu2, epsilon=0.05, tol=1e-9)
    assert not plan.log_domain
    assert plan.converged
    assert plan.marginal_violation() <= 1e-8
    assert np.all(np.diff(plan.trace) >= -1e-12)


def test_small_epsilon_uses_log_domain(rng):
    mu1 = rng.uniform(0.1, 1.0, size=(6, 6))
    mu2 = rng.uniform(0.1, 1.0, size=(6, 6))
    plan = sinkhorn(mu1, mu2, epsilon=LOG_DOMAIN_THRESHOLD / 10, max_iter=2000)
    assert plan.log_domain
    assert np.all(np.isfinite(plan.plan))
    np.testing.assert_allclose(plan.plan.sum(axis=1), plan.mu1, atol=1e-12)
    assert np.all(np.diff(plan.trace) >= -1e-12)


def test_identical_distributions_cost_nothing(rng):
    mu = rng.uniform(0.1, 1.0, size=(5, 5))
    plan = sinkhorn(mu, mu, epsilon=1e-3)
    assert plan.converged
    assert plan.marginal_violation() <= 1e-6
    assert plan.cost < 1e-8


def test_single_pixel_shift_cost():
    plan = sinkhorn(blob(6, 6, 2, 2), blob(6, 6, 2, 3), epsilon=1e-3)
    assert plan.cost == pytest.approx(0.2**2, rel=1e-2)


def test_entropic_cost_is_not_below_exact(rng):
    mu1 = prepare_distribution(rng.uniform(0.1, 1.0, size=(3, 3)))
    mu2 = prepare_distribution(rng.uniform(0.1, 1.0, size=(3, 3)))
    cost = squared_distance_cost(grid_points(3, 3), grid_points(3, 3))
    exact, lp_plan = exact_transport_cost(mu1, mu2, cost)
    np.testing.assert_allclose(lp_plan.sum(axis=1), mu1, atol=1e-7)
    np.testing.assert_allclose(lp_plan.sum(axis=0), mu2, atol=1e-7)
    entropic = sinkhorn(mu1.reshape(3, 3), mu2.reshape(3, 3), epsilon=0.1, tol=1e-10, cost=cost)
    assert entropic.converged
    assert entropic.cost >= exact - 1e-6


def test_explicit_cost_shape_is_checked(rng):
    with pytest.raises(ShapeError):
        sinkhorn(np.ones(4), np.ones(4), cost=np.zeros((4, 3)))


def test_splat_preserves_mass_and_hits_nodes():
    points = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.25]])
    out = splat_bilinear(points, np.array([0.2, 0.3, 0.5]), 5, 3)
    assert out.sum() == pytest.approx(1.0)
    assert out[0, 0] == pytest.approx(0.2)
    assert out[4, 2] == pytest.approx(0.3)
    assert out[1, 1] == pytest.approx(0.5)


def test_interpolation_endpoints_and_mass():
    x0 = 1e-3 + blob(8, 8, 3, 2)
    x1 = 1e-3 + blob(8, 8, 3, 5)
    interp = ot_interpolate(ImagePair(x0, x1), n_steps=3, epsilon=1e-3, max_iter=5000)
    assert interp.frames.shape == (4, 8, 8)
    np.testing.assert_allclose(interp.normalized.sum(axis=(1, 2)), 1.0, atol=1e-9)
    np.testing.assert_allclose(interp.normalized[0].ravel(), interp.transport.plan.sum(axis=1), atol=1e-9)
    assert interp.frames[0].sum() == pytest.approx(x0.sum())
    # the bright pixel travels one column per frame
    assert np.unravel_index(interp.frames[1].argmax(), (8, 8)) == (3, 3)


def test_interpolation_as_inference():
    pair = ImagePair(0.1 + blob(6, 6, 1, 1), 0.1 + blob(6, 6, 4, 4))
    result = ot_interpolate(pair, n_steps=5).as_inference()
    assert result.method == "ot"
    assert result.dt == pytest.approx(0.2)
    assert result.frames.shape == (6, 6, 6, 1)
    assert result.fields is None


def test_interpolation_refuses_large_images(monkeypatch):
    monkeypatch.setattr(config, "OT_MAX_PIXELS", 4096)
    pair = ImagePair(np.ones((128, 128)), np.ones((128, 128)))
    with pytest.raises(OversizedInputError, match="64x64"):
        ot_interpolate(pair, n_steps=2)


def test_interpolation_needs_one_channel():
    with pytest.raises(ShapeError):
        ot_interpolate(ImagePair(np.ones((4, 4, 2)), np.ones((4, 4, 2))), n_steps=2)


def test_negative_images_are_shifted(rng):
    x0 = rng.uniform(-1.0, 1.0, size=(5, 5))
    interp = ot_interpolate(ImagePair(x0, x0), n_steps=1, epsilon=0.05)
    assert np.all(interp.frames >= 0)


def test_direct_bundle_uses_identity_codecs(tiny_config):
    bundle = direct_bundle(tiny_config, 1)
    assert isinstance(bundle.encoder, IdentityCodec)
    assert isinstance(bundle.decoder, IdentityCodec)


def test_direct_fit_runs_without_autoencoder_term(tiny_config, scene):
    dataset = scan_patches(scene.pair(), 16, 16, 4, 4)
    result = direct_pde_fit(dataset, tiny_config)
    assert len(result.metrics) == 2
    assert all(r.loss_ae == 0.0 for r in result.metrics)
    assert result.bundle.spec.codec == "identity"


def test_direct_fit_is_training_without_codecs(tiny_config, scene):
    dataset = scan_patches(scene.pair(), 16, 16, 4, 4)
    fit = direct_pde_fit(dataset, tiny_config)

    bundle = direct_bundle(tiny_config, 1)
    optimizer = OptimizerState.create(bundle.parameters(), tiny_config.optimizer_settings())
    weights = LossWeights(ae=0.0, magnitude=tiny_config.lambda_magnitude, smooth=tiny_config.lambda_smooth)
    plain = train(
        dataset,
        bundle,
        optimizer,
        weights,
        iterations=tiny_config.iterations,
        batch_size=tiny_config.batch_size,
        seed=tiny_config.seed,
        log_every=tiny_config.log_every,
    )
    assert [r.model_dump() for r in fit.metrics] == [r.model_dump() for r in plain.metrics]
    for p, q in zip(fit.bundle.all_parameters(), plain.bundle.all_parameters()):
        np.testing.assert_array_equal(p.numpy(), q.numpy())
