"""Reconstruction, sharpness, BN-statistics, diversity and gradient-matching losses."""

import numpy as np
import pytest

from sadag_lab.autodiff import Tensor, finite_diff, grad, ops
from sadag_lab.autodiff.grad import relative_error
from sadag_lab.errors import NotNormalizedError, ShapeError, ZeroGradientError
from sadag_lab.losses import (
    GradVector,
    ascent_perturbation,
    bn_loss,
    bn_loss_from_stats,
    diversity_loss,
    final_loss,
    grad_match_loss,
    literal_perturbation_gradient,
    neighbor_perturbation,
    reconstruction_from_activations,
    reconstruction_loss,
    sam_epsilon,
    sam_loss,
    sharpness_probe,
)
from sadag_lab.nets import EMBED_DIM
from sadag_lab.quant import default_bit_map, init_quantnet

pytestmark = pytest.mark.unit


@pytest.fixture
def embeddings():
    return np.random.default_rng(5).standard_normal((3, EMBED_DIM))


# -- reconstruction and sharpness ----------------------------------------------------------------


def test_reconstruction_hand_example():
    loss = reconstruction_from_activations([Tensor([[1.0, 2.0]])], [Tensor([[1.0, 0.0]])])
    assert loss.item() == 2.0


def test_reconstruction_doubles_with_duplicated_batch(quantnet, teacher, images):
    single = reconstruction_loss(quantnet, teacher, images).item()
    doubled = reconstruction_loss(quantnet, teacher, np.concatenate([images, images])).item()
    assert doubled == pytest.approx(2 * single, rel=1e-12)
    mean = reconstruction_loss(quantnet, teacher, images, reduction="mean").item()
    assert mean == pytest.approx(single / len(images), rel=1e-12)


def test_reconstruction_is_zero_for_full_precision_copy(teacher, images):
    q = init_quantnet(teacher, *default_bit_map(32, 32))
    assert reconstruction_loss(q, teacher, images).item() == 0.0


def test_reconstruction_rejects_layer_mismatch():
    with pytest.raises(ShapeError, match="mismatch"):
        reconstruction_from_activations([Tensor([1.0])], [Tensor([1.0]), Tensor([2.0])])


def test_ascent_perturbation_examples():
    (eps,) = ascent_perturbation([np.array([3.0, 4.0])], rho=1.0)
    np.testing.assert_allclose(eps, [0.6, 0.8])
    (zero,) = ascent_perturbation([np.array([3.0, 4.0])], rho=0.0)
    np.testing.assert_array_equal(zero, [0.0, 0.0])
    with pytest.raises(ZeroGradientError):
        ascent_perturbation([np.zeros(2)], rho=0.1)


def test_sharpness_of_quadratic_matches_closed_form():
    # L(w) = ||w||^2 at w = (3, 4): the ascent point is w * (1 + rho / 5)
    def loss_fn(params):
        w = params["w"]
        return ops.sum(ops.mul(w, w))

    probe = sharpness_probe(loss_fn, {"w": np.array([3.0, 4.0])}, rho=0.5)
    assert probe.base_loss == pytest.approx(25.0)
    assert probe.perturbed_loss == pytest.approx(25.0 * 1.1**2)
    assert probe.sharpness == pytest.approx(25.0 * (1.1**2 - 1))
    assert probe.epsilon_norm == pytest.approx(0.5)
    assert sharpness_probe(loss_fn, {"w": np.array([3.0, 4.0])}, rho=0.0).sharpness == 0.0


def test_sam_epsilon_has_radius_norm(quantnet, teacher, images):
    eps = sam_epsilon(quantnet, teacher, images, rho=0.05)
    assert set(eps) == set(quantnet.effective_parameters())
    norm = np.sqrt(sum(float(np.sum(e * e)) for e in eps.values()))
    assert norm == pytest.approx(0.05)
    zero = sam_epsilon(quantnet, teacher, images, rho=0.0)
    assert all(not np.any(e) for e in zero.values())


def test_sam_loss_is_nonnegative_for_small_radius(quantnet, teacher, images):
    probe = sam_loss(quantnet, teacher, images, rho=1e-4)
    base = reconstruction_loss(quantnet, teacher, images).item()
    assert probe.base_loss == pytest.approx(base, rel=1e-12)
    assert probe.sharpness > 0
    assert sam_loss(quantnet, teacher, images, rho=0.0).sharpness == 0.0


# -- BN statistics -------------------------------------------------------------------------------


def test_bn_loss_hand_example():
    stats = [(Tensor([1.0]), Tensor([2.0]))]
    assert bn_loss_from_stats(stats, [(np.array([0.0]), np.array([1.0]))]).item() == 2.0


def test_bn_loss_ignores_batch_order(teacher, images):
    shuffled = images[np.random.default_rng(0).permutation(len(images))]
    assert bn_loss(teacher, shuffled).item() == pytest.approx(bn_loss(teacher, images).item())


def test_bn_loss_needs_two_images(teacher, images):
    with pytest.raises(ShapeError):
        bn_loss(teacher, images[:1])


# -- diversity -----------------------------------------------------------------------------------


def test_diversity_examples():
    assert diversity_loss(np.eye(2), zeta=0.0).item() == 0.0
    same = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert diversity_loss(same, zeta=0.0).item() == 2.0
    c = 0.05
    close = np.array([[1.0, 0.0], [c, np.sqrt(1 - c * c)]])
    assert diversity_loss(close, zeta=0.1).item() == 0.0


def test_diversity_accepts_grad_vectors_and_zero_rows():
    rows = [
        GradVector(np.array([3.0, 4.0])).unit(),
        GradVector(np.array([0.0, 0.0])),
        GradVector(np.array([0.6, 0.8]), normalized=True),
    ]
    assert diversity_loss(rows, zeta=0.5).item() == pytest.approx(1.0)


def test_diversity_rejects_unnormalized_rows():
    with pytest.raises(NotNormalizedError):
        diversity_loss(np.array([[2.0, 0.0], [0.0, 1.0]]), zeta=0.0)
    with pytest.raises(ValueError):
        diversity_loss(np.eye(2), zeta=-0.1)


# -- neighbor perturbation and gradient matching -------------------------------------------------


def test_zero_perturbation_gives_zero_matching_loss(generator, embeddings, quantnet, teacher):
    result = grad_match_loss(generator, embeddings, quantnet, teacher, np.zeros_like(embeddings))
    assert result.value.item() == 0.0
    assert result.skipped_pairs == 0


def test_matching_rejects_mismatched_perturbations(generator, embeddings, quantnet, teacher):
    with pytest.raises(ShapeError):
        grad_match_loss(generator, embeddings, quantnet, teacher, np.zeros((2, EMBED_DIM)))


def test_neighbor_perturbation_has_norm_nu(generator, embeddings, quantnet, teacher):
    result = neighbor_perturbation(
        generator, embeddings, quantnet, teacher, nu=2.0, rng=np.random.default_rng(0)
    )
    assert result.eps.shape == embeddings.shape
    np.testing.assert_allclose(np.linalg.norm(result.eps, axis=1), 2.0, rtol=1e-9)
    assert result.fallback.shape == (3,)


def test_batched_perturbation_rows_share_generator_statistics(
    generator, embeddings, quantnet, teacher
):
    moved = embeddings.copy()
    moved[1] += 3.0
    first = neighbor_perturbation(
        generator, embeddings, quantnet, teacher, nu=2.0, rng=np.random.default_rng(0)
    )
    second = neighbor_perturbation(
        generator, moved, quantnet, teacher, nu=2.0, rng=np.random.default_rng(0)
    )
    assert not first.fallback[0] and not second.fallback[0]
    assert not np.allclose(first.eps[0], second.eps[0])


@pytest.mark.slow
def test_second_order_perturbation_has_norm_nu(generator, embeddings, quantnet, teacher):
    result = neighbor_perturbation(
        generator,
        embeddings[:2],
        quantnet,
        teacher,
        nu=2.0,
        rng=np.random.default_rng(0),
        second_order=True,
    )
    np.testing.assert_allclose(np.linalg.norm(result.eps, axis=1), 2.0, rtol=1e-9)


@pytest.mark.slow
def test_literal_perturbation_gradient_vanishes(generator, embeddings, quantnet, teacher):
    gz = literal_perturbation_gradient(generator, embeddings[0], quantnet, teacher)
    assert gz.shape == (EMBED_DIM,)
    assert np.linalg.norm(gz) < 1e-8


def test_final_loss_reduces_to_bn_loss(generator, embeddings, quantnet, teacher):
    z = Tensor(embeddings)
    terms = final_loss(teacher, quantnet, generator, z, 0.0, 0.0, zeta=0.0, nu=2.0)
    assert terms.diverse is None and terms.grad is None
    assert terms.total.item() == bn_loss(teacher, generator(z)).item()


def test_final_loss_combines_all_terms(generator, embeddings, quantnet, teacher):
    z = Tensor(embeddings)
    terms = final_loss(
        teacher, quantnet, generator, z, 0.5, 2.0, zeta=0.0, nu=2.0, rng=np.random.default_rng(0)
    )
    expected = terms.bn + 0.5 * terms.diverse + 2.0 * terms.grad
    assert terms.total.item() == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError, match="rng"):
        final_loss(teacher, quantnet, generator, z, 0.0, 1.0, zeta=0.0, nu=2.0)


# -- finite-difference checks --------------------------------------------------------------------


def _directional_errors(loss_fn, at: np.ndarray, seed: int, count: int = 3) -> list[float]:
    """Relative errors of grad . d against central differences along random directions d."""
    rng = np.random.default_rng(seed)
    leaf = Tensor(at, requires_grad=True)
    (g,) = grad(loss_fn(leaf), [leaf])
    errors = []
    for _ in range(count):
        d = rng.normal(size=at.shape)
        d /= np.linalg.norm(d)
        exact = float(np.sum(g.data * d))
        estimate = finite_diff(lambda s: loss_fn(Tensor(at + s.data[0] * d)), [0.0], step=1e-6)
        errors.append(relative_error(np.array([exact]), estimate))
    return errors


def test_reconstruction_gradient_in_rounding_logits(quantnet, teacher, images):
    fc = quantnet.layers["fc"].quantizer
    start = np.random.default_rng(4).uniform(-2.0, 2.0, size=fc.logits.shape)

    def loss(v: Tensor) -> Tensor:
        fc.logits = v
        return reconstruction_loss(quantnet, teacher, images, hard=False)

    leaf = Tensor(start, requires_grad=True)
    (g,) = grad(loss(leaf), [leaf])
    assert relative_error(g, finite_diff(loss, start, step=1e-5)) < 1e-5


def test_bn_loss_gradient_in_images(teacher, images):
    errors = _directional_errors(lambda x: bn_loss(teacher, x), images, seed=1)
    assert max(errors) < 1e-4


def test_diversity_gradient_in_raw_rows():
    rows = np.random.default_rng(6).normal(size=(4, 6))

    def loss(r: Tensor) -> Tensor:
        unit, _ = ops.normalize_rows(r)
        return diversity_loss(unit, zeta=0.05)

    leaf = Tensor(rows, requires_grad=True)
    (g,) = grad(loss(leaf), [leaf])
    assert np.any(g.data)
    assert relative_error(g, finite_diff(loss, rows, step=1e-6)) < 1e-5


def test_grad_match_gradient_in_embeddings(generator, embeddings, quantnet, teacher):
    eps = np.random.default_rng(2).normal(size=embeddings.shape)
    eps *= 2.0 / np.linalg.norm(eps, axis=1, keepdims=True)

    def loss(z: Tensor) -> Tensor:
        return grad_match_loss(generator, z, quantnet, teacher, eps).value

    assert max(_directional_errors(loss, embeddings, seed=3)) < 1e-4
