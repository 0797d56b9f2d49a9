"""Weight and activation quantizers and the fake-quantized network."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sadag_lab.autodiff import Tensor, grad, ops
from sadag_lab.errors import DegenerateRangeError, ShapeError
from sadag_lab.quant import (
    ActivationQuantizer,
    BetaSchedule,
    WeightQuantizer,
    compute_scale,
    default_bit_map,
    init_quantnet,
    quantize_adaround,
    quantize_nearest,
    round_regularizer,
)

pytestmark = pytest.mark.unit


def _two_bit(logits=None) -> WeightQuantizer:
    return WeightQuantizer(bits=2, scale=0.5, n=0, p=3, zero_point=0, logits=logits)


def test_compute_scale_examples():
    s, n, p = compute_scale(np.array([-1.0, 0.5, 2.0]), 2)
    assert (s, n, p) == (1.0, 0, 3)
    assert compute_scale(np.array([0.0, 1.0]), 8)[0] == pytest.approx(1 / 255)
    for a in (0.1, 1.0, 7.5):
        assert compute_scale(np.array([-a, a]), 2)[0] == pytest.approx(2 * a / 3)


def test_compute_scale_rejects_constant_tensor():
    with pytest.raises(DegenerateRangeError):
        compute_scale(np.full(5, 0.3), 4)


def test_from_weight_names_the_layer():
    with pytest.raises(DegenerateRangeError, match="conv1"):
        WeightQuantizer.from_weight(np.ones((2, 2)), 4, name="conv1")


def test_quantize_nearest_examples():
    q = _two_bit()
    assert quantize_nearest(np.array([0.6]), q).item() == 0.5
    assert quantize_nearest(np.array([0.0]), q).item() == 0.0
    assert quantize_nearest(np.array([2.0]), q).item() == 1.5


@settings(max_examples=40, deadline=None)
@given(
    w=arrays(np.float64, st.integers(2, 20), elements=st.floats(-4, 4, allow_subnormal=False)),
    bits=st.integers(2, 8),
)
def test_quantize_nearest_is_idempotent_and_on_grid(w, bits):
    if np.ptp(w) < 1e-3:
        w = np.append(w, w[0] + 1.0)
    q = WeightQuantizer.from_weight(w, bits)
    once = quantize_nearest(w, q).data
    twice = quantize_nearest(once, q).data
    np.testing.assert_allclose(twice, once, atol=1e-12)
    grid = q.grid()
    assert np.all(np.min(np.abs(once[:, None] - grid[None, :]), axis=1) < 1e-9)


def test_adaround_gradient_is_scaled_rectified_sigmoid_slope():
    v = np.array([-1.0, 0.5, 2.0])
    q = _two_bit(Tensor(v, requires_grad=True))
    w = Tensor(np.array([0.6, 0.7, 0.3]), requires_grad=True)
    g_v, g_w = grad(ops.sum(quantize_adaround(w, q)), [q.logits, w])
    sig = 1.0 / (1.0 + np.exp(-v))
    np.testing.assert_allclose(g_v.data, 0.5 * 1.2 * sig * (1.0 - sig), rtol=1e-12)
    np.testing.assert_allclose(g_w.data, np.ones(3))


@settings(max_examples=40, deadline=None)
@given(
    w=arrays(np.float64, st.integers(2, 30), elements=st.floats(-4, 4, allow_subnormal=False)),
    bits=st.integers(2, 8),
)
def test_quantize_nearest_is_monotone(w, bits):
    if np.ptp(w) < 1e-3:
        w = np.append(w, w[0] + 1.0)
    q = WeightQuantizer.from_weight(w, bits)
    out = quantize_nearest(np.sort(w), q).data
    assert np.all(np.diff(out) >= 0)


def test_adaround_branches():
    w = np.array([0.6, 1.2, -0.3, 2.0])
    up = quantize_adaround(w, _two_bit(Tensor(np.full(4, 50.0))))
    down = quantize_adaround(w, _two_bit(Tensor(np.full(4, -50.0))))
    np.testing.assert_allclose(up.data, 0.5 * np.clip(np.floor(w / 0.5) + 1, 0, 3))
    np.testing.assert_allclose(down.data, 0.5 * np.clip(np.floor(w / 0.5), 0, 3))


def test_round_regularizer_examples():
    settled = _two_bit(Tensor(np.array([50.0, -50.0, 50.0])))
    assert round_regularizer(settled, beta=20).item() == 0.0
    undecided = _two_bit(Tensor(np.array([0.0])))
    assert round_regularizer(undecided, beta=2).item() == pytest.approx(1.0)


def test_round_regularizer_rejects_small_exponent():
    with pytest.raises(ValueError):
        round_regularizer(_two_bit(Tensor(np.zeros(2))), beta=1.5)


def test_beta_schedule_anneals_linearly():
    schedule = BetaSchedule(total=5)
    assert [schedule(i) for i in range(5)] == pytest.approx([20.0, 15.5, 11.0, 6.5, 2.0])
    assert BetaSchedule(total=1)(0) == 2.0


def test_activation_quantizer_keeps_first_range():
    aq = ActivationQuantizer(bits=2, name="act0")
    aq.observe(np.array([0.0, 3.0]))
    aq.observe(np.array([-10.0, 10.0]))
    assert (aq.lo, aq.hi) == (0.0, 3.0)
    out = aq(Tensor(np.array([0.4, 1.6, 5.0, -1.0])))
    np.testing.assert_allclose(out.data, [0.0, 2.0, 3.0, 0.0])


def test_trainable_range_rounds_straight_through():
    aq = ActivationQuantizer(bits=2, lo=0.0, hi=3.0, name="act0")
    lo, hi = aq.range_params()
    out = aq(Tensor(np.array([0.4, 1.6, 5.0, -1.0])))
    np.testing.assert_allclose(out.data, [0.0, 2.0, 3.0, 0.0], atol=1e-12)
    g_lo, g_hi = grad(ops.sum(out), [lo, hi])
    assert g_hi.item() == pytest.approx(1.0)
    assert g_lo.item() == pytest.approx(1.0)


def test_sync_keeps_range_open_and_releases():
    aq = ActivationQuantizer(bits=4, lo=0.0, hi=1.0, name="act1")
    lo, hi = aq.range_params()
    hi.data = np.array(-0.5)
    aq.sync()
    assert aq.hi == pytest.approx(aq.lo + 1e-6)
    assert aq.learned is not None
    aq.sync(release=True)
    assert aq.learned is None
    assert aq.range_params()[1].item() == pytest.approx(1e-6)


def test_frozen_codes_reject_a_moved_weight(quantnet):
    quantnet.freeze()
    layer = quantnet.layers["conv1"]
    np.testing.assert_allclose(
        layer.effective_weight().data, layer.quantizer.dequantize_codes(), atol=1e-12
    )
    layer.weight = Tensor(layer.weight.data + 3.0 * layer.quantizer.scale)
    with pytest.raises(ValueError, match="freeze again"):
        layer.effective_weight()


def test_init_matches_nearest_rounding(quantnet):
    for layer in quantnet.layers.values():
        np.testing.assert_allclose(
            layer.effective_weight(hard=True).data, layer.nearest_weight().data, atol=1e-12
        )


def test_full_precision_sentinel_matches_teacher(teacher, images):
    bits_w, bits_a = default_bit_map(32, 32)
    q = init_quantnet(teacher, bits_w, bits_a)
    x = Tensor(images)
    expected = teacher.forward(x).activations
    for got, want in zip(q.forward(x).activations, expected):
        np.testing.assert_allclose(got.data, want.data, rtol=0, atol=1e-12)
    assert q.quantizers() == []


def test_two_bit_layers_have_at_most_four_values(teacher):
    q = init_quantnet(teacher, {"conv1": 2, "conv2": 2}, {})
    for name in ("conv1", "conv2"):
        assert np.unique(q.layers[name].effective_weight().data).size <= 4


def test_default_bit_map_keeps_edges_at_eight_bits():
    bits_w, bits_a = default_bit_map(2, 4)
    assert bits_w == {"conv0": 8, "conv1": 2, "conv2": 2, "fc": 8}
    assert bits_a == {"act0": 4, "act1": 4, "fc_in": 8}


def test_init_rejects_unknown_layer(teacher):
    with pytest.raises(ShapeError, match="conv9"):
        init_quantnet(teacher, {"conv9": 4}, {})


def test_frozen_codes_stay_on_grid(quantnet):
    quantnet.freeze()
    for layer in quantnet.layers.values():
        q = layer.quantizer
        if not q.enabled:
            continue
        assert q.codes.min() >= q.n and q.codes.max() <= q.p
        np.testing.assert_allclose(q.dequantize_codes(), layer.effective_weight().data, atol=1e-12)


def test_state_dict_round_trip_and_clone(quantnet_acts, images):
    q = quantnet_acts
    q.freeze()
    twin = init_quantnet(q.teacher, q.bits_w, q.bits_a).load_state_dict(q.state_dict())
    x = Tensor(images)
    np.testing.assert_array_equal(twin.forward(x).logits.data, q.forward(x).logits.data)
    clone = q.clone()
    clone.rounding_logits()[0].data = clone.rounding_logits()[0].data + 1.0
    assert not np.array_equal(clone.rounding_logits()[0].data, q.rounding_logits()[0].data)
