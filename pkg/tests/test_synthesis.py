"""Warm-up, generation, the BN-only baseline and synthetic-set persistence."""

import numpy as np
import pytest

from sadag_lab.errors import ConfigError
from sadag_lab.nets import GeneratorNet, LatentBatch
from sadag_lab.synthesis import (
    GenerationConfig,
    emit_dataset,
    generate,
    generate_bn_only,
    load_synth_dataset,
    render,
    synthesize,
    warmup,
)

pytestmark = pytest.mark.unit

IMAGE_SHAPE = (3, 8, 8)
GENERATOR_CHANNELS = (8, 6, 4)


def _config(**overrides) -> GenerationConfig:
    params = dict(num_images=8, batch_gen=4, warmup_iters=2, gen_epochs=1)
    params.update(overrides)
    return GenerationConfig(**params)


def _fresh(seed: int = 21):
    g_net = GeneratorNet.initialize(seed, IMAGE_SHAPE, GENERATOR_CHANNELS)
    return g_net, LatentBatch.sample(8, 4, seed=seed)


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError) as info:
        _config(num_images=1)
    assert info.value.key == "num_images"
    with pytest.raises(ConfigError):
        _config(nu=0.0)
    with pytest.raises(ConfigError):
        _config(lambda2=-1.0)


def test_config_hash_ignores_progress():
    assert _config(progress=True).config_hash() == _config().config_hash()
    assert _config(nu=1.0).config_hash() != _config().config_hash()


def test_zero_warmup_is_a_no_op(teacher):
    g_net, latents = _fresh()
    before = g_net.state_dict()
    z_before = latents.Z.copy()
    warmup(g_net, latents, teacher, _config(warmup_iters=0))
    for name, value in g_net.state_dict().items():
        np.testing.assert_array_equal(value, before[name])
    np.testing.assert_array_equal(latents.Z, z_before)


def test_warmup_records_trace(teacher):
    g_net, latents = _fresh()
    trace = []
    warmup(g_net, latents, teacher, _config(warmup_iters=3), trace=trace)
    assert len(trace) == 3
    assert all(np.isfinite(trace))


def test_synthesize_is_deterministic(teacher, quantnet):
    cfg = _config(nu=0.5)
    first = synthesize(teacher, quantnet, cfg, seed=5)
    second = synthesize(teacher, quantnet, cfg, seed=5)
    np.testing.assert_array_equal(first.images, second.images)
    np.testing.assert_array_equal(first.labels, second.labels)
    assert first.provenance == second.provenance
    assert first.provenance.mode == "sadag"
    assert first.images.shape == (8,) + IMAGE_SHAPE
    assert np.all(np.abs(first.images) <= 1.0)
    assert first.provenance.drift is not None


def test_zero_weights_reproduce_bn_only_baseline(teacher, quantnet):
    cfg = _config(lambda1=0.0, lambda2=0.0, gen_epochs=2)
    g_a, z_a = _fresh()
    g_b, z_b = _fresh()
    full = generate(g_a, z_a, teacher, quantnet, cfg, seed=3)
    baseline = generate_bn_only(g_b, z_b, teacher, cfg, seed=3)
    np.testing.assert_array_equal(full.images, baseline.images)
    assert full.history == baseline.history
    assert full.provenance == baseline.provenance
    assert full.provenance.mode == "bn-only"
    assert set(full.history[0]) == {"epoch", "bn", "final", "fallback_rate", "lr_g", "lr_z"}


def test_generation_history_tracks_terms(teacher, quantnet):
    g_net, latents = _fresh()
    ds = generate(g_net, latents, teacher, quantnet, _config(gen_epochs=2, nu=0.5), seed=1)
    frame = ds.history_frame()
    assert list(frame["epoch"]) == [0, 1]
    for column in ("bn", "diverse", "grad", "final", "fallback_rate"):
        assert frame[column].notna().all()
    assert (frame["fallback_rate"].between(0.0, 1.0)).all()
    np.testing.assert_array_equal(ds.images, render(g_net, latents))


def test_warmup_only_run_is_flagged(teacher):
    ds = synthesize(teacher, None, _config(gen_epochs=0), seed=2)
    assert ds.provenance.warmup_only
    assert ds.provenance.mode == "bn-only"
    assert ds.history == []


def test_emit_and_load_round_trip(teacher, tmp_path):
    ds = synthesize(teacher, None, _config(), seed=4)
    path = emit_dataset(ds, tmp_path / "synth.sadd")
    loaded = load_synth_dataset(path)
    np.testing.assert_array_equal(loaded.images, ds.images.astype(np.float32))
    np.testing.assert_array_equal(loaded.labels, ds.labels)
    assert loaded.provenance == ds.provenance
    assert loaded.history == ds.history
    assert len(loaded.to_labeled(4)) == 8


def test_emit_rejects_empty_path(teacher):
    ds = synthesize(teacher, None, _config(gen_epochs=0, warmup_iters=0), seed=4)
    with pytest.raises(ValueError):
        emit_dataset(ds, "")


@pytest.mark.slow
def test_warmup_lowers_bn_loss_for_most_seeds(teacher):
    lowered = 0
    for seed in range(5):
        g_net = GeneratorNet.initialize(seed, IMAGE_SHAPE, GENERATOR_CHANNELS)
        latents = LatentBatch.sample(8, 8, seed=seed)
        trace = []
        warmup(g_net, latents, teacher, _config(warmup_iters=20, lr_g=0.01), trace=trace)
        lowered += trace[-1] < trace[0]
    assert lowered >= 4


@pytest.mark.slow
def test_gradient_matching_term_drops_below_its_first_epoch(teacher, quantnet):
    dropped = 0
    for seed in range(3):
        g_net, latents = _fresh(seed)
        cfg = _config(gen_epochs=6, lambda1=0.0, nu=0.5, lr_g=0.01)
        ds = generate(g_net, latents, teacher, quantnet, cfg, seed=seed)
        grads = [row["grad"] for row in ds.history]
        dropped += min(grads[1:]) < grads[0]
    assert dropped >= 2
