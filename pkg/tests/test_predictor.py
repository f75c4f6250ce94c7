import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssat.errors import CheckpointError, NonFiniteError, WidthMismatchError
from ssat.predictor import (DTYPE, MAGIC, LatentState, ModelConfig, PredictorModel, PriorSpec,
                            as_function_of_parameters, collate, decode, discriminate, encode,
                            estimate_lat_prior, extract_features, flat_parameters, gradient_check,
                            load_checkpoint, lognormal_pdf, predict, predict_numpy, sample_prior,
                            save_checkpoint)
from ssat.scenario import Agent, Intent, Scene, SemanticLabels, generate_synthetic_scene


def test_features_deterministic_and_fixed_width(small_model, small_cfg):
    scene = generate_synthetic_scene(0, "straight-follow")
    a = extract_features(small_model, scene)
    b = extract_features(small_model, scene)
    assert torch.equal(a, b)
    lone = Scene("lone", (scene.target,), scene.target_id, scene.map)
    crowd = generate_synthetic_scene(4, "free-flow")
    extra = tuple(Agent(100 + k, o.history + 3.0, o.future + 3.0) for k, o in enumerate(crowd.others))
    busy = Scene("busy", crowd.agents + extra, crowd.target_id, crowd.map)
    assert len(busy.agents) >= 5
    for s in (lone, busy):
        assert extract_features(small_model, s).shape == (1, small_cfg.feature_width)


def test_features_locally_lipschitz(small_model):
    scene = generate_synthetic_scene(1, "turn")
    h = scene.target.history.copy()
    h[7] += [1e-6, 0.0]
    base = extract_features(small_model, scene)
    moved = extract_features(small_model, scene.with_target_history(h))
    change = torch.linalg.vector_norm(moved - base).item()
    assert 0 < change < 1e-4


def test_encode_invariants_and_zero_params(small_model, small_cfg):
    x = torch.randn(50, small_cfg.feature_width, dtype=DTYPE) * 5
    z = encode(small_model, x)
    assert torch.all(z.z_lon > 0)
    assert torch.allclose(z.z_lat.sum(-1), torch.ones(50, dtype=DTYPE), atol=1e-6)
    assert z.z_other.shape == (50, small_cfg.latent_other_width)
    with torch.no_grad():
        for p in small_model.encoder.parameters():
            p.zero_()
    z0 = encode(small_model, torch.zeros(1, small_cfg.feature_width, dtype=DTYPE))
    assert torch.allclose(z0.z_lat, torch.full((1, 3), 1 / 3, dtype=DTYPE), atol=1e-15)
    with pytest.raises(WidthMismatchError):
        encode(small_model, torch.zeros(1, small_cfg.feature_width + 1, dtype=DTYPE))


def _latent(cfg, n=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    return LatentState(torch.rand(n, generator=g, dtype=DTYPE) + 0.5,
                       torch.softmax(torch.randn(n, 3, generator=g, dtype=DTYPE), -1),
                       torch.randn(n, cfg.latent_other_width, generator=g, dtype=DTYPE))


def test_decode_shape_determinism_and_fd(small_model, small_cfg):
    z = _latent(small_cfg)
    y = decode(small_model, z)
    assert y.shape == (1, 30, 2)
    assert torch.equal(y, decode(small_model, z))

    def first_coord(lon):
        return decode(small_model, LatentState(lon, z.z_lat, z.z_other))[0, 0, 0]

    assert gradient_check(first_coord, z.z_lon) < 1e-4


def test_predict_is_composition(small_model):
    scene = generate_synthetic_scene(2, "lane-change-left")
    traj, z = predict(small_model, scene)
    ref = decode(small_model, encode(small_model, extract_features(small_model, scene)))
    assert torch.equal(traj, ref)
    arr, intent = predict_numpy(small_model, scene)
    assert np.all(np.isfinite(arr)) and intent in tuple(Intent)
    assert intent == Intent(int(torch.argmax(z.z_lat)))


def test_batched_forward_matches_single(small_model, scenes):
    batch = collate(scenes)
    pred, _ = small_model(batch)
    for i in (0, 7, len(scenes) - 1):
        single, _ = predict(small_model, scenes[i])
        assert torch.allclose(pred[i], single[0], atol=1e-12)


def test_prior_examples():
    spec = PriorSpec()
    lon = sample_prior(spec, "lon", seed=0, n=100_000)
    assert abs(lon.median().item() - math.exp(0.0682)) < 0.02
    assert lognormal_pdf(1.0706) == pytest.approx(0.5759, abs=1e-4)
    lat = sample_prior(spec, "lat", seed=1, n=20)
    assert torch.all(lat.sum(-1) == 1) and torch.all((lat == 0) | (lat == 1))
    assert sample_prior(spec, "other", seed=2, n=3).shape == (3, 16)
    assert torch.equal(sample_prior(spec, "lon", seed=5, n=4), sample_prior(spec, "lon", seed=5, n=4))
    with pytest.raises(ValueError):
        sample_prior(spec, "vertical", seed=0)


def test_lognormal_pdf_matches_closed_form_at_median():
    # at x = e^mu the exponent vanishes: f = 1 / (e^mu sigma sqrt(2 pi))
    expected = 1 / (math.exp(0.0682) * 0.647 * math.sqrt(2 * math.pi))
    assert lognormal_pdf(math.exp(0.0682)) == pytest.approx(expected, rel=1e-12)


def test_prior_spec_validation_and_estimate():
    with pytest.raises(ValueError):
        PriorSpec(lon_sigma=0.0)
    with pytest.raises(ValueError):
        PriorSpec(lat_probs=(0.5, 0.5, 0.5))
    labels = [SemanticLabels(None, Intent.FORWARD)] * 2 + [SemanticLabels(None, Intent.RIGHT)] * 2
    spec = estimate_lat_prior(labels + [SemanticLabels()])
    assert spec.lat_probs == pytest.approx((0.5, 0.0, 0.5))
    assert estimate_lat_prior([SemanticLabels()]).lat_probs == pytest.approx((1 / 3,) * 3)


def test_discriminate_contract(small_model, small_cfg):
    with pytest.raises(WidthMismatchError):
        discriminate(small_model, "lat", torch.zeros(1, 4, dtype=DTYPE))
    big = torch.full((2, 3), 1e6, dtype=DTYPE)
    out = discriminate(small_model, "lat", torch.cat([big, -big]))
    assert torch.all(out > 0) and torch.all(out < 1)
    with torch.no_grad():
        for p in small_model.discriminators.parameters():
            p.zero_()
    for group, width in (("lon", 1), ("lat", 3), ("other", small_cfg.latent_other_width)):
        v = torch.randn(4, width, dtype=DTYPE)
        assert torch.all(discriminate(small_model, group, v) == 0.5)


def test_discriminator_gradient_check(small_model):
    d = small_model.discriminators["lat"]
    f = as_function_of_parameters(d, lambda m: m(torch.tensor([[0.2, 0.5, 0.3]], dtype=DTYPE)).sum())
    assert gradient_check(f, flat_parameters(d)) < 1e-4


def test_gradient_check_examples():
    assert gradient_check(lambda v: (v**2).sum(), torch.tensor([1.0, 2.0])) < 1e-8
    assert gradient_check(lambda v: torch.tensor(3.0, dtype=DTYPE) + 0 * v.sum(), torch.ones(3)) == 0.0
    with pytest.raises(NonFiniteError):
        gradient_check(lambda v: torch.log(v).sum(), torch.tensor([-1.0]))


def test_encoder_gradient_check_random(small_model, small_cfg):
    rng = np.random.default_rng(0)
    for _ in range(3):
        x = torch.as_tensor(rng.normal(size=(1, small_cfg.feature_width)))
        assert gradient_check(lambda v: encode(small_model, v).z_lat[0, 1] + encode(small_model, v).z_lon[0], x) < 1e-4


def test_extractor_gradient_wrt_history(small_model):
    # random points: a history point lying exactly on a lane vertex is a
    # nearest-segment tie where the lane offset has a kink
    scene = generate_synthetic_scene(3, "turn")
    batch = collate([scene])
    f = lambda h: small_model.extractor(batch.with_history(h)).sum()
    g = torch.Generator().manual_seed(0)
    for _ in range(3):
        h = batch.history + 0.3 * torch.randn(batch.history.shape, generator=g, dtype=DTYPE)
        assert gradient_check(f, h) < 1e-4


def test_checkpoint_round_trip(tmp_path, small_model, scenes):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    loaded = load_checkpoint(path)
    batch = collate(scenes)
    assert loaded.cfg == small_model.cfg
    assert torch.equal(loaded(batch)[0], small_model(batch)[0])
    assert path.read_bytes().startswith(MAGIC)


def test_checkpoint_rejects_other_versions(tmp_path, small_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    raw = bytearray(path.read_bytes())
    raw[len(MAGIC)] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="schema version"):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    good = tmp_path / "g.ckpt"
    save_checkpoint(small_model, good)
    path.write_bytes(good.read_bytes()[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_model_seed_reproducible(small_cfg):
    a = flat_parameters(PredictorModel(small_cfg, seed=4))
    b = flat_parameters(PredictorModel(small_cfg, seed=4))
    c = flat_parameters(PredictorModel(small_cfg, seed=5))
    assert torch.equal(a, b) and not torch.equal(a, c)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_simplex_preserved_after_parameter_update(seed):
    cfg = ModelConfig(feature_width=8, latent_other_width=2, encoder_hidden=6)
    model = PredictorModel(cfg, seed=seed % 1000)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.encoder.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=DTYPE) * 3)
    z = encode(model, torch.randn(5, 8, generator=g, dtype=DTYPE))
    assert torch.all(z.z_lat >= 0)
    assert torch.allclose(z.z_lat.sum(-1), torch.ones(5, dtype=DTYPE), atol=1e-6)
    assert torch.all(z.z_lon > 0)
