import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssat.attack import AttackConfig, AttackType
from ssat.errors import LengthMismatchError, StructureMismatchError
from ssat.predictor import (DTYPE, LatentState, PredictorModel, PriorSpec, as_function_of_parameters, collate,
                            flat_parameters, gradient_check)
from ssat.scenario import Intent, SemanticLabels, generate_dataset, generate_synthetic_scene, semantic_labels
from ssat.training import (TrainConfig, Trainer, adversarial_training_step, loss_disc, loss_reg, loss_semi,
                           loss_traj, mixup_histories, mixup_scene, parameter_digest, prior_samples, train)

from conftest import SMALL


def latent(lon, lat, other_width=4):
    return LatentState(torch.tensor([lon], dtype=DTYPE), torch.tensor([lat], dtype=DTYPE),
                       torch.zeros(1, other_width, dtype=DTYPE))


def labeled_batch(scenes):
    return collate(scenes, [semantic_labels(s) for s in scenes])


def set_disc_output(model, prob):
    # zero weights and a bias equal to the logit fix every discriminator output
    with torch.no_grad():
        for d in model.discriminators.values():
            for p in d.parameters():
                p.zero_()
            d.net[-1].bias.fill_(math.log(prob / (1 - prob)))


# ---------------------------------------------------------------------------
# losses

def test_config_validation():
    for bad in (dict(lambda_semi=-1), dict(mixup_lambda=1.5), dict(success_threshold=0), dict(optimizer="rms"),
                dict(mixup_mode="x"), dict(batch_size=0), dict(gate_error="fde")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_loss_traj_examples():
    t = torch.zeros(30, 2, dtype=DTYPE)
    assert loss_traj(t, t).item() == 0.0
    one = torch.zeros(1, 1, 2, dtype=DTYPE)
    assert loss_traj(one + torch.tensor([0.5, 0.5], dtype=DTYPE), one).item() == pytest.approx(0.125)
    assert loss_traj(one + torch.tensor([2.0, 2.0], dtype=DTYPE), one).item() == pytest.approx(1.5)
    # mean over 2F coordinates
    p = t.clone()
    p[0, 0] = 2.0
    assert loss_traj(p, t).item() == pytest.approx(1.5 / 60)
    with pytest.raises(LengthMismatchError):
        loss_traj(torch.zeros(29, 2), t)


def test_loss_semi_examples():
    lab = SemanticLabels(1.0, Intent.FORWARD)
    assert loss_semi(latent(1.0, [1.0, 0.0, 0.0]), lab).item() == pytest.approx(0.0, abs=1e-15)
    assert loss_semi(latent(1.0, [1 / 3] * 3), lab).item() == pytest.approx(math.log(3), abs=1e-12)
    assert loss_semi(latent(2.0, [0.5, 0.25, 0.25]), lab).item() == pytest.approx(-math.log(0.5) + 1, abs=1e-12)
    assert loss_semi(latent(2.0, [0.5, 0.25, 0.25]), SemanticLabels()).item() == 0.0
    # log argument clamp keeps the loss finite
    assert loss_semi(latent(1.0, [0.0, 1.0, 0.0]), lab).item() == pytest.approx(-math.log(1e-7))


def test_loss_reg_examples():
    model = PredictorModel(SMALL, seed=0)
    x = torch.randn(4, SMALL.feature_width, dtype=DTYPE)
    set_disc_output(model, 0.5)
    assert loss_reg(model, x).item() == pytest.approx(math.log(0.5), abs=1e-12)
    with torch.no_grad():
        for d in model.discriminators.values():
            d.net[-1].bias.fill_(60.0)
    val = loss_reg(model, x).item()
    assert math.isfinite(val) and val == pytest.approx(math.log(1e-7), abs=1e-6)


def test_loss_disc_examples():
    model = PredictorModel(SMALL, seed=0)
    x = torch.randn(4, SMALL.feature_width, dtype=DTYPE)
    samples = prior_samples(PriorSpec(other_width=SMALL.latent_other_width), 4, seed=0)
    set_disc_output(model, 0.5)
    assert loss_disc(model, x, samples).item() == pytest.approx(6 * math.log(0.5), abs=1e-12)
    assert loss_disc(model, x, samples).item() == pytest.approx(-4.159, abs=1e-3)


def test_loss_disc_at_clamped_optimum():
    # D(real) and 1 - D(fake) both at the clamp ceiling: value ~ 6 log(1 - 1e-7) ~ 0
    model = PredictorModel(SMALL, seed=0)
    lat_d = model.discriminators
    with torch.no_grad():
        for d in lat_d.values():
            for p in d.parameters():
                p.zero_()
    real = {"lon": torch.ones(2, 1, dtype=DTYPE), "lat": torch.ones(2, 3, dtype=DTYPE),
            "other": torch.ones(2, SMALL.latent_other_width, dtype=DTYPE)}
    fake = LatentState(-torch.ones(2, dtype=DTYPE), -torch.ones(2, 3, dtype=DTYPE) / 3,
                       -torch.ones(2, SMALL.latent_other_width, dtype=DTYPE))
    with torch.no_grad():
        for d in lat_d.values():
            d.net[0].weight.fill_(1.0)
            d.net[2].weight.fill_(1e3)
    val = loss_disc(model, fake, real).item()
    assert val == pytest.approx(6 * math.log(1 - 1e-7), abs=1e-9)


def _param_fn(model, sub, loss):
    return as_function_of_parameters(model, lambda m: loss(m, sub))


@pytest.mark.parametrize("name", ["traj", "semi", "reg", "disc"])
def test_losses_pass_gradient_check(name):
    model = PredictorModel(SMALL, seed=1)
    scenes = generate_dataset(4, 9)
    batch = labeled_batch(scenes)
    samples = prior_samples(PriorSpec(other_width=SMALL.latent_other_width), 4, seed=3)
    losses = {
        "traj": lambda m, b: loss_traj(m(b)[0], b.future),
        "semi": lambda m, b: loss_semi(m(b)[1], (b.headway, b.intent)),
        "reg": lambda m, b: loss_reg(m, m(b)[1]),
    }
    if name == "disc":
        # encoder outputs are constants for this loss; differentiate the discriminators
        z = model(batch)[1].detach()
        f = as_function_of_parameters(model.discriminators, lambda d: loss_disc(model, z, samples))
        theta = flat_parameters(model.discriminators)
    else:
        f = _param_fn(model, batch, losses[name])
        theta = flat_parameters(model)
    coords = np.random.default_rng(0).choice(theta.numel(), 40, replace=False).tolist()
    assert gradient_check(f, theta, coords=coords) < 1e-4


# ---------------------------------------------------------------------------
# mixup

def test_mixup_scene_endpoints_and_weight():
    benign = generate_synthetic_scene(0, "lane-change-left")
    adv = benign.with_target_history(benign.target.history + [0.5, -0.5])
    assert mixup_scene(benign, adv, 1.0) == adv
    assert mixup_scene(benign, adv, 0.0) == benign
    mixed = mixup_scene(benign, adv, 2 / 3)
    np.testing.assert_allclose(mixed.target.history, benign.target.history + np.array([1 / 3, -1 / 3]), atol=1e-12)
    assert mixed.others == benign.others
    np.testing.assert_array_equal(mixed.target.future, benign.target.future)


def test_mixup_scene_structure_errors():
    a = generate_synthetic_scene(0, "straight-follow")
    b = generate_synthetic_scene(1, "straight-follow")
    with pytest.raises(StructureMismatchError):
        mixup_scene(a, b, 0.5)
    with pytest.raises(ValueError):
        mixup_scene(a, a, 1.5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1))
def test_mixup_histories_convex(lam):
    b = torch.randn(3, 20, 2, dtype=DTYPE)
    a = torch.randn(3, 20, 2, dtype=DTYPE)
    m = mixup_histories(b, a, lam)
    assert torch.allclose(m, lam * a + (1 - lam) * b, atol=1e-12)
    lo, hi = torch.minimum(a, b), torch.maximum(a, b)
    assert torch.all(m >= lo - 1e-12) and torch.all(m <= hi + 1e-12)


# ---------------------------------------------------------------------------
# gated updates

def test_failed_attack_leaves_parameters_bit_identical():
    model = PredictorModel(SMALL, seed=2)
    scene = generate_synthetic_scene(0, "turn")
    before = parameter_digest(model)
    _, rec = adversarial_training_step(model, scene, AttackType.ade(), TrainConfig(success_threshold=1e6),
                                       AttackConfig(iterations=3))
    assert not rec.updated and rec.n_success == 0
    assert parameter_digest(model) == before


def test_successful_attack_updates():
    model = PredictorModel(SMALL, seed=2)
    scene = generate_synthetic_scene(0, "turn")
    before = parameter_digest(model)
    _, rec = adversarial_training_step(model, scene, AttackType.ade(), TrainConfig(success_threshold=1e-6),
                                       AttackConfig(iterations=3))
    assert rec.updated and rec.n_success == 1
    assert parameter_digest(model) != before


def test_flip_weights_recorded():
    cfg = TrainConfig(success_threshold=1e-6, lambda_semi=0.7, lambda_semi_boost=5.0)
    scenes = [generate_synthetic_scene(s, t) for s in range(4) for t in ("lane-change-left", "lane-change-right",
                                                                        "straight-follow")]
    model = PredictorModel(SMALL, seed=0)
    rec = Trainer(model, cfg).adversarial_step(labeled_batch(scenes), AttackType.lateral(), AttackConfig(iterations=5))
    assert rec.n_flipped > 0 and rec.n_flipped < rec.n_success
    success_flips = [f for f, s in zip(rec.flipped, rec.success) if s]
    for w, f in zip(rec.semi_weights, success_flips):
        assert w == pytest.approx(0.7 * 5.0 if f else 0.7)


def test_flip_reference_falls_back_to_benign_argmax():
    cfg = TrainConfig(success_threshold=1e-6)
    scene = generate_synthetic_scene(0, "free-flow")
    model = PredictorModel(SMALL, seed=0)
    batch = collate([scene])  # unlabeled: intent -1
    rec = Trainer(model, cfg).adversarial_step(batch, AttackType.ade(), AttackConfig(iterations=0))
    # with no perturbation the adversarial argmax equals the benign one
    assert rec.flipped == [False]


def test_loss_decomposition():
    cfg = TrainConfig(lambda_traj=0.8, lambda_semi=1.3, lambda_reg=0.2)
    model = PredictorModel(SMALL, seed=4)
    batch = labeled_batch(generate_dataset(6, 3))
    trainer = Trainer(model, cfg)
    n = len(batch)
    w = torch.full((n,), cfg.lambda_semi, dtype=DTYPE)
    gen, _, _, z, pred = trainer._losses(batch, batch.history, w, torch.ones(n, dtype=torch.bool), [0])
    manual = (cfg.lambda_traj * loss_traj(pred, batch.future) + cfg.lambda_semi * loss_semi(z, (batch.headway,
              batch.intent)) + cfg.lambda_reg * loss_reg(model, z))
    assert abs(gen.item() - manual.item()) < 1e-12


def test_generator_and_discriminator_separation():
    model = PredictorModel(SMALL, seed=5)
    batch = labeled_batch(generate_dataset(4, 2))
    trainer = Trainer(model, TrainConfig())
    disc_before = [p.clone() for p in model.discriminator_parameters()]
    gen_before = [p.clone() for p in model.generator_parameters()]
    _, z = model(batch)
    assert trainer._apply(loss_reg(model, z), None)
    assert all(torch.equal(a, b) for a, b in zip(disc_before, model.discriminator_parameters()))
    assert not all(torch.equal(a, b) for a, b in zip(gen_before, model.generator_parameters()))

    gen_before = [p.clone() for p in model.generator_parameters()]
    _, z = model(batch)
    samples = prior_samples(trainer.prior, len(batch), 0)
    zero = 0.0 * loss_traj(model(batch)[0], batch.future)
    assert trainer._apply(zero, loss_disc(model, z, samples))
    assert all(torch.equal(a, b) for a, b in zip(gen_before, model.generator_parameters()))
    grads = torch.autograd.grad(loss_disc(model, z, samples), list(model.generator_parameters()), allow_unused=True)
    assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)


def test_non_finite_loss_aborts_and_restores():
    model = PredictorModel(SMALL, seed=5)
    trainer = Trainer(model, TrainConfig())
    before = parameter_digest(model)
    bad = flat_parameters(model).sum() * 0 + torch.tensor(float("nan"), dtype=DTYPE)
    assert trainer._apply(bad, None) is False
    assert parameter_digest(model) == before


def test_mixup_term_endpoints():
    # at lambda = 1 the mixup term is the adversarial trajectory loss; at 0 the benign one
    batch = labeled_batch(generate_dataset(4, 6))
    for lam in (0.0, 1.0):
        cfg = TrainConfig(mixup_enabled=True, mixup_lambda=lam, success_threshold=1e-6)
        model = PredictorModel(SMALL, seed=0)
        atk = AttackConfig(iterations=4)
        rec = Trainer(model, cfg).adversarial_step(batch, AttackType.ade(), atk)
        ref_model = PredictorModel(SMALL, seed=0)
        from ssat.attack import pgd_attack_batch

        adv = pgd_attack_batch(ref_model, batch, AttackType.ade(), atk).adv_history
        hist = adv if lam == 1.0 else batch.history
        expected = loss_traj(ref_model(batch.with_history(hist))[0], batch.future).item()
        assert rec.losses["mixup_traj"] == pytest.approx(expected, abs=1e-12)
        if lam == 1.0:
            assert rec.losses["mixup_traj"] == pytest.approx(rec.losses["traj"], abs=1e-12)


def test_beta_mixup_weights_deterministic():
    cfg = TrainConfig(mixup_enabled=True, mixup_mode="beta", seed=3)
    t1 = Trainer(PredictorModel(SMALL), cfg)._mixup_weights(50)
    t2 = Trainer(PredictorModel(SMALL), cfg)._mixup_weights(50)
    assert torch.equal(t1, t2)
    assert torch.all((t1 >= 0) & (t1 <= 1))


# ---------------------------------------------------------------------------
# full loop

def test_zero_adversarial_epochs_keeps_pretrained_model():
    scenes = generate_dataset(16, 4)
    cfg = TrainConfig(pretrain_epochs=1, epochs=0, batch_size=8)
    model, _ = train(PredictorModel(SMALL, seed=0), scenes, AttackType.ade(), cfg, AttackConfig(iterations=2))
    twin = copy.deepcopy(model)
    train(twin, scenes, AttackType.ade(), cfg, AttackConfig(iterations=2), pretrain=False)
    assert parameter_digest(twin) == parameter_digest(model)


def test_train_is_deterministic_and_reports():
    scenes = generate_dataset(12, 5)
    cfg = TrainConfig(pretrain_epochs=1, epochs=1, batch_size=4, success_threshold=0.5, seed=2)
    atk = AttackConfig(iterations=2)
    monitor = labeled_batch(generate_dataset(4, 8))
    runs = [train(PredictorModel(SMALL, seed=1), scenes, AttackType.ade(), cfg, atk, monitor=monitor,
                  monitor_attacks=(AttackType.ade(),)) for _ in range(2)]
    (m1, r1), (m2, r2) = runs
    assert parameter_digest(m1) == parameter_digest(m2)
    assert r1.epochs == r2.epochs
    assert [e.phase for e in r1.epochs] == ["benign", "adversarial"]
    for e in r1.epochs:
        assert math.isfinite(e.benign_ade) and math.isfinite(e.attacked_ade["ade"])


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train(PredictorModel(SMALL), [], AttackType.ade(), TrainConfig(), AttackConfig())


def test_audit_digests_follow_gate():
    scenes = generate_dataset(10, 7)
    cfg = TrainConfig(pretrain_epochs=0, epochs=1, batch_size=1, audit=True, success_threshold=3.0)
    _, report = train(PredictorModel(SMALL, seed=0), scenes, AttackType.ade(), cfg, AttackConfig(iterations=3))
    for step in report.steps:
        if step.n_success == 0:
            assert step.digest_before == step.digest_after
        else:
            assert step.updated and step.digest_before != step.digest_after
