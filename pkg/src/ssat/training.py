"""Loss stack and the gated adversarial training loop.

Generator side (extractor, encoder, decoder) minimizes
``lambda_traj * traj + w_semi * semi + lambda_reg * reg``; discriminators
ascend their log-likelihood on prior samples versus encoder outputs.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .attack import ADE, AttackConfig, AttackType, attack_objective, pgd_attack_batch
from .errors import LengthMismatchError, NonFiniteError, StructureMismatchError
from .evaluation import evaluate
from .predictor import (
    D_CLAMP, DTYPE, GROUPS, LatentState, PredictorModel, PriorSpec, SceneBatch, collate, discriminate,
    sample_prior,
)
from .scenario import Scene, SemanticLabels, semantic_labels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    success_threshold: float = 2.0
    lambda_traj: float = 1.0
    lambda_semi: float = 1.0
    lambda_reg: float = 0.1
    lambda_semi_boost: float = 5.0
    mixup_enabled: bool = False
    mixup_lambda: float = 2 / 3
    mixup_mode: str = "fixed"  # or "beta": per-sample weight ~ Beta(2, 1)
    learning_rate: float = 0.05
    pretrain_learning_rate: float | None = None
    disc_learning_rate: float | None = None
    optimizer: str = "sgd"
    pretrain_epochs: int = 5
    epochs: int = 5
    batch_size: int = 32
    gate_error: str = "ade"  # or "attack": gate on the attack's own objective
    seed: int = 0
    audit: bool = False

    def __post_init__(self):
        for name in ("lambda_traj", "lambda_semi", "lambda_reg", "lambda_semi_boost"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.mixup_lambda <= 1.0:
            raise ValueError("mixup_lambda must lie in [0, 1]")
        if not self.success_threshold > 0:
            raise ValueError("success_threshold must be positive")
        if self.mixup_mode not in ("fixed", "beta"):
            raise ValueError("mixup_mode must be 'fixed' or 'beta'")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.gate_error not in ("ade", "attack"):
            raise ValueError("gate_error must be 'ade' or 'attack'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# losses (per-sample vectors; callers reduce)

def loss_traj(pred, truth, reduce: bool = True) -> torch.Tensor:
    """Smooth-L1 over every coordinate, averaged over the 2F coordinates."""
    pred = torch.as_tensor(pred, dtype=DTYPE)
    truth = torch.as_tensor(truth, dtype=DTYPE)
    if pred.shape != truth.shape:
        raise LengthMismatchError(f"prediction {tuple(pred.shape)} and truth {tuple(truth.shape)} differ")
    per = F.smooth_l1_loss(pred, truth, reduction="none", beta=1.0)
    per = per.reshape(*per.shape[:-2], -1).mean(-1)
    return per.mean() if reduce else per


def _label_tensors(labels) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(labels, SemanticLabels):
        labels = [labels]
    if isinstance(labels, (list, tuple)) and all(isinstance(l, SemanticLabels) for l in labels):
        headway = torch.tensor([math.nan if l.headway_s is None else l.headway_s for l in labels], dtype=DTYPE)
        intent = torch.tensor([-1 if l.lateral_intent is None else int(l.lateral_intent) for l in labels])
        return headway, intent
    return labels  # already (headway, intent) tensors


def loss_semi(z: LatentState, labels, reduce: bool = True) -> torch.Tensor:
    """Cross-entropy of z_lat against the intent label plus squared headway error.

    Absent labels contribute nothing; ``labels`` is a SemanticLabels, a list of
    them, or a ``(headway, intent)`` tensor pair with NaN / -1 for absent.
    """
    headway, intent = _label_tensors(labels)
    z_lat = z.z_lat.reshape(-1, z.z_lat.shape[-1])
    z_lon = z.z_lon.reshape(-1)
    has_int = intent >= 0
    logp = torch.log(z_lat.clamp_min(D_CLAMP))
    ce = -torch.gather(logp, 1, intent.clamp_min(0)[:, None]).squeeze(1)
    ce = torch.where(has_int, ce, torch.zeros_like(ce))
    has_hw = ~torch.isnan(headway)
    sq = torch.where(has_hw, (torch.nan_to_num(headway) - z_lon) ** 2, torch.zeros_like(z_lon))
    per = ce + sq
    return per.mean() if reduce else per


def loss_reg(model: PredictorModel, x_or_z, reduce: bool = True) -> torch.Tensor:
    """Mean over latent groups of log(1 - D_i(G_i(x))); the encoder minimizes it."""
    z = x_or_z if isinstance(x_or_z, LatentState) else model.encoder(x_or_z)
    terms = [torch.log(1.0 - discriminate(model, g, z.group(g))) for g in GROUPS]
    per = torch.stack(terms, dim=0).mean(0)
    return per.mean() if reduce else per


def loss_disc(model: PredictorModel, x_or_z, samples: dict[str, torch.Tensor], reduce: bool = True) -> torch.Tensor:
    """Sum over groups of log D_i(s_i) + log(1 - D_i(G_i(x))); discriminators ascend it.

    Encoder outputs are detached, so only discriminator parameters receive
    gradient from this loss.
    """
    z = x_or_z if isinstance(x_or_z, LatentState) else model.encoder(x_or_z)
    z = z.detach()
    total = 0.0
    for g in GROUPS:
        real = discriminate(model, g, samples[g])
        fake = discriminate(model, g, z.group(g))
        total = total + torch.log(real) + torch.log(1.0 - fake)
    return total.mean() if reduce else total


def prior_samples(spec: PriorSpec, n: int, seed) -> dict[str, torch.Tensor]:
    return {g: sample_prior(spec, g, [*np.atleast_1d(seed).tolist(), i], n) for i, g in enumerate(GROUPS)}


def mixup_scene(benign: Scene, adversarial: Scene, lam: float) -> Scene:
    """Blend target histories: ``lam * adversarial + (1 - lam) * benign``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if benign.scene_id != adversarial.scene_id or benign.target_id != adversarial.target_id:
        raise StructureMismatchError("scenes differ in id or target")
    if [a.agent_id for a in benign.agents] != [a.agent_id for a in adversarial.agents]:
        raise StructureMismatchError("scenes have different agent sets")
    for a, b in zip(benign.agents, adversarial.agents):
        if not np.array_equal(a.future, b.future):
            raise StructureMismatchError(f"agent {a.agent_id} future differs between scenes")
        if a.agent_id != benign.target_id and not np.array_equal(a.history, b.history):
            raise StructureMismatchError(f"non-target agent {a.agent_id} history differs")
    if lam == 1.0:
        return adversarial
    if lam == 0.0:
        return benign
    mixed = lam * adversarial.target.history + (1.0 - lam) * benign.target.history
    return benign.with_target_history(mixed)


def mixup_histories(benign: torch.Tensor, adversarial: torch.Tensor, lam) -> torch.Tensor:
    lam = torch.as_tensor(lam, dtype=DTYPE)
    if lam.dim() == 1:
        lam = lam[:, None, None]
    return lam * adversarial + (1.0 - lam) * benign


# ---------------------------------------------------------------------------
# training

@dataclass
class StepRecord:
    n_samples: int
    n_success: int = 0
    n_flipped: int = 0
    updated: bool = False
    aborted: bool = False
    success: list[bool] = field(default_factory=list)
    flipped: list[bool] = field(default_factory=list)
    semi_weights: list[float] = field(default_factory=list)
    losses: dict[str, float] = field(default_factory=dict)
    digest_before: str | None = None
    digest_after: str | None = None


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    loss_traj: float
    loss_semi: float
    loss_reg: float
    loss_disc: float
    n_samples: int
    n_success: int
    n_flipped: int
    n_updates: int
    n_aborted: int
    benign_ade: float = float("nan")
    attacked_ade: dict[str, float] = field(default_factory=dict)
    intent_error: float = float("nan")


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    flagged: list[str] = field(default_factory=list)


def parameter_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Owns the optimizers and applies benign and adversarial updates."""

    def __init__(self, model: PredictorModel, cfg: TrainConfig, prior: PriorSpec | None = None,
                 learning_rate: float | None = None):
        self.model = model
        self.cfg = cfg
        self.prior = prior or PriorSpec(other_width=model.cfg.latent_other_width)
        self.gen_params = list(model.generator_parameters())
        self.disc_params = list(model.discriminator_parameters())
        lr = cfg.learning_rate if learning_rate is None else learning_rate
        disc_lr = cfg.disc_learning_rate if cfg.disc_learning_rate is not None else lr
        make = torch.optim.Adam if cfg.optimizer == "adam" else torch.optim.SGD
        self.gen_opt = make(self.gen_params, lr=lr)
        self.disc_opt = make(self.disc_params, lr=disc_lr)
        self.step_count = 0

    # -- core update ---------------------------------------------------------
    def _apply(self, gen_loss: torch.Tensor, disc_obj: torch.Tensor | None) -> bool:
        """Apply one update; returns False (and leaves parameters alone) on non-finite values."""
        if not torch.isfinite(gen_loss) or (disc_obj is not None and not torch.isfinite(disc_obj)):
            return False
        gen_grads = torch.autograd.grad(gen_loss, self.gen_params, allow_unused=True, retain_graph=True)
        disc_grads = None
        if disc_obj is not None:
            disc_grads = torch.autograd.grad(-disc_obj, self.disc_params, allow_unused=True)
        grads = list(gen_grads) + list(disc_grads or [])
        if any(g is not None and not torch.isfinite(g).all() for g in grads):
            return False
        snapshot = copy.deepcopy(self.model.state_dict())
        for p, g in zip(self.gen_params, gen_grads):
            p.grad = torch.zeros_like(p) if g is None else g
        self.gen_opt.step()
        self.gen_opt.zero_grad(set_to_none=True)
        if disc_grads is not None:
            for p, g in zip(self.disc_params, disc_grads):
                p.grad = torch.zeros_like(p) if g is None else g
            self.disc_opt.step()
            self.disc_opt.zero_grad(set_to_none=True)
        if not all(torch.isfinite(p).all() for p in self.model.parameters()):
            self.model.load_state_dict(snapshot)
            return False
        return True

    def _losses(self, batch: SceneBatch, history: torch.Tensor, semi_w: torch.Tensor, mask: torch.Tensor,
                seed) -> tuple[torch.Tensor, torch.Tensor | None, dict[str, float], LatentState, torch.Tensor]:
        """Weighted generator loss and discriminator objective over ``mask``-selected samples."""
        cfg = self.cfg
        sub = batch.with_history(history).index(mask.nonzero().squeeze(1))
        pred, z = self.model(sub)
        traj = loss_traj(pred, sub.future, reduce=False)
        semi = loss_semi(z, (sub.headway, sub.intent), reduce=False)
        w = semi_w[mask]
        gen = cfg.lambda_traj * traj + w * semi
        use_reg = cfg.lambda_reg > 0
        reg = loss_reg(self.model, z, reduce=False) if use_reg else torch.zeros_like(traj)
        gen = (gen + cfg.lambda_reg * reg).mean()
        disc = None
        if use_reg:
            samples = prior_samples(self.prior, len(sub), seed)
            disc = loss_disc(self.model, z, samples)
        parts = {
            "traj": traj.mean().item(), "semi": semi.mean().item(), "reg": reg.mean().item(),
            "disc": disc.item() if disc is not None else 0.0,
        }
        return gen, disc, parts, z, pred

    def benign_step(self, batch: SceneBatch) -> StepRecord:
        n = len(batch)
        rec = StepRecord(n_samples=n, n_success=n, success=[True] * n)
        semi_w = torch.full((n,), self.cfg.lambda_semi, dtype=DTYPE)
        mask = torch.ones(n, dtype=torch.bool)
        gen, disc, parts, _, _ = self._losses(batch, batch.history, semi_w, mask, [self.cfg.seed, 0, self.step_count])
        rec.losses = parts
        rec.updated = self._apply(gen, disc)
        rec.aborted = not rec.updated
        self.step_count += 1
        return rec

    def adversarial_step(self, batch: SceneBatch, attack: AttackType, atk_cfg: AttackConfig) -> StepRecord:
        """One pass of the gated update over every sample in ``batch``."""
        cfg = self.cfg
        n = len(batch)
        rec = StepRecord(n_samples=n)
        if cfg.audit:
            rec.digest_before = parameter_digest(self.model)
        with torch.no_grad():
            _, z_benign = self.model(batch)
        adv = pgd_attack_batch(self.model, batch, attack, atk_cfg).adv_history.detach()
        with torch.no_grad():
            pred_adv, z_adv = self.model(batch.with_history(adv))
            if cfg.gate_error == "ade":
                err = attack_objective(pred_adv, batch.future, AttackType.ade())
            else:
                err = attack_objective(pred_adv, batch.future, attack)
        success = err > cfg.success_threshold
        reference = torch.where(batch.intent >= 0, batch.intent, torch.argmax(z_benign.z_lat, dim=-1))
        flipped = (torch.argmax(z_adv.z_lat, dim=-1) != reference) & success
        semi_w = torch.where(flipped, torch.tensor(cfg.lambda_semi * cfg.lambda_semi_boost, dtype=DTYPE),
                             torch.tensor(cfg.lambda_semi, dtype=DTYPE))
        rec.success = success.tolist()
        rec.flipped = flipped.tolist()
        rec.n_success = int(success.sum())
        rec.n_flipped = int(flipped.sum())
        rec.semi_weights = [float(w) for w, s in zip(semi_w, success) if s]
        if rec.n_success:
            seed = [cfg.seed, 1, self.step_count]
            gen, disc, parts, _, _ = self._losses(batch, adv, semi_w, success, seed)
            if cfg.mixup_enabled:
                lam = self._mixup_weights(n)
                mixed = mixup_histories(batch.history, adv, lam)
                sub = batch.with_history(mixed).index(success.nonzero().squeeze(1))
                mix_pred, _ = self.model(sub)
                mix = loss_traj(mix_pred, sub.future, reduce=False).mean()
                gen = gen + cfg.lambda_traj * mix
                parts["mixup_traj"] = mix.item()
            rec.losses = parts
            rec.updated = self._apply(gen, disc)
            rec.aborted = not rec.updated
        if cfg.audit:
            rec.digest_after = parameter_digest(self.model)
        self.step_count += 1
        return rec

    def _mixup_weights(self, n: int) -> torch.Tensor:
        if self.cfg.mixup_mode == "fixed":
            return torch.full((n,), self.cfg.mixup_lambda, dtype=DTYPE)
        rng = np.random.default_rng([self.cfg.seed, 2, self.step_count])
        return torch.as_tensor(rng.beta(2.0, 1.0, size=n), dtype=DTYPE)


def adversarial_training_step(model: PredictorModel, scene: Scene, attack: AttackType, cfg: TrainConfig,
                              atk_cfg: AttackConfig, labels: SemanticLabels | None = None,
                              trainer: Trainer | None = None) -> tuple[PredictorModel, StepRecord]:
    """Single-sample gated update. The model is updated in place and returned."""
    labels = labels if labels is not None else semantic_labels(scene)
    trainer = trainer or Trainer(model, cfg)
    rec = trainer.adversarial_step(collate([scene], [labels]), attack, atk_cfg)
    return model, rec


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else float("nan")


def _epoch_record(phase, epoch, steps: list[StepRecord]) -> EpochRecord:
    def loss(key):
        return _mean([s.losses.get(key) for s in steps if s.losses])

    return EpochRecord(
        phase=phase, epoch=epoch,
        loss_traj=loss("traj"), loss_semi=loss("semi"), loss_reg=loss("reg"), loss_disc=loss("disc"),
        n_samples=sum(s.n_samples for s in steps),
        n_success=sum(s.n_success for s in steps),
        n_flipped=sum(s.n_flipped for s in steps),
        n_updates=sum(s.updated for s in steps),
        n_aborted=sum(s.aborted for s in steps),
    )


def train(model: PredictorModel, scenes: Sequence[Scene] | SceneBatch, attack: AttackType, cfg: TrainConfig,
          atk_cfg: AttackConfig, monitor: SceneBatch | None = None,
          monitor_attacks: Sequence[AttackType] = (),
          on_epoch: Callable[[EpochRecord, PredictorModel], None] | None = None,
          pretrain: bool = True, prior: PriorSpec | None = None) -> tuple[PredictorModel, TrainReport]:
    """Benign pre-training followed by gated adversarial epochs.

    ``scenes`` may be pre-collated (labels included). ``monitor`` is evaluated
    after every epoch when given.
    """
    if isinstance(scenes, SceneBatch):
        batch = scenes
    else:
        if not scenes:
            raise ValueError("training needs at least one scene")
        batch = collate(scenes, [semantic_labels(s) for s in scenes])
    if len(batch) == 0:
        raise ValueError("training needs at least one scene")
    report = TrainReport()
    pre_trainer = Trainer(model, cfg, prior=prior, learning_rate=cfg.pretrain_learning_rate)
    adv_trainer = Trainer(model, cfg, prior=prior)

    phases = []
    if pretrain:
        phases += [("benign", e) for e in range(cfg.pretrain_epochs)]
    phases += [("adversarial", e) for e in range(cfg.epochs)]
    for phase, epoch in phases:
        trainer = pre_trainer if phase == "benign" else adv_trainer
        rng = np.random.default_rng([cfg.seed, 0 if phase == "benign" else 1, epoch])
        order = rng.permutation(len(batch))
        steps = []
        for start in range(0, len(order), cfg.batch_size):
            part = batch.index(order[start : start + cfg.batch_size])
            if phase == "benign":
                rec = trainer.benign_step(part)
            else:
                rec = trainer.adversarial_step(part, attack, atk_cfg)
            if rec.aborted:
                report.flagged.append(f"{phase}:{epoch}:{start}")
            steps.append(rec)
        report.steps.extend(steps)
        erec = _epoch_record(phase, epoch, steps)
        if not all(torch.isfinite(p).all() for p in model.parameters()):
            raise NonFiniteError(f"parameters became non-finite in {phase} epoch {epoch}")
        if monitor is not None:
            res = evaluate(model, monitor, monitor_attacks, atk_cfg)
            erec.benign_ade = res.mean(None, "ade")
            erec.attacked_ade = {a.name: res.mean(a.name, "ade") for a in monitor_attacks}
            erec.intent_error = res.intention_error(monitor_attacks[0].name if monitor_attacks else None)
        log.info("%s epoch %d: %s", phase, epoch, asdict(erec))
        report.epochs.append(erec)
        if on_epoch is not None:
            on_epoch(erec, model)
    return model, report
