"""White-box PGD attacks on the target history inside a per-waypoint disc."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateTrajectoryError, LengthMismatchError
from .predictor import DTYPE, SceneBatch, collate
from .scenario import DT, Scene

log = logging.getLogger(__name__)

ADE, LATERAL, LONGITUDINAL = "ade", "lateral", "longitudinal"

_SIGN_NAMES = {
    LATERAL: {"right": 1, "left": -1},
    LONGITUDINAL: {"forward": 1, "backward": -1},
}


@dataclass(frozen=True)
class AttackType:
    kind: str = ADE
    sign: int = 1

    def __post_init__(self):
        if self.kind not in (ADE, LATERAL, LONGITUDINAL):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")

    @classmethod
    def ade(cls):
        return cls(ADE, 1)

    @classmethod
    def lateral(cls, direction: str = "right"):
        return cls(LATERAL, _SIGN_NAMES[LATERAL][direction])

    @classmethod
    def longitudinal(cls, direction: str = "forward"):
        return cls(LONGITUDINAL, _SIGN_NAMES[LONGITUDINAL][direction])

    @classmethod
    def parse(cls, text: str) -> "AttackType":
        """Accepts ``ade``, ``lateral[-right|-left]``, ``longitudinal[-forward|-backward]``
        and the short forms ``lat``/``lon``."""
        text = text.strip().lower()
        head, _, tail = text.partition("-")
        head = {"lat": LATERAL, "lon": LONGITUDINAL}.get(head, head)
        if head == ADE and not tail:
            return cls.ade()
        if head in _SIGN_NAMES:
            names = _SIGN_NAMES[head]
            direction = tail or next(iter(names))
            if direction in names:
                return cls(head, names[direction])
        raise ValueError(f"cannot parse attack type {text!r}")

    @property
    def name(self) -> str:
        if self.kind == ADE:
            return ADE
        inv = {v: k for k, v in _SIGN_NAMES[self.kind].items()}
        return f"{self.kind}-{inv[self.sign]}"


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 1.0
    iterations: int = 20
    step_size: float = 0.1
    keep_best: bool = True
    random_start: bool = False
    success_threshold: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


@dataclass
class AttackResult:
    adv_history: np.ndarray
    objective_value: float
    benign_objective: float
    iterations_run: int
    success: bool
    attacked_ade: float
    feasible: bool = True
    error: str | None = None


@dataclass
class BatchAttackResult:
    adv_history: torch.Tensor   # (B, H, 2)
    objective: torch.Tensor     # (B,)
    benign_objective: torch.Tensor
    iterations_run: int
    aborted: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.bool))


# ---------------------------------------------------------------------------
# objectives

def direction_frames_batch(truth: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-frame longitudinal / right-lateral unit vectors for ``(..., F, 2)`` truth."""
    steps = torch.diff(truth, dim=-2)
    steps = torch.cat([steps, steps[..., -1:, :]], dim=-2)
    norms = torch.linalg.vector_norm(steps, dim=-1)
    moving = norms > 1e-12
    if not moving.any(-1).all():
        raise DegenerateTrajectoryError("ground-truth trajectory never moves")
    first = torch.argmax(moving.to(torch.int64), dim=-1)
    fallback = torch.gather(steps, -2, first[..., None, None].expand(*first.shape, 1, 2))
    steps = torch.where(moving.unsqueeze(-1), steps, fallback)
    u_lon = steps / torch.linalg.vector_norm(steps, dim=-1, keepdim=True)
    u_lat = torch.stack([u_lon[..., 1], -u_lon[..., 0]], dim=-1)
    return u_lon, u_lat


def attack_objective(pred, truth, attack: AttackType, frames=None) -> torch.Tensor:
    """Quantity the attacker maximizes, in meters (per sample when batched).

    ADE attacks use mean displacement; directional attacks use the mean
    signed projection with the configured direction counted positive.
    """
    pred = torch.as_tensor(pred, dtype=DTYPE)
    truth = torch.as_tensor(truth, dtype=DTYPE)
    if pred.shape != truth.shape:
        raise LengthMismatchError(f"prediction {tuple(pred.shape)} and truth {tuple(truth.shape)} differ")
    diff = pred - truth
    if attack.kind == ADE:
        return torch.linalg.vector_norm(diff, dim=-1).mean(-1)
    if frames is None:
        frames = direction_frames_batch(truth)
    u = frames[1] if attack.kind == LATERAL else frames[0]
    return attack.sign * (diff * u).sum(-1).mean(-1)


def project_perturbation(delta, epsilon: float):
    """Radially shrink every waypoint offset onto the disc of radius ``epsilon``."""
    as_numpy = not isinstance(delta, torch.Tensor)
    d = torch.as_tensor(np.asarray(delta, dtype=np.float64) if as_numpy else delta)
    norms = torch.linalg.vector_norm(d, dim=-1, keepdim=True)
    scale = torch.where(norms > epsilon, epsilon / norms.clamp_min(1e-300), torch.ones_like(norms))
    out = d * scale
    return out.numpy() if as_numpy else out


def is_successful(benign_err: float, attacked_err: float, threshold: float) -> bool:
    return bool(attacked_err > threshold)


def is_feasible(history: np.ndarray, v_max: float = 40.0, a_max: float = 15.0) -> bool:
    """Physical plausibility flag for a (possibly perturbed) history."""
    vel = np.diff(history, axis=0) / DT
    acc = np.diff(vel, axis=0) / DT
    return bool(np.linalg.norm(vel, axis=1).max() <= v_max and np.linalg.norm(acc, axis=1).max() <= a_max)


# ---------------------------------------------------------------------------
# PGD

def _forward(model, batch: SceneBatch) -> torch.Tensor:
    out = model(batch)
    return out[0] if isinstance(out, tuple) else out


def pgd_attack_batch(model, batch: SceneBatch, attack: AttackType, config: AttackConfig) -> BatchAttackResult:
    """Batched PGD; samples are independent so one backward pass serves all."""
    benign = batch.history.detach()
    truth = batch.future
    frames = None if attack.kind == ADE else direction_frames_batch(truth)
    n = len(batch)

    def evaluate(delta, need_grad):
        d = delta.detach().requires_grad_(need_grad)
        with torch.enable_grad() if need_grad else torch.no_grad():
            obj = attack_objective(_forward(model, batch.with_history(benign + d)), truth, attack, frames)
            grad = torch.autograd.grad(obj.sum(), d)[0] if need_grad else None
        return obj.detach(), grad

    delta = torch.zeros_like(benign)
    if config.random_start:
        rng = np.random.default_rng(config.seed)
        init = torch.as_tensor(rng.uniform(-config.epsilon, config.epsilon, benign.shape), dtype=DTYPE)
        delta = project_perturbation(init, config.epsilon)

    aborted = torch.zeros(n, dtype=torch.bool)
    obj, grad = evaluate(delta, config.iterations > 0)
    benign_obj = obj.clone() if not config.random_start else evaluate(torch.zeros_like(benign), False)[0]
    best_obj, best_delta = obj.clone(), delta.clone()

    for it in range(config.iterations):
        bad = ~torch.isfinite(grad).all(-1).all(-1) | ~torch.isfinite(obj)
        if bad.any():
            log.warning("non-finite attack gradient on %d sample(s); reverting them", int(bad.sum()))
            aborted |= bad
            grad = torch.where(bad[:, None, None], torch.zeros_like(grad), grad)
        gnorm = torch.linalg.vector_norm(grad, dim=-1, keepdim=True)
        step = torch.where(gnorm > 0, grad / gnorm.clamp_min(1e-300), torch.zeros_like(grad))
        delta = project_perturbation(delta + config.step_size * step, config.epsilon)
        delta = torch.where(aborted[:, None, None], torch.zeros_like(delta), delta)
        last = it == config.iterations - 1
        obj, grad = evaluate(delta, not last)
        if config.keep_best:
            better = obj > best_obj
            best_obj = torch.where(better, obj, best_obj)
            best_delta = torch.where(better[:, None, None], delta, best_delta)

    if config.keep_best:
        delta, obj = best_delta, best_obj
    if aborted.any():
        delta = torch.where(aborted[:, None, None], torch.zeros_like(delta), delta)
        obj = torch.where(aborted, benign_obj, obj)
    return BatchAttackResult(benign + delta, obj, benign_obj, config.iterations, aborted)


def pgd_attack(model, scene: Scene, attack: AttackType, config: AttackConfig = AttackConfig()) -> AttackResult:
    """Attack one scene's target history; the scene and model are left untouched."""
    batch = collate([scene])
    res = pgd_attack_batch(model, batch, attack, config)
    adv = res.adv_history[0].numpy().copy()
    aborted = bool(res.aborted[0])
    with torch.no_grad():
        pred = _forward(model, batch.with_history(res.adv_history))
        attacked_ade = float(attack_objective(pred, batch.future, AttackType.ade())[0])
        benign_ade = float(attack_objective(_forward(model, batch), batch.future, AttackType.ade())[0])
    return AttackResult(
        adv_history=adv,
        objective_value=float(res.objective[0]),
        benign_objective=float(res.benign_objective[0]),
        iterations_run=res.iterations_run,
        success=False if aborted else is_successful(benign_ade, attacked_ade, config.success_threshold),
        attacked_ade=attacked_ade,
        feasible=is_feasible(adv),
        error="non-finite gradient" if aborted else None,
    )
