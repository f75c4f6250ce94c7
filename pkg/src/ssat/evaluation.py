"""Batched benign / attacked evaluation of a predictor over a scene set."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .attack import ADE, LATERAL, LONGITUDINAL, AttackConfig, AttackType, direction_frames_batch, pgd_attack_batch
from .predictor import SceneBatch


def per_sample_errors(pred: torch.Tensor, truth: torch.Tensor) -> dict[str, np.ndarray]:
    """ADE and signed lateral / longitudinal errors for each sample."""
    diff = pred - truth
    u_lon, u_lat = direction_frames_batch(truth)
    return {
        "ade": torch.linalg.vector_norm(diff, dim=-1).mean(-1).numpy(),
        "lat": (diff * u_lat).sum(-1).mean(-1).numpy(),
        "lon": (diff * u_lon).sum(-1).mean(-1).numpy(),
    }


@dataclass
class EvalResult:
    """Per-sample arrays for the benign pass and for each attack by name."""

    benign: dict[str, np.ndarray]
    benign_intents: np.ndarray
    attacked: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    attacked_intents: dict[str, np.ndarray] = field(default_factory=dict)
    adv_history: dict[str, np.ndarray] = field(default_factory=dict)
    labels: np.ndarray | None = None

    def mean(self, attack: str | None, key: str) -> float:
        src = self.benign if attack is None else self.attacked[attack]
        return float(np.mean(src[key]))

    def intention_error(self, attack: str | None = None) -> float:
        """Share of labeled scenes whose argmax intent disagrees with the label."""
        pred = self.benign_intents if attack is None else self.attacked_intents[attack]
        mask = self.labels >= 0
        if not mask.any():
            return float("nan")
        return float(np.mean(pred[mask] != self.labels[mask]))

    def headline(self, attack: AttackType) -> float:
        """The number a results table reports for this attack type."""
        key = {ADE: "ade", LATERAL: "lat", LONGITUDINAL: "lon"}[attack.kind]
        return attack.sign * self.mean(attack.name, key) if key != "ade" else self.mean(attack.name, "ade")


@torch.no_grad()
def _predict(model, batch: SceneBatch):
    pred, z = model(batch)
    return pred, torch.argmax(z.z_lat, dim=-1).numpy()


def evaluate(model, batch: SceneBatch, attacks: Sequence[AttackType] = (), atk_cfg: AttackConfig = AttackConfig(),
             chunk: int = 256, keep_adv: bool = False) -> EvalResult:
    chunks = [batch.index(slice(i, i + chunk)) for i in range(0, len(batch), chunk)]

    def run(history_fn):
        errs, intents = [], []
        for part in chunks:
            pred, intent = _predict(model, part.with_history(history_fn(part)))
            errs.append(per_sample_errors(pred, part.future))
            intents.append(intent)
        return {k: np.concatenate([e[k] for e in errs]) for k in errs[0]}, np.concatenate(intents)

    benign, benign_int = run(lambda part: part.history)
    res = EvalResult(benign, benign_int, labels=batch.intent.numpy())
    for attack in attacks:
        advs = []

        def adv_history(part, attack=attack):
            h = pgd_attack_batch(model, part, attack, atk_cfg).adv_history
            advs.append(h.numpy())
            return h

        res.attacked[attack.name], res.attacked_intents[attack.name] = run(adv_history)
        if keep_adv:
            res.adv_history[attack.name] = np.concatenate(advs)
    return res
