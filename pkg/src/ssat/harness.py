"""Experiment orchestration: datasets, training runs, evaluation tables, plots."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import config as cfgmod
from .attack import AttackConfig, AttackType
from .evaluation import EvalResult, evaluate
from .predictor import ModelConfig, PredictorModel, SceneBatch, collate, load_checkpoint, save_checkpoint
from .scenario import (TEMPLATES, Scene, export_scenes, generate_dataset, ingest_scenes, semantic_labels,
                       template_mix)
from .training import EpochRecord, TrainConfig, train

log = logging.getLogger(__name__)

METHODS = ("original", "at-baseline", "ssat", "unsup-ssat", "mixup-ssat")
METHOD_LABELS = {
    "original": "Original",
    "at-baseline": "AT-baseline",
    "ssat": "SSAT",
    "unsup-ssat": "Unsup-SSAT",
    "mixup-ssat": "Mixup-SSAT",
}


def method_config(method: str, base: TrainConfig) -> TrainConfig:
    """Switch losses on or off according to the training method."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "original":
        return dataclasses.replace(base, epochs=0)
    if method == "at-baseline":
        return dataclasses.replace(base, lambda_semi=0.0, lambda_reg=0.0, mixup_enabled=False)
    if method == "unsup-ssat":
        return dataclasses.replace(base, lambda_semi=0.0, mixup_enabled=False)
    if method == "mixup-ssat":
        return dataclasses.replace(base, mixup_enabled=True)
    return dataclasses.replace(base, mixup_enabled=False)


def active_losses(cfg: TrainConfig) -> dict[str, bool]:
    return {
        "traj": cfg.lambda_traj > 0,
        "semi": cfg.lambda_semi > 0,
        "reg": cfg.lambda_reg > 0,
        "disc": cfg.lambda_reg > 0,
        "mixup": cfg.mixup_enabled,
    }


@dataclass
class DataSpec:
    train_path: str | None = None
    test_path: str | None = None
    train_count: int = 2000
    test_count: int = 400
    monitor_count: int = 0
    seed: int = 11

    def load(self) -> tuple[list[Scene], list[Scene], list[Scene]]:
        train = ingest_scenes(self.train_path) if self.train_path else generate_dataset(self.train_count, self.seed)
        test = ingest_scenes(self.test_path) if self.test_path else generate_dataset(self.test_count, self.seed + 1)
        monitor = generate_dataset(self.monitor_count, self.seed + 2) if self.monitor_count > 0 else []
        return train, test, monitor


@dataclass
class ExperimentSpec:
    method: str = "ssat"
    train_attack: AttackType = field(default_factory=AttackType.ade)
    eval_attacks: tuple[AttackType, ...] = (AttackType.ade(), AttackType.lateral(), AttackType.longitudinal())
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    model_seed: int = 0
    init_checkpoint: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")

    @classmethod
    def from_config(cls, values: Mapping[str, str], **overrides) -> "ExperimentSpec":
        values = dict(values)
        seed = int(values.get("seed", values.get("train.seed", 0)))
        values.setdefault("train.seed", str(seed))
        values.setdefault("attack.seed", str(seed))
        data = DataSpec(
            train_path=values.get("data.train") or None,
            test_path=values.get("data.test") or None,
            train_count=int(values.get("data.train_count", 2000)),
            test_count=int(values.get("data.test_count", 400)),
            monitor_count=int(values.get("data.monitor_count", 0)),
            seed=int(values.get("data.seed", 11)),
        )
        evals = values.get("experiment.eval_attacks", "ade,lateral-right,longitudinal-forward")
        spec = cls(
            method=values.get("experiment.method", "ssat").lower(),
            train_attack=AttackType.parse(values.get("experiment.train_attack", "ade")),
            eval_attacks=tuple(AttackType.parse(a) for a in evals.split(",") if a.strip()),
            data=data,
            train=cfgmod.train_config(values),
            attack=cfgmod.attack_config(values),
            model=cfgmod.model_config(values),
            model_seed=int(values.get("model.seed", seed)),
            init_checkpoint=values.get("experiment.init") or None,
        )
        return dataclasses.replace(spec, **overrides) if overrides else spec

    def snapshot(self) -> dict[str, str]:
        effective = method_config(self.method, self.train)
        out = {
            "experiment.method": self.method,
            "experiment.train_attack": self.train_attack.name,
            "experiment.eval_attacks": ",".join(a.name for a in self.eval_attacks),
            "experiment.init": self.init_checkpoint or "",
            "data.train": self.data.train_path or "",
            "data.test": self.data.test_path or "",
            "data.train_count": self.data.train_count,
            "data.test_count": self.data.test_count,
            "data.monitor_count": self.data.monitor_count,
            "data.seed": self.data.seed,
            "model.seed": self.model_seed,
        }
        out.update(cfgmod.flatten("train", effective))
        out.update(cfgmod.flatten("attack", self.attack))
        out.update(cfgmod.flatten("model", self.model))
        out.update({f"losses.{k}": "on" if v else "off" for k, v in active_losses(effective).items()})
        return out


# ---------------------------------------------------------------------------
# formatting

def fmt(x: float) -> str:
    """Fixed-precision float text so metrics files diff cleanly."""
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "nan"
    return f"{float(x):.6f}"


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _labeled_batch(scenes: Sequence[Scene]) -> SceneBatch:
    return collate(scenes, [semantic_labels(s) for s in scenes])


# ---------------------------------------------------------------------------
# runs

EPOCH_COLUMNS = ("phase", "epoch", "loss_traj", "loss_semi", "loss_reg", "loss_disc", "n_samples",
                 "n_success", "n_flipped", "n_updates", "n_aborted", "benign_ade")


@dataclass
class RunResult:
    out_dir: Path
    before: EvalResult
    after: EvalResult
    epochs: list[EpochRecord]


def pretrain_model(spec: ExperimentSpec, train_batch: SceneBatch) -> PredictorModel:
    model = PredictorModel(spec.model, seed=spec.model_seed)
    cfg = dataclasses.replace(spec.train, epochs=0)
    train(model, train_batch, spec.train_attack, cfg, spec.attack)
    return model


def eval_rows(before: EvalResult, after: EvalResult, attacks: Sequence[AttackType]) -> list[list[str]]:
    rows = [["benign_ade", "none", fmt(before.mean(None, "ade")), fmt(after.mean(None, "ade"))],
            ["intent_error", "none", fmt(before.intention_error()), fmt(after.intention_error())]]
    for a in attacks:
        rows.append(["attack_error", a.name, fmt(before.headline(a)), fmt(after.headline(a))])
        rows.append(["attacked_ade", a.name, fmt(before.mean(a.name, "ade")), fmt(after.mean(a.name, "ade"))])
        rows.append(["intent_error", a.name, fmt(before.intention_error(a.name)), fmt(after.intention_error(a.name))])
    return rows


def run_experiment(spec: ExperimentSpec, out_dir: str | Path, scenes=None,
                   base_model: PredictorModel | None = None) -> RunResult:
    """Train per ``spec`` and write a run directory.

    Contents: ``config.txt``, ``metrics.csv`` (per epoch), ``eval.csv``
    (before/after on the test set), ``pretrained.ckpt``, ``final.ckpt``,
    ``best.ckpt``. ``scenes`` = (train, test, monitor) skips data loading.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfgmod.dump_config(spec.snapshot()), encoding="utf-8")
    train_scenes, test_scenes, monitor_scenes = scenes if scenes is not None else spec.data.load()
    train_batch = _labeled_batch(train_scenes)
    test_batch = _labeled_batch(test_scenes)
    monitor_batch = _labeled_batch(monitor_scenes) if monitor_scenes else None

    if base_model is not None:
        model = _clone(base_model)
    elif spec.init_checkpoint:
        model = load_checkpoint(spec.init_checkpoint)
    else:
        model = pretrain_model(spec, train_batch)
    save_checkpoint(model, out / "pretrained.ckpt")
    before = evaluate(model, test_batch, spec.eval_attacks, spec.attack)

    cfg = method_config(spec.method, spec.train)
    best = {"score": float("inf")}
    save_checkpoint(model, out / "best.ckpt")

    def on_epoch(rec: EpochRecord, m: PredictorModel):
        score = rec.attacked_ade.get(spec.train_attack.name, float("nan"))
        if monitor_batch is not None and score < best["score"]:
            best["score"] = score
            save_checkpoint(m, out / "best.ckpt")

    model, report = train(model, train_batch, spec.train_attack, cfg, spec.attack, monitor=monitor_batch,
                          monitor_attacks=(spec.train_attack,), on_epoch=on_epoch, pretrain=False)
    save_checkpoint(model, out / "final.ckpt")
    if monitor_batch is None:
        save_checkpoint(model, out / "best.ckpt")
    after = evaluate(model, test_batch, spec.eval_attacks, spec.attack)

    epoch_rows = []
    for e in report.epochs:
        epoch_rows.append([e.phase, e.epoch, fmt(e.loss_traj), fmt(e.loss_semi), fmt(e.loss_reg), fmt(e.loss_disc),
                           e.n_samples, e.n_success, e.n_flipped, e.n_updates, e.n_aborted, fmt(e.benign_ade)])
    _write_csv(out / "metrics.csv", EPOCH_COLUMNS, epoch_rows)
    _write_csv(out / "eval.csv", ("metric", "attack", "before", "after"),
               eval_rows(before, after, spec.eval_attacks))
    return RunResult(out, before, after, report.epochs)


def _clone(model: PredictorModel) -> PredictorModel:
    twin = PredictorModel(model.cfg)
    twin.load_state_dict(model.state_dict())
    return twin


# ---------------------------------------------------------------------------
# results matrix

@dataclass
class ResultsMatrix:
    """Cells keyed by (method, train attack, eval attack) -> (before, after)."""

    cells: dict[tuple[str, str, str], tuple[float, float] | None] = field(default_factory=dict)
    benign: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)
    intent: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)

    def rows(self) -> list[list[str]]:
        out = []
        for (method, tr, ev), val in self.cells.items():
            b = self.benign.get((method, tr))
            i = self.intent.get((method, tr))
            before, after = val if val is not None else (None, None)
            out.append([method, tr, ev,
                        "absent" if val is None else fmt(before), "absent" if val is None else fmt(after),
                        fmt(b[0]) if b else "absent", fmt(b[1]) if b else "absent",
                        fmt(i[0]) if i else "absent", fmt(i[1]) if i else "absent"])
        return out

    def render(self) -> str:
        """Plain-text table: one row per (method, train attack)."""
        evals = list(dict.fromkeys(ev for (_, _, ev) in self.cells))
        keys = list(dict.fromkeys((m, tr) for (m, tr, _) in self.cells))
        header = ["method", "trained on", *evals, "benign ADE", "intent err"]
        lines = [header]
        for m, tr in keys:
            row = [METHOD_LABELS.get(m, m), tr]
            for ev in evals:
                v = self.cells.get((m, tr, ev))
                row.append("absent" if v is None else f"{v[0]:.2f}->{v[1]:.2f}")
            b = self.benign.get((m, tr))
            i = self.intent.get((m, tr))
            row.append("absent" if b is None else f"{b[0]:.2f}->{b[1]:.2f}")
            row.append("absent" if i is None else f"{100 * i[0]:.1f}%->{100 * i[1]:.1f}%")
            lines.append(row)
        widths = [max(len(str(r[c])) for r in lines) for c in range(len(header))]
        return "\n".join("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in lines) + "\n"


MATRIX_COLUMNS = ("method", "train_attack", "eval_attack", "before", "after", "benign_before", "benign_after",
                  "intent_before", "intent_after")


def read_run(run_dir: str | Path) -> tuple[dict[str, str], list[dict[str, str]]]:
    run_dir = Path(run_dir)
    config = cfgmod.load_config(run_dir / "config.txt")
    with open(run_dir / "eval.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return config, rows


def build_matrix(run_dirs: Sequence[str | Path], intent_attack: str = "lateral-right") -> ResultsMatrix:
    matrix = ResultsMatrix()
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        try:
            config, rows = read_run(run_dir)
        except (FileNotFoundError, ValueError):
            matrix.missing.append(str(run_dir))
            config_path = run_dir / "config.txt"
            if config_path.exists():
                config = cfgmod.load_config(config_path)
                method, tr = config.get("experiment.method", "?"), config.get("experiment.train_attack", "?")
                for ev in config.get("experiment.eval_attacks", "").split(","):
                    if ev:
                        matrix.cells[(method, tr, ev)] = None
            continue
        method, tr = config["experiment.method"], config["experiment.train_attack"]
        if any(k[:2] == (method, tr) for k in matrix.cells):
            raise ValueError(f"duplicate run for method {method} trained on {tr}: {run_dir}")
        for r in rows:
            pair = (float(r["before"]), float(r["after"]))
            if r["metric"] == "attack_error":
                matrix.cells[(method, tr, r["attack"])] = pair
            elif r["metric"] == "benign_ade":
                matrix.benign[(method, tr)] = pair
            elif r["metric"] == "intent_error" and r["attack"] == intent_attack:
                matrix.intent[(method, tr)] = pair
        if (method, tr) not in matrix.intent:
            for r in rows:
                if r["metric"] == "intent_error" and r["attack"] == "none":
                    matrix.intent[(method, tr)] = (float(r["before"]), float(r["after"]))
    return matrix


def write_matrix(matrix: ResultsMatrix, path: str | Path) -> None:
    path = Path(path)
    _write_csv(path, MATRIX_COLUMNS, matrix.rows())
    path.with_suffix(".txt").write_text(matrix.render(), encoding="utf-8")


# ---------------------------------------------------------------------------
# attack evaluation over a scene file

ATTACK_COLUMNS = ("scene_id", "benign_ade", "attacked_ade", "benign_lat", "attacked_lat", "benign_lon",
                  "attacked_lon", "benign_intent", "attacked_intent", "label_intent")


def attack_scenes(model: PredictorModel, scenes: Sequence[Scene], attack: AttackType, atk_cfg: AttackConfig,
                  out_csv: str | Path, plot_dir: str | Path | None = None) -> EvalResult:
    batch = _labeled_batch(scenes)
    res = evaluate(model, batch, [attack], atk_cfg, keep_adv=plot_dir is not None)
    a = attack.name
    rows = []
    for i, scene in enumerate(scenes):
        rows.append([scene.scene_id, fmt(res.benign["ade"][i]), fmt(res.attacked[a]["ade"][i]),
                     fmt(res.benign["lat"][i]), fmt(res.attacked[a]["lat"][i]),
                     fmt(res.benign["lon"][i]), fmt(res.attacked[a]["lon"][i]),
                     int(res.benign_intents[i]), int(res.attacked_intents[a][i]), int(res.labels[i])])
    rows.append(["mean", fmt(res.mean(None, "ade")), fmt(res.mean(a, "ade")), fmt(res.mean(None, "lat")),
                 fmt(res.mean(a, "lat")), fmt(res.mean(None, "lon")), fmt(res.mean(a, "lon")),
                 fmt(res.intention_error()), fmt(res.intention_error(a)), ""])
    _write_csv(Path(out_csv), ATTACK_COLUMNS, rows)
    if plot_dir is not None:
        plot_dir = Path(plot_dir)
        plot_dir.mkdir(parents=True, exist_ok=True)
        with torch.no_grad():
            benign_pred, _ = model(batch)
            adv_pred, _ = model(batch.with_history(torch.as_tensor(res.adv_history[a])))
        for i, scene in enumerate(scenes):
            plot_overlay(scene, res.adv_history[a][i], benign_pred[i].numpy(), adv_pred[i].numpy(),
                         plot_dir / f"{scene.scene_id}.svg", title=f"{scene.scene_id} ({a})")
    return res


def plot_overlay(scene: Scene, adv_history: np.ndarray, benign_pred: np.ndarray, adv_pred: np.ndarray,
                 path: str | Path, title: str = "") -> None:
    """Benign vs adversarial history and predicted vs ground-truth future."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ssat"
    fig, ax = plt.subplots(figsize=(6, 4))
    for lane in scene.map.lanes:
        ax.plot(lane.points[:, 0], lane.points[:, 1], color="0.85", lw=1, zorder=0)
    for other in scene.others:
        ax.plot(other.history[:, 0], other.history[:, 1], color="0.6", lw=1)
    t = scene.target
    ax.plot(t.history[:, 0], t.history[:, 1], color="tab:blue", lw=2, label="benign history")
    ax.plot(adv_history[:, 0], adv_history[:, 1], color="tab:red", lw=2, label="adversarial history")
    ax.plot(t.future[:, 0], t.future[:, 1], "--", color="tab:green", lw=1.5, label="ground truth")
    ax.plot(benign_pred[:, 0], benign_pred[:, 1], ":", color="tab:blue", lw=1.5, label="benign prediction")
    ax.plot(adv_pred[:, 0], adv_pred[:, 1], "--", color="tab:red", lw=1.5, label="attacked prediction")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(title)
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def generate_file(count: int, seed: int, out_path: str | Path, templates: Sequence[str] = TEMPLATES,
                  weights: Sequence[float] | None = None) -> dict[str, int]:
    """Generate ``count`` synthetic scenes, export them, return per-template counts."""
    mix = template_mix(count, seed, templates, weights)
    scenes = generate_dataset(count, seed, templates, weights)
    export_scenes(scenes, out_path)
    counts = {t: 0 for t in templates}
    for t, _ in mix:
        counts[t] += 1
    return counts
