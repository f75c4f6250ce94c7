"""Driving scenes: synthetic generation, flat-file I/O and semantic labels.

Trajectories are ``(n, 2)`` float64 arrays in meters, sampled at 10 Hz.
A scene holds ``HISTORY_LEN`` past points and ``FUTURE_LEN`` future points
per agent. Synthetic scenes are laid out in a target-centric frame: the
target's last observed position is the origin and the road runs along +x.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IngestError, ScenarioError, UnknownTemplateError

HISTORY_LEN = 20
FUTURE_LEN = 30
DT = 0.1
LANE_WIDTH = 3.5

TEMPLATES = ("straight-follow", "lane-change-left", "lane-change-right", "turn", "free-flow")

# headway prior used to place lead vehicles (log-normal location/scale)
HEADWAY_MU = 0.0682
HEADWAY_SIGMA = 0.647


class Intent(enum.IntEnum):
    FORWARD = 0
    LEFT = 1
    RIGHT = 2


@dataclass(frozen=True, eq=False)
class Lane:
    lane_id: int
    points: np.ndarray
    successors: tuple[int, ...] = ()

    def __eq__(self, other):
        if not isinstance(other, Lane):
            return NotImplemented
        return (
            self.lane_id == other.lane_id
            and self.successors == other.successors
            and np.array_equal(self.points, other.points)
        )


@dataclass(frozen=True, eq=False)
class MapContext:
    lanes: tuple[Lane, ...] = ()

    def __eq__(self, other):
        if not isinstance(other, MapContext):
            return NotImplemented
        return self.lanes == other.lanes

    def lane(self, lane_id: int) -> Lane:
        for lane in self.lanes:
            if lane.lane_id == lane_id:
                return lane
        raise KeyError(lane_id)

    def segments(self) -> np.ndarray:
        """All lane segments stacked as ``(S, 2, 2)``."""
        segs = [np.stack([ln.points[:-1], ln.points[1:]], axis=1) for ln in self.lanes]
        if not segs:
            return np.zeros((0, 2, 2))
        return np.concatenate(segs, axis=0)


@dataclass(frozen=True, eq=False)
class Agent:
    agent_id: int
    history: np.ndarray
    future: np.ndarray
    lane_id: int | None = None

    def __eq__(self, other):
        if not isinstance(other, Agent):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.lane_id == other.lane_id
            and np.array_equal(self.history, other.history)
            and np.array_equal(self.future, other.future)
        )


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    agents: tuple[Agent, ...]
    target_id: int
    map: MapContext = field(default_factory=MapContext)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.target_id == other.target_id
            and self.agents == other.agents
            and self.map == other.map
        )

    @property
    def target(self) -> Agent:
        for agent in self.agents:
            if agent.agent_id == self.target_id:
                return agent
        raise ScenarioError(f"scene {self.scene_id}: no agent with target id {self.target_id}")

    @property
    def others(self) -> tuple[Agent, ...]:
        return tuple(a for a in self.agents if a.agent_id != self.target_id)

    def with_target_history(self, history: np.ndarray) -> "Scene":
        """Copy of the scene with only the target history replaced."""
        history = np.array(history, dtype=np.float64)
        agents = tuple(
            Agent(a.agent_id, history, a.future, a.lane_id) if a.agent_id == self.target_id else a
            for a in self.agents
        )
        return Scene(self.scene_id, agents, self.target_id, self.map)


@dataclass(frozen=True)
class SemanticLabels:
    headway_s: float | None = None
    lateral_intent: Intent | None = None

    def __post_init__(self):
        if self.headway_s is not None and not self.headway_s > 0:
            raise ScenarioError(f"headway must be positive, got {self.headway_s}")


@dataclass(frozen=True)
class LabelConfig:
    d_min: float = 1.0
    d_fwd: float = 0.3
    hold_s: float = 1.0
    sensing_range: float = 50.0
    min_speed: float = 0.5
    lane_half_width: float = LANE_WIDTH / 2


def validate_scene(scene: Scene, v_max: float = 40.0) -> None:
    if not scene.agents:
        raise ScenarioError(f"scene {scene.scene_id}: no agents")
    ids = [a.agent_id for a in scene.agents]
    if len(set(ids)) != len(ids):
        raise ScenarioError(f"scene {scene.scene_id}: duplicate agent ids")
    if ids.count(scene.target_id) != 1:
        raise ScenarioError(f"scene {scene.scene_id}: target id {scene.target_id} not present")
    max_step = v_max * DT + 1e-9
    for a in scene.agents:
        if a.history.shape != (HISTORY_LEN, 2):
            raise ScenarioError(
                f"scene {scene.scene_id}: agent {a.agent_id} history has {len(a.history)} points, "
                f"expected {HISTORY_LEN}"
            )
        if a.future.shape != (FUTURE_LEN, 2):
            raise ScenarioError(
                f"scene {scene.scene_id}: agent {a.agent_id} future has {len(a.future)} points, "
                f"expected {FUTURE_LEN}"
            )
        full = np.concatenate([a.history, a.future])
        if not np.all(np.isfinite(full)):
            raise ScenarioError(f"scene {scene.scene_id}: agent {a.agent_id} has non-finite points")
        steps = np.linalg.norm(np.diff(full, axis=0), axis=1)
        if steps.max() > max_step:
            raise ScenarioError(
                f"scene {scene.scene_id}: agent {a.agent_id} moves {steps.max():.2f} m in one frame"
            )
    for lane in scene.map.lanes:
        if len(lane.points) < 2:
            raise ScenarioError(f"scene {scene.scene_id}: lane {lane.lane_id} has < 2 points")
        if np.any(np.linalg.norm(np.diff(lane.points, axis=0), axis=1) <= 0):
            raise ScenarioError(f"scene {scene.scene_id}: lane {lane.lane_id} has a zero-length segment")


# ---------------------------------------------------------------------------
# synthetic generation

_HIST_T = (np.arange(HISTORY_LEN) - (HISTORY_LEN - 1)) * DT
_FUT_T = np.arange(1, FUTURE_LEN + 1) * DT
_ALL_T = np.concatenate([_HIST_T, _FUT_T])


def _straight_lanes() -> list[Lane]:
    xs = np.arange(-80.0, 100.0 + 1e-9, 5.0)
    lanes = []
    for lane_id, y in ((0, 0.0), (1, LANE_WIDTH), (2, -LANE_WIDTH)):
        lanes.append(Lane(lane_id, np.stack([xs, np.full_like(xs, y)], axis=1)))
    return lanes


def _longitudinal(rng: np.random.Generator, v0: float, accel_bound: float) -> np.ndarray:
    # keep speed above 1 m/s over the whole window
    accel = rng.uniform(-accel_bound, accel_bound)
    t_lo, t_hi = _ALL_T[0], _ALL_T[-1]
    v_min = min(v0 + accel * t_lo, v0 + accel * t_hi)
    if v_min < 1.0:
        accel = 0.0
    return v0 * _ALL_T + 0.5 * accel * _ALL_T**2


def _split(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return points[:HISTORY_LEN].copy(), points[HISTORY_LEN:].copy()


def _background_agents(rng: np.random.Generator, first_id: int, count: int) -> list[Agent]:
    agents = []
    for k in range(count):
        lane_id = int(rng.integers(0, 3))
        y = {0: 0.0, 1: LANE_WIDTH, 2: -LANE_WIDTH}[lane_id]
        if lane_id == 0:
            s0 = rng.uniform(-40.0, -10.0)
        else:
            s0 = rng.uniform(-30.0, 40.0)
        v = rng.uniform(5.0, 18.0)
        xs = s0 + v * _ALL_T
        pts = np.stack([xs, np.full_like(xs, y)], axis=1)
        hist, fut = _split(pts)
        agents.append(Agent(first_id + k, hist, fut, lane_id))
    return agents


def _lead_vehicle(rng: np.random.Generator, agent_id: int, v0: float, lateral: float, lane_id: int) -> Agent:
    headway = float(np.clip(rng.lognormal(HEADWAY_MU, HEADWAY_SIGMA), 0.6, 4.0))
    gap0 = max(headway * v0, 6.0)
    v_lead = max(v0 + rng.uniform(-1.0, 1.0), 1.0)
    xs = gap0 + v_lead * _ALL_T
    pts = np.stack([xs, np.full_like(xs, lateral)], axis=1)
    hist, fut = _split(pts)
    return Agent(agent_id, hist, fut, lane_id)


def _turn_path(s: np.ndarray, s_start: float, radius: float, direction: float) -> np.ndarray:
    """Straight along +x, then a quarter arc, then straight again."""
    ds = s - s_start
    ang = np.clip(ds / radius, 0.0, math.pi / 2)
    arc_len = ang * radius
    x = np.where(ds <= 0, s, s_start + radius * np.sin(ang))
    y = np.where(ds <= 0, 0.0, direction * radius * (1 - np.cos(ang)))
    beyond = np.maximum(ds - arc_len, 0.0)
    heading = direction * ang
    x = x + beyond * np.cos(heading)
    y = y + beyond * np.sin(heading)
    return np.stack([x, y], axis=1)


def generate_synthetic_scene(seed: int, template: str, scene_id: str | None = None) -> Scene:
    """Build a deterministic synthetic scene for one of ``TEMPLATES``."""
    if template not in TEMPLATES:
        raise UnknownTemplateError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    rng = np.random.default_rng([int(seed), TEMPLATES.index(template)])
    scene_id = scene_id if scene_id is not None else f"{template}-{seed}"
    lanes = _straight_lanes()
    target_id = 0
    agents: list[Agent] = []

    if template == "straight-follow":
        v0 = rng.uniform(6.0, 18.0)
        s = _longitudinal(rng, v0, 0.5)
        amp = rng.uniform(0.0, 0.04)
        phase = rng.uniform(0, 2 * math.pi)
        y = amp * np.sin(2 * math.pi * _ALL_T / 4.0 + phase) - amp * math.sin(phase)
        hist, fut = _split(np.stack([s, y], axis=1))
        agents.append(Agent(target_id, hist, fut, 0))
        agents.append(_lead_vehicle(rng, 1, v0, 0.0, 0))
        agents += _background_agents(rng, 2, int(rng.integers(0, 3)))

    elif template in ("lane-change-left", "lane-change-right"):
        direction = 1.0 if template == "lane-change-left" else -1.0
        v0 = rng.uniform(8.0, 16.0)
        s = _longitudinal(rng, v0, 0.5)
        # the maneuver is well under way (>= 2.4 m lateral) by the last observed frame
        duration = rng.uniform(2.2, 2.8)
        t0 = rng.uniform(-1.8, -0.62 * duration)
        phase = np.clip((_ALL_T - t0) / duration, 0.0, 1.0)
        y = direction * LANE_WIDTH * (1 - np.cos(math.pi * phase)) / 2
        hist, fut = _split(np.stack([s, y], axis=1))
        # shift so the last observed point sits at the origin laterally as well
        offset = np.array([0.0, hist[-1, 1]])
        agents.append(Agent(target_id, hist, fut, 0))
        if rng.random() < 0.5:
            agents.append(_lead_vehicle(rng, 1, v0, 0.0, 0))
        agents += _background_agents(rng, len(agents), int(rng.integers(0, 3)))
        agents, lanes = _translate(agents, lanes, offset)

    elif template == "turn":
        direction = 1.0 if rng.random() < 0.5 else -1.0
        v0 = rng.uniform(7.0, 9.0)
        radius = rng.uniform(10.0, 14.0)
        t_start = rng.uniform(-1.75, -1.4)
        s = v0 * _ALL_T
        pts = _turn_path(s, v0 * t_start, radius, direction)
        hist, fut = _split(pts)
        offset = hist[-1].copy()
        lane_s = np.arange(-60.0, 80.0 + 1e-9, 2.0)
        lanes.append(Lane(3, _turn_path(lane_s, v0 * t_start, radius, direction)))
        lanes[0] = Lane(0, lanes[0].points, ())
        agents.append(Agent(target_id, hist, fut, 3))
        agents += _background_agents(rng, 1, int(rng.integers(0, 3)))
        agents, lanes = _translate(agents, lanes, offset)

    else:  # free-flow
        v0 = rng.uniform(8.0, 20.0)
        s = _longitudinal(rng, v0, 1.5)
        hist, fut = _split(np.stack([s, np.zeros_like(s)], axis=1))
        agents.append(Agent(target_id, hist, fut, 0))
        agents += _background_agents(rng, 1, int(rng.integers(0, 4)))

    scene = Scene(scene_id, tuple(agents), target_id, MapContext(tuple(lanes)))
    validate_scene(scene)
    return scene


def _translate(agents: list[Agent], lanes: list[Lane], offset: np.ndarray):
    agents = [Agent(a.agent_id, a.history - offset, a.future - offset, a.lane_id) for a in agents]
    lanes = [Lane(ln.lane_id, ln.points - offset, ln.successors) for ln in lanes]
    return agents, lanes


def template_mix(count: int, seed: int, templates: Sequence[str] = TEMPLATES,
                 weights: Sequence[float] | None = None) -> list[tuple[str, int]]:
    """(template, scene seed) pairs drawn by the seeded mix behind ``generate_dataset``."""
    for t in templates:
        if t not in TEMPLATES:
            raise UnknownTemplateError(f"unknown template {t!r}; expected one of {TEMPLATES}")
    rng = np.random.default_rng(seed)
    p = None if weights is None else np.asarray(weights, dtype=float) / np.sum(weights)
    picks = rng.choice(len(templates), size=count, p=p)
    scene_seeds = rng.integers(0, 2**31 - 1, size=count)
    return [(templates[picks[i]], int(scene_seeds[i])) for i in range(count)]


def generate_dataset(count: int, seed: int, templates: Sequence[str] = TEMPLATES,
                     weights: Sequence[float] | None = None) -> list[Scene]:
    """``count`` scenes with templates drawn by a seeded mix."""
    return [
        generate_synthetic_scene(scene_seed, template, scene_id=f"s{seed}-{i:06d}")
        for i, (template, scene_seed) in enumerate(template_mix(count, seed, templates, weights))
    ]


def to_target_frame(scene: Scene) -> Scene:
    """Rigidly move a scene so the target's last observed point is the origin
    and its observed heading points along +x."""
    hist = scene.target.history
    heading = hist[-1] - hist[0]
    norm = np.linalg.norm(heading)
    if norm < 1e-9:
        cos, sin = 1.0, 0.0
    else:
        cos, sin = heading / norm
    rot = np.array([[cos, sin], [-sin, cos]])
    origin = hist[-1].copy()

    def move(p):
        return (p - origin) @ rot.T

    agents = tuple(Agent(a.agent_id, move(a.history), move(a.future), a.lane_id) for a in scene.agents)
    lanes = tuple(Lane(ln.lane_id, move(ln.points), ln.successors) for ln in scene.map.lanes)
    return Scene(scene.scene_id, agents, scene.target_id, MapContext(lanes))


# ---------------------------------------------------------------------------
# flat-file I/O

SCENE_COLUMNS = ("scene_id", "agent_id", "is_target", "frame", "x", "y", "lane_id")
LANE_COLUMNS = ("scene_id", "lane_id", "point_index", "x", "y", "successor_lane_id")


def lanes_path_for(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".lanes" + path.suffix)


def _fmt(v: float) -> str:
    return repr(float(v))


def export_scenes(scenes: Iterable[Scene], path: str | Path) -> None:
    """Write scenes and their lanes to ``path`` and its ``.lanes`` sibling."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh, \
            open(lanes_path_for(path), "w", newline="", encoding="utf-8") as lfh:
        w = csv.writer(fh, lineterminator="\n")
        lw = csv.writer(lfh, lineterminator="\n")
        w.writerow(SCENE_COLUMNS)
        lw.writerow(LANE_COLUMNS)
        for scene in scenes:
            for a in scene.agents:
                lane = "" if a.lane_id is None else str(a.lane_id)
                pts = np.concatenate([a.history, a.future])
                for frame, (x, y) in enumerate(pts):
                    w.writerow([scene.scene_id, a.agent_id, int(a.agent_id == scene.target_id),
                                frame, _fmt(x), _fmt(y), lane])
            for lane in scene.map.lanes:
                succ = list(lane.successors) or [""]
                for idx, (x, y) in enumerate(lane.points):
                    # one successor per row on the first rows, blank afterwards
                    s = succ[idx] if idx < len(succ) else ""
                    lw.writerow([scene.scene_id, lane.lane_id, idx, _fmt(x), _fmt(y), s])


def _read_lanes(path: Path) -> dict[str | None, list[Lane]]:
    """Lanes grouped by scene id; ``None`` keys a map shared by every scene."""
    if not path.exists():
        return {}
    raw: dict[str | None, dict[int, dict]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        header = [h.strip() for h in header]
        scoped = "scene_id" in header
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            rec = dict(zip(header, row))
            try:
                sid = rec["scene_id"] if scoped else None
                lane_id = int(rec["lane_id"])
                idx = int(rec["point_index"])
                x, y = float(rec["x"]), float(rec["y"])
                succ = rec.get("successor_lane_id", "").strip()
            except (KeyError, ValueError) as exc:
                raise IngestError(f"malformed lane row ({exc})", line=lineno) from None
            entry = raw.setdefault(sid, {}).setdefault(lane_id, {"pts": {}, "succ": []})
            entry["pts"][idx] = (x, y)
            if succ:
                entry["succ"].append(int(succ))
    out: dict[str | None, list[Lane]] = {}
    for sid, lanes in raw.items():
        built = []
        for lane_id, entry in lanes.items():
            order = sorted(entry["pts"])
            pts = np.array([entry["pts"][i] for i in order], dtype=np.float64)
            built.append(Lane(lane_id, pts, tuple(entry["succ"])))
        out[sid] = built
    return out


def ingest_scenes(path: str | Path, v_max: float = 40.0) -> list[Scene]:
    """Parse the comma-separated scene format, one Scene per scene_id group."""
    path = Path(path)
    lanes_by_scene = _read_lanes(lanes_path_for(path))
    groups: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        missing = [c for c in SCENE_COLUMNS[:-1] if c not in header]
        if missing:
            raise IngestError(f"missing columns {missing}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header) - ("lane_id" in header):
                raise IngestError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            rec = dict(zip(header, row))
            sid = rec["scene_id"]
            try:
                agent_id = int(rec["agent_id"])
                is_target = int(rec["is_target"])
                frame = int(rec["frame"])
                x, y = float(rec["x"]), float(rec["y"])
                lane_raw = (rec.get("lane_id") or "").strip()
                lane_id = int(lane_raw) if lane_raw else None
            except ValueError as exc:
                raise IngestError(f"malformed row ({exc})", line=lineno, scene_id=sid) from None
            if is_target not in (0, 1):
                raise IngestError("is_target must be 0 or 1", line=lineno, scene_id=sid)
            if not (math.isfinite(x) and math.isfinite(y)):
                raise IngestError("non-finite coordinate", line=lineno, scene_id=sid)
            g = groups.setdefault(sid, {"agents": {}, "targets": set(), "first_line": lineno})
            ag = g["agents"].setdefault(agent_id, {"frames": {}, "lane": lane_id, "line": lineno})
            if frame in ag["frames"]:
                raise IngestError(f"agent {agent_id} repeats frame {frame}", line=lineno, scene_id=sid)
            ag["frames"][frame] = (x, y)
            if is_target:
                g["targets"].add(agent_id)

    scenes = []
    n_frames = HISTORY_LEN + FUTURE_LEN
    for sid, g in groups.items():
        if len(g["targets"]) != 1:
            what = "no target agent" if not g["targets"] else f"multiple targets {sorted(g['targets'])}"
            raise IngestError(what, line=g["first_line"], scene_id=sid)
        agents = []
        for agent_id, ag in g["agents"].items():
            frames = ag["frames"]
            n_hist = sum(1 for f in frames if 0 <= f < HISTORY_LEN)
            n_fut = sum(1 for f in frames if HISTORY_LEN <= f < n_frames)
            if n_hist != HISTORY_LEN or n_fut != FUTURE_LEN or len(frames) != n_frames:
                raise IngestError(
                    f"agent {agent_id} has {n_hist} history and {n_fut} future points, "
                    f"expected {HISTORY_LEN} and {FUTURE_LEN}",
                    line=ag["line"], scene_id=sid,
                )
            pts = np.array([frames[f] for f in range(n_frames)], dtype=np.float64)
            hist, fut = _split(pts)
            agents.append(Agent(agent_id, hist, fut, ag["lane"]))
        lanes = lanes_by_scene.get(sid, lanes_by_scene.get(None, []))
        scene = Scene(sid, tuple(agents), next(iter(g["targets"])), MapContext(tuple(lanes)))
        try:
            validate_scene(scene, v_max=v_max)
        except ScenarioError as exc:
            raise IngestError(str(exc), line=g["first_line"], scene_id=sid) from None
        scenes.append(scene)
    return scenes


# ---------------------------------------------------------------------------
# semantic labels

def _heading(points: np.ndarray) -> np.ndarray | None:
    for a, b in zip(points[:-1], points[1:]):
        d = b - a
        n = math.hypot(d[0], d[1])
        if n > 1e-9:
            return d / n
    return None


def _speed(history: np.ndarray) -> float:
    d = history[-1] - history[-2]
    return math.hypot(d[0], d[1]) / DT


def compute_time_headway(scene: Scene, cfg: LabelConfig = LabelConfig()) -> float | None:
    """Gap to the nearest same-lane agent ahead divided by the target speed.

    Returns None when nothing is ahead within the sensing range or the target
    is (nearly) stopped.
    """
    target = scene.target
    speed = _speed(target.history)
    if speed < cfg.min_speed:
        return None
    heading = _heading(target.history[-2:])
    if heading is None:
        heading = _heading(target.history)
    if heading is None:
        return None
    lateral_axis = np.array([heading[1], -heading[0]])
    pos = target.history[-1]
    best = None
    for other in scene.others:
        rel = other.history[-1] - pos
        gap = float(rel @ heading)
        if gap <= 0 or gap > cfg.sensing_range:
            continue
        if target.lane_id is not None and other.lane_id is not None:
            same_lane = target.lane_id == other.lane_id
        else:
            same_lane = abs(float(rel @ lateral_axis)) < cfg.lane_half_width
        if same_lane and (best is None or gap < best):
            best = gap
    if best is None:
        return None
    return best / speed


def label_lateral_intention(scene: Scene, cfg: LabelConfig = LabelConfig()) -> Intent | None:
    """Forward / Left / Right from the target's lateral displacement.

    Future waypoints are measured from the first observed position along the
    right-pointing normal of the heading at the start of the observed window,
    so a maneuver counts once it is held for ``hold_s`` at the end of the
    horizon.
    """
    target = scene.target
    heading = _heading(target.history)
    if heading is None:
        heading = _heading(target.future)
    if heading is None:
        return Intent.FORWARD
    right = np.array([heading[1], -heading[0]])
    lat = (target.future - target.history[0]) @ right
    hold = int(round(cfg.hold_s / DT))
    for sign, intent in ((1.0, Intent.RIGHT), (-1.0, Intent.LEFT)):
        run = 0
        for v in (sign * lat)[::-1]:
            if v >= cfg.d_min:
                run += 1
            else:
                break
        if run >= hold:
            return intent
    if np.max(np.abs(lat)) <= cfg.d_fwd:
        return Intent.FORWARD
    return None


def semantic_labels(scene: Scene, cfg: LabelConfig = LabelConfig()) -> SemanticLabels:
    return SemanticLabels(compute_time_headway(scene, cfg), label_lateral_intention(scene, cfg))
