"""Trajectory predictor with a semantic adversarial-autoencoder latent head.

Pipeline: feature extractor -> encoder -> (z_lon, z_lat, z_other) -> decoder.
A discriminator per latent group judges encoder outputs against prior
samples. Everything runs in float64 so finite-difference checks are tight.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call

from .errors import CheckpointError, NonFiniteError, WidthMismatchError
from .scenario import DT, FUTURE_LEN, HISTORY_LEN, Intent, Scene, SemanticLabels

DTYPE = torch.float64
GROUPS = ("lon", "lat", "other")
N_INTENTS = 3

# log-normal time headway prior (location, scale of the underlying normal)
HEADWAY_MU = 0.0682
HEADWAY_SIGMA = 0.647

D_CLAMP = 1e-7
POS_SCALE = 10.0


# ---------------------------------------------------------------------------
# batching

@dataclass
class SceneBatch:
    """Padded tensors for a set of scenes (target-centric coordinates)."""

    history: torch.Tensor        # (B, H, 2) target history
    neighbors: torch.Tensor      # (B, N, 4) last position + previous position of each neighbor
    neighbor_mask: torch.Tensor  # (B, N)
    segments: torch.Tensor       # (B, S, 2, 2) lane segments
    segment_mask: torch.Tensor   # (B, S)
    future: torch.Tensor         # (B, F, 2) target ground truth
    headway: torch.Tensor        # (B,) NaN when absent
    intent: torch.Tensor         # (B,) long, -1 when absent

    def __len__(self):
        return self.history.shape[0]

    def index(self, idx) -> "SceneBatch":
        if isinstance(idx, (list, np.ndarray)):
            idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return SceneBatch(*(getattr(self, f.name)[idx] for f in fields(self)))

    def with_history(self, history: torch.Tensor) -> "SceneBatch":
        out = SceneBatch(*(getattr(self, f.name) for f in fields(self)))
        out.history = history
        return out


def collate(scenes: Sequence[Scene], labels: Sequence[SemanticLabels] | None = None) -> SceneBatch:
    n = len(scenes)
    max_nb = max(1, max(len(s.agents) - 1 for s in scenes))
    max_seg = max(1, max(len(s.map.segments()) for s in scenes))
    history = np.zeros((n, HISTORY_LEN, 2))
    future = np.zeros((n, FUTURE_LEN, 2))
    neighbors = np.zeros((n, max_nb, 4))
    nb_mask = np.zeros((n, max_nb))
    segments = np.zeros((n, max_seg, 2, 2))
    seg_mask = np.zeros((n, max_seg))
    headway = np.full(n, np.nan)
    intent = np.full(n, -1, dtype=np.int64)
    for i, scene in enumerate(scenes):
        target = scene.target
        history[i] = target.history
        future[i] = target.future
        for j, other in enumerate(scene.others):
            neighbors[i, j, :2] = other.history[-1]
            neighbors[i, j, 2:] = other.history[-2]
            nb_mask[i, j] = 1.0
        segs = scene.map.segments()
        segments[i, : len(segs)] = segs
        seg_mask[i, : len(segs)] = 1.0
        if labels is not None:
            lab = labels[i]
            if lab.headway_s is not None:
                headway[i] = lab.headway_s
            if lab.lateral_intent is not None:
                intent[i] = int(lab.lateral_intent)
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    return SceneBatch(t(history), t(neighbors), t(nb_mask), t(segments), t(seg_mask), t(future),
                      t(headway), torch.as_tensor(intent))


def _as_batch(scene_or_batch) -> SceneBatch:
    if isinstance(scene_or_batch, SceneBatch):
        return scene_or_batch
    return collate([scene_or_batch])


# ---------------------------------------------------------------------------
# latent state and priors

@dataclass
class LatentState:
    z_lon: torch.Tensor    # (B,) positive
    z_lat: torch.Tensor    # (B, 3) simplex over (Forward, Left, Right)
    z_other: torch.Tensor  # (B, K)

    def group(self, name: str) -> torch.Tensor:
        if name == "lon":
            return self.z_lon.unsqueeze(-1)
        if name == "lat":
            return self.z_lat
        if name == "other":
            return self.z_other
        raise KeyError(name)

    def vector(self) -> torch.Tensor:
        return torch.cat([self.z_lon.unsqueeze(-1), self.z_lat, self.z_other], dim=-1)

    def intents(self) -> list[Intent]:
        return [Intent(int(k)) for k in torch.argmax(self.z_lat, dim=-1)]

    def detach(self) -> "LatentState":
        return LatentState(self.z_lon.detach(), self.z_lat.detach(), self.z_other.detach())


@dataclass(frozen=True)
class PriorSpec:
    lon_mu: float = HEADWAY_MU
    lon_sigma: float = HEADWAY_SIGMA
    lat_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    other_width: int = 16

    def __post_init__(self):
        if not (math.isfinite(self.lon_mu) and math.isfinite(self.lon_sigma) and self.lon_sigma > 0):
            raise ValueError("log-normal parameters must be finite with positive scale")
        if len(self.lat_probs) != N_INTENTS or abs(sum(self.lat_probs) - 1) > 1e-9 or min(self.lat_probs) < 0:
            raise ValueError(f"lateral prior must be a 3-way distribution, got {self.lat_probs}")


def estimate_lat_prior(labels: Sequence[SemanticLabels], width: int = 16) -> PriorSpec:
    """Prior whose categorical part follows the labeled intent frequencies."""
    counts = np.zeros(N_INTENTS)
    for lab in labels:
        if lab.lateral_intent is not None:
            counts[int(lab.lateral_intent)] += 1
    if counts.sum() == 0:
        return PriorSpec(other_width=width)
    probs = counts / counts.sum()
    probs[-1] = 1.0 - probs[:-1].sum()
    return PriorSpec(lat_probs=tuple(float(p) for p in probs), other_width=width)


def lognormal_pdf(x, mu: float = HEADWAY_MU, sigma: float = HEADWAY_SIGMA):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * ((np.log(x) - mu) / sigma) ** 2) / (x * sigma * math.sqrt(2 * math.pi))


def sample_prior(spec: PriorSpec, group: str, seed, n: int = 1) -> torch.Tensor:
    """``n`` draws from the prior of one latent group, shaped ``(n, width)``."""
    rng = np.random.default_rng(seed)
    if group == "lon":
        out = rng.lognormal(spec.lon_mu, spec.lon_sigma, size=(n, 1))
    elif group == "lat":
        ks = rng.choice(N_INTENTS, size=n, p=np.asarray(spec.lat_probs))
        out = np.eye(N_INTENTS)[ks]
    elif group == "other":
        out = rng.standard_normal((n, spec.other_width))
    else:
        raise ValueError(f"unknown latent group {group!r}; expected one of {GROUPS}")
    return torch.as_tensor(out, dtype=DTYPE)


# ---------------------------------------------------------------------------
# networks

@dataclass(frozen=True)
class ModelConfig:
    feature_width: int = 64
    latent_other_width: int = 16
    conv_channels: int = 16
    neighbor_width: int = 16
    encoder_hidden: int = 64
    decoder_hidden: int = 128
    disc_hidden: int = 32

    @property
    def latent_width(self) -> int:
        return 1 + N_INTENTS + self.latent_other_width


def _nearest_offsets(points: torch.Tensor, segments: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Vector from the closest lane point to each query point, ``(B, Q, 2)``."""
    a = segments[:, None, :, 0, :]
    b = segments[:, None, :, 1, :]
    p = points[:, :, None, :]
    ab = b - a
    denom = (ab * ab).sum(-1).clamp_min(1e-12)
    t = (((p - a) * ab).sum(-1) / denom).clamp(0.0, 1.0)
    d = p - (a + t.unsqueeze(-1) * ab)
    dist = (d * d).sum(-1).masked_fill(mask[:, None, :] <= 0, float("inf"))
    best = dist.argmin(-1)
    off = torch.gather(d, 2, best[..., None, None].expand(-1, -1, 1, 2)).squeeze(2)
    has_lane = (mask.sum(-1) > 0).to(points.dtype)[:, None, None]
    return off * has_lane


class _TemporalConv(nn.Conv1d):
    """Valid-padding dilated 1-D convolution built from shifted slices.

    Same parameters as ``nn.Conv1d``; avoids the slow float64 dilated kernel.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k, d = self.kernel_size[0], self.dilation[0]
        length = x.shape[-1] - d * (k - 1)
        taps = torch.stack([x[..., j * d : j * d + length] for j in range(k)], dim=-1)
        return torch.einsum("bclk,ock->bol", taps, self.weight) + self.bias[:, None]


class ReferenceExtractor(nn.Module):
    """Dilated temporal convolution over the target history, pooled neighbor
    encodings and offsets to the nearest lane centerline."""

    lane_query_frames = (0, HISTORY_LEN // 2, HISTORY_LEN - 1)

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.conv_channels
        self.conv1 = _TemporalConv(4, c, kernel_size=3, dilation=1)
        self.conv2 = _TemporalConv(c, c, kernel_size=3, dilation=2)
        conv_len = HISTORY_LEN - 2 - 4
        self.neighbor = nn.Linear(4, cfg.neighbor_width)
        n_lane = 2 * len(self.lane_query_frames)
        self.out = nn.Linear(c * conv_len + cfg.neighbor_width + n_lane, cfg.feature_width)

    def forward(self, batch: SceneBatch) -> torch.Tensor:
        hist = batch.history
        vel = torch.diff(hist, dim=1, prepend=hist[:, :1])
        seq = torch.cat([hist / POS_SCALE, vel], dim=-1).transpose(1, 2)
        h = torch.tanh(self.conv1(seq))
        h = torch.tanh(self.conv2(h)).flatten(1)

        anchor = hist[:, -1:, :]
        nb = batch.neighbors
        rel = (nb[..., :2] - anchor) / POS_SCALE
        nb_vel = (nb[..., :2] - nb[..., 2:]) / (DT * POS_SCALE)
        enc = torch.tanh(self.neighbor(torch.cat([rel, nb_vel], dim=-1)))
        m = batch.neighbor_mask.unsqueeze(-1)
        pooled = (enc * m).sum(1) / m.sum(1).clamp_min(1.0)

        query = hist[:, list(self.lane_query_frames), :]
        lane = _nearest_offsets(query, batch.segments, batch.segment_mask).flatten(1)
        return torch.tanh(self.out(torch.cat([h, pooled, lane], dim=-1)))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.hidden = nn.Linear(cfg.feature_width, cfg.encoder_hidden)
        self.head = nn.Linear(cfg.encoder_hidden, cfg.latent_width)
        self.feature_width = cfg.feature_width

    def forward(self, x: torch.Tensor) -> LatentState:
        if x.shape[-1] != self.feature_width:
            raise WidthMismatchError(f"feature width {x.shape[-1]} != {self.feature_width}")
        out = self.head(torch.tanh(self.hidden(x)))
        z_lon = torch.exp(out[..., 0].clamp(-20.0, 20.0))
        z_lat = torch.softmax(out[..., 1 : 1 + N_INTENTS], dim=-1)
        return LatentState(z_lon, z_lat, out[..., 1 + N_INTENTS :])


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.latent_width, cfg.decoder_hidden),
            nn.Tanh(),
            nn.Linear(cfg.decoder_hidden, cfg.decoder_hidden),
            nn.Tanh(),
            nn.Linear(cfg.decoder_hidden, FUTURE_LEN * 2),
        )

    def forward(self, z: LatentState) -> torch.Tensor:
        out = self.net(z.vector()) * POS_SCALE
        return out.reshape(*out.shape[:-1], FUTURE_LEN, 2)


class Discriminator(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.width = width
        self.net = nn.Sequential(nn.Linear(width, hidden), nn.Tanh(), nn.Linear(hidden, 1))

    def forward(self, value: torch.Tensor) -> torch.Tensor:
        if value.shape[-1] != self.width:
            raise WidthMismatchError(f"discriminator expects width {self.width}, got {value.shape[-1]}")
        p = torch.sigmoid(self.net(value).squeeze(-1))
        return p.clamp(D_CLAMP, 1.0 - D_CLAMP)


class PredictorModel(nn.Module):
    schema_version = 1

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.extractor = ReferenceExtractor(cfg)
            self.encoder = Encoder(cfg)
            self.decoder = Decoder(cfg)
            self.discriminators = nn.ModuleDict({
                "lon": Discriminator(1, cfg.disc_hidden),
                "lat": Discriminator(N_INTENTS, cfg.disc_hidden),
                "other": Discriminator(cfg.latent_other_width, cfg.disc_hidden),
            })
        self.to(DTYPE)

    def generator_parameters(self):
        for mod in (self.extractor, self.encoder, self.decoder):
            yield from mod.parameters()

    def discriminator_parameters(self):
        return self.discriminators.parameters()

    def forward(self, batch: SceneBatch) -> tuple[torch.Tensor, LatentState]:
        z = self.encoder(self.extractor(batch))
        return self.decoder(z), z


# ---------------------------------------------------------------------------
# functional surface

def extract_features(model: PredictorModel, scene) -> torch.Tensor:
    return model.extractor(_as_batch(scene))


def encode(model: PredictorModel, x: torch.Tensor) -> LatentState:
    return model.encoder(x)


def decode(model: PredictorModel, z: LatentState) -> torch.Tensor:
    return model.decoder(z)


def predict(model: PredictorModel, scene) -> tuple[torch.Tensor, LatentState]:
    """Predicted future and latent state; batched when given a SceneBatch."""
    z = encode(model, extract_features(model, scene))
    return decode(model, z), z


def predict_numpy(model: PredictorModel, scene: Scene) -> tuple[np.ndarray, Intent]:
    with torch.no_grad():
        traj, z = predict(model, scene)
    return traj[0].numpy(), z.intents()[0]


def discriminate(model: PredictorModel, group: str, value: torch.Tensor) -> torch.Tensor:
    if group not in model.discriminators:
        raise ValueError(f"unknown latent group {group!r}; expected one of {GROUPS}")
    return model.discriminators[group](value)


# ---------------------------------------------------------------------------
# gradient checking

def gradient_check(f: Callable[[torch.Tensor], torch.Tensor], point, step: float = 1e-5,
                   coords: Sequence[int] | None = None) -> float:
    """Largest relative gap between autograd and central differences.

    Relative error is ``|analytic - numeric| / max(1, |analytic|)``. ``coords``
    restricts the comparison to a subset of flat coordinates.
    """
    x = torch.as_tensor(point, dtype=DTYPE).detach().clone().requires_grad_(True)
    y = f(x)
    if not torch.isfinite(y).all():
        raise NonFiniteError("function value is not finite at the check point")
    (grad,) = torch.autograd.grad(y, x, allow_unused=True)
    grad = torch.zeros_like(x) if grad is None else grad
    if not torch.isfinite(grad).all():
        raise NonFiniteError("analytic gradient is not finite")
    flat = x.detach().reshape(-1)
    grad = grad.reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += step
            xm[i] -= step
            fp = f(xp.reshape(x.shape))
            fm = f(xm.reshape(x.shape))
            if not (torch.isfinite(fp) and torch.isfinite(fm)):
                raise NonFiniteError(f"non-finite value while perturbing coordinate {i}")
            numeric = (fp - fm).item() / (2 * step)
            analytic = grad[i].item()
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst


def flat_parameters(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


class _Apply(nn.Module):
    def __init__(self, inner: nn.Module, fn):
        super().__init__()
        self.inner = inner
        self.fn = fn

    def forward(self):
        return self.fn(self.inner)


def as_function_of_parameters(module: nn.Module, fn: Callable[[nn.Module], torch.Tensor]):
    """Wrap ``fn(module)`` as a function of the module's flat parameter vector."""
    named = list(module.named_parameters())
    sizes = [p.numel() for _, p in named]
    wrapper = _Apply(module, fn)

    def wrapped(vec: torch.Tensor) -> torch.Tensor:
        chunks = torch.split(vec, sizes)
        params = {f"inner.{n}": c.reshape(p.shape) for (n, p), c in zip(named, chunks)}
        return functional_call(wrapper, params, ())

    return wrapped


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SSATCKPT"


def save_checkpoint(model: PredictorModel, path: str | Path) -> None:
    """Write the versioned binary checkpoint (little-endian float64 arrays)."""
    buf = io.BytesIO()
    header = "".join(f"{k}={v}\n" for k, v in asdict(model.cfg).items()).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", model.schema_version, len(header)))
    buf.write(header)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", tensor.dim()))
        buf.write(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        data = tensor.detach().cpu().numpy().astype("<f8").reshape(-1)
        buf.write(struct.pack("<Q", data.size))
        buf.write(data.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> PredictorModel:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("checkpoint is truncated")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", take(8))
    if version != PredictorModel.schema_version:
        raise CheckpointError(
            f"checkpoint schema version {version}, this build reads {PredictorModel.schema_version}"
        )
    header = bytes(take(header_len)).decode("utf-8")
    values = dict(line.split("=", 1) for line in header.splitlines() if line)
    known = {f.name for f in fields(ModelConfig)}
    try:
        cfg = ModelConfig(**{k: int(v) for k, v in values.items() if k in known})
    except ValueError as exc:
        raise CheckpointError(f"bad header value: {exc}") from None
    model = PredictorModel(cfg)
    expected = model.state_dict()
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} arrays, model needs {len(expected)}")
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (size,) = struct.unpack("<Q", take(8))
        arr = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(shape)
        if name not in expected or tuple(expected[name].shape) != tuple(shape):
            raise CheckpointError(f"unexpected array {name} with shape {shape}")
        state[name] = torch.from_numpy(arr.astype(np.float64))
    model.load_state_dict(state)
    return model
