"""
Velocity models ``v(z, cond, t)`` and classifier-free guidance.

Three implementations share the :class:`VelocityModel` contract:

- :class:`GaussianFlowModel` -- the exact marginal velocity when grids are ``N(M cond, s^2 I)``; an analytic oracle.
- :class:`LinearFlowModel` -- ``A z + B cond + b``, for which the edit delta cancels noise exactly.
- :class:`TinyFlowNet` -- a small convolutional network trained by flow matching.

All models take and return numpy arrays in the grid's channel-last layout.
"""

from __future__ import annotations

import abc
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import param
import torch
import torch.nn.functional as F
from torch import nn

from mvgrid_edit.definitions import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    DEFAULT_CFG_SRC,
    DEFAULT_CFG_TAR,
    DEFAULT_TILE_SIZE,
    GRID_COLS,
    GRID_ROWS,
    N_CHANNELS,
    N_VIEWS,
    NET_CHANNELS,
    NET_KERNEL_SIZE,
    NET_LAYERS,
    TIME_EMBEDDING_DIM,
)
from mvgrid_edit.errors import ConfigError, DataError, ShapeError
from mvgrid_edit.processing.mvgrid import broadcast_view
from mvgrid_edit.processing.schedule import add_noise


class VelocityModel(abc.ABC):
    """Contract for ``v(z, cond, t)``: deterministic, shape preserving, finite for finite inputs."""

    #: whether ``predict_raw`` may be called with the all-zero null view
    has_unconditional: bool = True

    @abc.abstractmethod
    def predict_raw(self, z: np.ndarray, cond: np.ndarray, t: float) -> np.ndarray:
        """Velocity for a noised grid ``z`` of shape (3s, 2s, 3), condition view (s, s, 3) and time ``t``."""


class GuidanceConfig(param.Parameterized):
    cfg_tar = param.Number(default=DEFAULT_CFG_TAR, bounds=(0, None), doc="guidance weight of the target branch")
    cfg_src = param.Number(default=DEFAULT_CFG_SRC, bounds=(0, None), doc="guidance weight of the source branch")


def predict(model: VelocityModel, z: np.ndarray, cond: np.ndarray, t: float, w: float = 1.0) -> np.ndarray:
    """
    Guided velocity ``v_uncond + w (v_cond - v_uncond)``; the unconditional input is the all-zero view.

    ``w == 1`` returns the conditional prediction itself, without the extra evaluation.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if not math.isfinite(w) or w < 0:
        raise ConfigError(f"guidance weight must be finite and >= 0, got {w}")
    v_cond = model.predict_raw(z, cond, t)
    if w == 1.0:
        return v_cond
    if not model.has_unconditional:
        raise ConfigError(f"{type(model).__name__} has no unconditional prediction, guidance weight must be 1")
    v_uncond = model.predict_raw(z, np.zeros_like(cond), t)
    return v_uncond + w * (v_cond - v_uncond)


class TileMap:
    """
    Linear map from view values to grid values: tile ``k`` of the output is the view mixed by ``weights[k]``.

    ``weights`` has shape (6, 3, 3); output channel ``c`` of tile ``k`` is ``sum_d weights[k, c, d] * view[..., d]``.
    """

    def __init__(self, weights):
        weights = np.array(weights, dtype=np.float64)
        if weights.shape != (N_VIEWS, N_CHANNELS, N_CHANNELS):
            expected = (N_VIEWS, N_CHANNELS, N_CHANNELS)
            raise ShapeError(f"tile map weights must have shape {expected}, got {weights.shape}")
        weights.setflags(write=False)
        self.weights = weights

    @classmethod
    def identity(cls, scale: float = 1.0) -> TileMap:
        return cls(np.broadcast_to(scale * np.eye(N_CHANNELS), (N_VIEWS, N_CHANNELS, N_CHANNELS)))

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 1.0, spread: float = 0.1) -> TileMap:
        """Per-tile perturbations of ``scale * I``, so every tile sees a different linear function of the view."""
        return cls(scale * np.eye(N_CHANNELS) + spread * rng.standard_normal((N_VIEWS, N_CHANNELS, N_CHANNELS)))

    def pixel_weights(self, tile_size: int) -> np.ndarray:
        """Per-pixel channel mixes of a grid, shape (3s, 2s, 3, 3)."""
        blocks = self.weights.reshape(GRID_ROWS, GRID_COLS, N_CHANNELS, N_CHANNELS)
        return np.repeat(np.repeat(blocks, tile_size, axis=0), tile_size, axis=1)

    def __call__(self, view: np.ndarray) -> np.ndarray:
        view = np.asarray(view, dtype=np.float64)
        return np.einsum("...hwd,hwcd->...hwc", broadcast_view(view), self.pixel_weights(view.shape[-2]))


def gaussian_velocity(z, cond, t: float, mean_map: Callable[[np.ndarray], np.ndarray], data_std: float):
    """
    Exact marginal velocity ``E[n - x | z_t = z]`` for ``x ~ N(M cond, s^2 I)``, ``n ~ N(0, I)``.

    With ``a = 1 - t`` and ``D = a^2 s^2 + t^2`` the posterior means are
    ``E[x | z] = mu + a s^2 / D (z - a mu)`` and ``E[n | z] = t / D (z - a mu)``, so
    ``v = (t - a s^2) / D (z - a mu) - mu``. Works on arrays of any shape that ``mean_map(cond)`` broadcasts to.

    >>> float(gaussian_velocity(np.array(1.0), np.array(0.0), 0.5, lambda c: c, 1.0))
    0.0
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if data_std < 0:
        raise ValueError(f"data_std must be nonnegative, got {data_std}")
    a = 1.0 - t
    denom = a * a * data_std * data_std + t * t
    if denom == 0.0:
        raise ValueError("posterior is degenerate for t = 0 and data_std = 0")
    mu = mean_map(cond)
    return (t - a * data_std * data_std) / denom * (z - a * mu) - mu


class GaussianFlowModel(VelocityModel):
    def __init__(self, mean_map: TileMap, data_std: float):
        if not data_std > 0:
            raise ConfigError(f"data_std must be positive, got {data_std}")
        self.mean_map = mean_map
        self.data_std = float(data_std)

    def predict_raw(self, z, cond, t):
        return gaussian_velocity(z, cond, t, self.mean_map, self.data_std)


class LinearFlowModel(VelocityModel):
    """
    Time independent affine field ``A z + B cond + b``.

    ``A`` is a 3x3 channel mix applied at every pixel, ``B`` a :class:`TileMap` and ``b`` a grid-shaped offset.
    """

    def __init__(self, A, B: TileMap, b):
        A = np.array(A, dtype=np.float64)
        if A.shape != (N_CHANNELS, N_CHANNELS):
            raise ShapeError(f"A must be a {N_CHANNELS}x{N_CHANNELS} channel mix, got {A.shape}")
        b = np.array(b, dtype=np.float64)
        A.setflags(write=False)
        b.setflags(write=False)
        self.A = A
        self.B = B
        self.b = b

    def predict_raw(self, z, cond, t):
        z = np.asarray(z, dtype=np.float64)
        if self.b.shape and self.b.shape != z.shape:
            raise ShapeError(f"offset b has shape {self.b.shape}, grid has {z.shape}")
        return z @ self.A.T + self.B(cond) + self.b


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of times in [0, 1] (scaled to [0, 1000]), shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TinyFlowNet(VelocityModel, nn.Module):
    """
    Conditional velocity network.

    Input channels are the noised grid, the condition view tiled into all six slots, and a sinusoidal embedding
    of ``t`` broadcast over the grid; ``layers`` 3x3 convolutions with SiLU in between map them to a velocity grid.
    Runs in float64.
    """

    def __init__(
        self,
        tile_size: int = DEFAULT_TILE_SIZE,
        layers: int = NET_LAYERS,
        channels: int = NET_CHANNELS,
        kernel_size: int = NET_KERNEL_SIZE,
        time_dim: int = TIME_EMBEDDING_DIM,
        seed: int = 0,
    ):
        nn.Module.__init__(self)
        if layers < 2 or channels < 1 or kernel_size % 2 == 0 or time_dim % 2:
            raise ConfigError(
                f"invalid architecture: layers={layers}, channels={channels}, kernel={kernel_size}, time_dim={time_dim}"
            )
        self.tile_size = tile_size
        self.architecture = {"layers": layers, "channels": channels, "kernel_size": kernel_size, "time_dim": time_dim}
        self.seed = seed
        widths = [2 * N_CHANNELS + time_dim] + [channels] * (layers - 1) + [N_CHANNELS]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.convs = nn.ModuleList(
                nn.Conv2d(w_in, w_out, kernel_size, padding=kernel_size // 2) for w_in, w_out in zip(widths, widths[1:])
            )
        self.double()

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, z: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Batched, channel-last: z (B, 3s, 2s, 3), cond (B, s, s, 3), t (B,) -> (B, 3s, 2s, 3)."""
        batch, height, width, _ = z.shape
        cond_grid = torch.from_numpy(broadcast_view(cond.detach().numpy()))
        emb = time_embedding(t, self.architecture["time_dim"])[:, :, None, None].expand(-1, -1, height, width)
        h = torch.cat([z.permute(0, 3, 1, 2), cond_grid.permute(0, 3, 1, 2), emb], dim=1)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.silu(h)
        return h.permute(0, 2, 3, 1)

    def predict_raw(self, z, cond, t):
        with torch.no_grad():
            out = self(
                torch.from_numpy(np.array(z, dtype=np.float64))[None],
                torch.from_numpy(np.array(cond, dtype=np.float64))[None],
                torch.tensor([float(t)], dtype=torch.float64),
            )
        return out[0].numpy()

    def header(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "architecture": dict(self.architecture),
            "tile_size": self.tile_size,
            "seed": self.seed,
            "parameters": [{"name": name, "shape": list(p.shape)} for name, p in self.named_parameters()],
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        buffer = io.BytesIO()
        buffer.write(CHECKPOINT_MAGIC)
        buffer.write(np.array([CHECKPOINT_VERSION, len(header)], dtype="<u4").tobytes())
        buffer.write(header)
        for _, p in self.named_parameters():
            buffer.write(np.ascontiguousarray(p.detach().numpy(), dtype="<f8").tobytes())
        return buffer.getvalue()

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes, tile_size: Optional[int] = None) -> TinyFlowNet:
        prefix = len(CHECKPOINT_MAGIC)
        if data[:prefix] != CHECKPOINT_MAGIC or len(data) < prefix + 8:
            raise DataError("not a model checkpoint (bad magic)")
        version, header_len = (int(v) for v in np.frombuffer(data[prefix : prefix + 8], dtype="<u4"))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        try:
            header = json.loads(data[prefix + 8 : prefix + 8 + header_len].decode("utf-8"))
            model = cls(tile_size=header["tile_size"], seed=header["seed"], **header["architecture"])
            stored = [(entry["name"], list(entry["shape"])) for entry in header["parameters"]]
        except (ValueError, KeyError, TypeError) as err:
            raise DataError(f"malformed checkpoint header: {err}") from err
        if tile_size is not None and model.tile_size != tile_size:
            raise DataError(f"checkpoint was trained at tile size {model.tile_size}, data has {tile_size}")
        expected = [(name, list(p.shape)) for name, p in model.named_parameters()]
        if stored != expected:
            raise DataError("checkpoint parameters do not match the architecture in its header")
        offset = prefix + 8 + header_len
        if len(data) != offset + 8 * model.parameter_count:
            raise DataError("checkpoint has trailing or missing bytes")
        with torch.no_grad():
            for _, p in model.named_parameters():
                count = p.numel()
                values = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
                p.copy_(torch.from_numpy(values.reshape(p.shape).copy()))
                offset += 8 * count
        return model

    @classmethod
    def load(cls, path: Path | str, tile_size: Optional[int] = None) -> TinyFlowNet:
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as err:
            raise DataError(f"could not read checkpoint {path}: {err}") from err
        return cls.from_bytes(data, tile_size=tile_size)


@dataclass(frozen=True)
class FlowSample:
    """One flow-matching record: clean grid, its condition view, time and noises (channel-last arrays)."""

    x0: np.ndarray
    cond: np.ndarray
    t: float
    n: np.ndarray
    n_cond: Optional[np.ndarray] = None


def flow_matching_loss(model: Callable, batch: Sequence[FlowSample]) -> torch.Tensor:
    """
    Mean over the batch of ``||model(z_t, cond_t, t) - (n - x0)||^2 / N`` with ``z_t = add_noise(x0, n, t)``.

    The condition is noised with ``n_cond`` at the same ``t`` when the record carries one.
    """
    if len(batch) == 0:
        raise ValueError("flow matching loss needs a nonempty batch")
    z = np.stack([add_noise(s.x0, s.n, s.t) for s in batch])
    cond = np.stack([s.cond if s.n_cond is None else add_noise(s.cond, s.n_cond, s.t) for s in batch])
    target = torch.as_tensor(np.stack([s.n - s.x0 for s in batch]))
    t = torch.tensor([s.t for s in batch], dtype=torch.float64)
    pred = model(torch.as_tensor(z), torch.as_tensor(cond), t)
    return ((pred - target) ** 2).flatten(start_dim=1).mean(dim=1).mean()

