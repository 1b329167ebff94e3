"""RCPQNet - coupling-parameter network of the conditional flow.

Inputs per window:
  x_b   (B, T/2, N, 2)  conditioning half of the point window
  s     (B, T, S)       normalized robot state, all T frames
  tau   (B, T)          task embedding

Robot-state queries (one per frame) are FiLM-modulated by tau and attend to a
memory built from two point branches:
  shape     per-frame centered, RMS-normalized points → point MLP → mean-pool → GRU
  position  raw points → point MLP → mean-pool, plus (cx, cy, r) → MLP → GRU
The decoder output at the frames being transformed goes through a
zero-initialized linear head giving (a, b) per point coordinate;
gamma = softplus(a) + GAMMA_FLOOR, beta = b.

Everything runs in float64. Eval-mode calls on identical inputs are bitwise
reproducible on a fixed platform and thread count.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .const import (
    DEFAULT_D_MODEL,
    DEFAULT_DROPOUT,
    DEFAULT_GRU_LAYERS,
    DEFAULT_HEADS,
    DEFAULT_MLP_HIDDEN,
    DEGENERATE_RADIUS,
    GAMMA_FLOOR,
)
from .exceptions import InvalidDimensionsError, ShapeMismatchError, UninitializedWeightsError

_LOGGER = logging.getLogger(__name__)

SHAPE_BRANCH = 0
POSITION_BRANCH = 1


@dataclass(frozen=True)
class RCPQConfig:
    T: int
    N: int
    state_dim: int
    d_model: int = DEFAULT_D_MODEL
    heads: int = DEFAULT_HEADS
    gru_layers: int = DEFAULT_GRU_LAYERS
    mlp_hidden: int = DEFAULT_MLP_HIDDEN
    dropout: float = DEFAULT_DROPOUT
    use_task_embedding: bool = True
    use_robot_state: bool = True
    use_shape_branch: bool = True
    use_position_branch: bool = True

    def __post_init__(self) -> None:
        if self.T < 2 or self.T % 2:
            raise InvalidDimensionsError(f"T must be even and >= 2, got {self.T}")
        for name in ("N", "state_dim", "d_model", "heads", "gru_layers", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise InvalidDimensionsError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise InvalidDimensionsError(
                f"d_model={self.d_model} is not divisible by heads={self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidDimensionsError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (self.use_shape_branch or self.use_position_branch):
            raise InvalidDimensionsError("at least one point branch must stay enabled")

    @property
    def half(self) -> int:
        return self.T // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RCPQConfig":
        return cls(**data)


class CouplingParams(NamedTuple):
    gamma: Tensor   # (B, T/2, N, 2), > 0
    beta: Tensor    # (B, T/2, N, 2)


def normalize_frames(x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Center each frame on its centroid and divide by its RMS radius.

    Returns (normalized, centroid (.., 2), radius (..), degenerate mask).
    Frames whose radius is below DEGENERATE_RADIUS use radius 1.
    """
    centroid = x.mean(dim=-2)
    centered = x - centroid.unsqueeze(-2)
    mean_sq = centered.pow(2).sum(dim=-1).mean(dim=-1)
    degenerate = mean_sq < DEGENERATE_RADIUS ** 2
    # substitute before the sqrt so no gradient flows through sqrt(0)
    radius = torch.where(degenerate, torch.ones_like(mean_sq), mean_sq).sqrt()
    return centered / radius[..., None, None], centroid, radius, degenerate


def _point_mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))


class RCPQNet(nn.Module):
    """Maps (x_b, s, tau) to affine coupling parameters for the other half."""

    def __init__(self, config: RCPQConfig, seed: int | None = None, *, initialize: bool = True) -> None:
        super().__init__()
        self.config = config
        if seed is None:
            self._build()
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                self._build()
        self.register_buffer("weights_ready", torch.tensor(bool(initialize)))
        self.double()

    def _build(self) -> None:
        cfg = self.config
        d, h = cfg.d_model, cfg.mlp_hidden

        self.state_proj = nn.Linear(cfg.state_dim, d)
        self.film = nn.Linear(cfg.T, 2 * d)
        self.query_pos = nn.Parameter(torch.randn(cfg.T, d) * 0.02)

        self.shape_mlp = _point_mlp(2, h, d)
        self.shape_gru = nn.GRU(d, d, num_layers=cfg.gru_layers, batch_first=True)
        self.position_point_mlp = _point_mlp(2, h, d)
        self.position_stats_mlp = _point_mlp(3, h, d)
        self.position_gru = nn.GRU(d, d, num_layers=cfg.gru_layers, batch_first=True)
        self.frame_pos = nn.Parameter(torch.randn(cfg.half, d) * 0.02)
        self.branch_embed = nn.Parameter(torch.randn(2, d) * 0.02)

        # sequence-first: eval and training run the same kernels
        self.memory_encoder = nn.TransformerEncoderLayer(
            d, cfg.heads, dim_feedforward=h, dropout=cfg.dropout,
            activation="gelu", batch_first=False,
        )
        self.cross_attention = nn.TransformerDecoderLayer(
            d, cfg.heads, dim_feedforward=h, dropout=cfg.dropout,
            activation="gelu", batch_first=True,
        )
        self.head = nn.Linear(d, cfg.N * 2 * 2)

        # FiLM starts as the identity: scale 1, shift 0
        nn.init.zeros_(self.film.weight)
        with torch.no_grad():
            self.film.bias.copy_(torch.cat([torch.ones(d), torch.zeros(d)]))
        # zero head: gamma = softplus(0) + floor, beta = 0
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    # ── Conditioning ─────────────────────────────────────────────────

    def film_modulate(self, robot_features: Tensor, tau: Tensor) -> Tensor:
        """scale(tau) ⊙ features + shift(tau), shared across frames."""
        d = self.config.d_model
        if robot_features.shape[-1] != d or tau.shape[-1] != self.config.T:
            raise ShapeMismatchError(
                f"FiLM expects features (.., {d}) and tau (.., {self.config.T}), "
                f"got {tuple(robot_features.shape)} and {tuple(tau.shape)}"
            )
        params = self.film(tau)
        scale, shift = params[..., :d], params[..., d:]
        return scale.unsqueeze(-2) * robot_features + shift.unsqueeze(-2)

    # ── Point branches ───────────────────────────────────────────────

    def frame_features(self, x_b: Tensor) -> tuple[Tensor, Tensor]:
        """Per-frame pooled features of both branches, before the GRUs."""
        normalized, centroid, radius, degenerate = normalize_frames(x_b)
        if bool(degenerate.any()):
            _LOGGER.warning(
                "%d degenerate point frame(s), radius 1 substituted", int(degenerate.sum())
            )
        shape = self.shape_mlp(normalized).mean(dim=-2)
        stats = torch.cat([centroid, radius.unsqueeze(-1)], dim=-1)
        position = self.position_point_mlp(x_b).mean(dim=-2) + self.position_stats_mlp(stats)
        return shape, position

    def encode_points(self, x_b: Tensor) -> tuple[Tensor, Tensor]:
        """(shape_feats, residual_feats), each (B, T/2, d_model)."""
        shape, position = self.frame_features(x_b)
        shape_feats, _ = self.shape_gru(shape)
        residual_feats, _ = self.position_gru(position)
        return shape_feats, residual_feats

    def _memory(self, x_b: Tensor) -> Tensor:
        shape_feats, residual_feats = self.encode_points(x_b)
        tokens = []
        if self.config.use_shape_branch:
            tokens.append(shape_feats + self.frame_pos + self.branch_embed[SHAPE_BRANCH])
        if self.config.use_position_branch:
            tokens.append(residual_feats + self.frame_pos + self.branch_embed[POSITION_BRANCH])
        tokens = torch.cat(tokens, dim=1).transpose(0, 1)
        return self.memory_encoder(tokens).transpose(0, 1)

    # ── Coupling parameters ──────────────────────────────────────────

    def forward(self, x_b: Tensor, s: Tensor, tau: Tensor, target_half: int = 1) -> CouplingParams:
        """Coupling parameters for the frames of ``target_half`` (0 first, 1 second)."""
        if not bool(self.weights_ready):
            raise UninitializedWeightsError("RCPQNet weights were never initialized or loaded")
        cfg = self.config
        if x_b.shape[1:] != (cfg.half, cfg.N, 2):
            raise ShapeMismatchError(
                f"x_b must be (B, {cfg.half}, {cfg.N}, 2), got {tuple(x_b.shape)}"
            )
        if s.shape[1:] != (cfg.T, cfg.state_dim):
            raise ShapeMismatchError(
                f"s must be (B, {cfg.T}, {cfg.state_dim}), got {tuple(s.shape)}"
            )
        if not cfg.use_robot_state:
            s = torch.zeros_like(s)
        if not cfg.use_task_embedding:
            tau = torch.zeros_like(tau)

        queries = self.film_modulate(self.state_proj(s), tau) + self.query_pos
        decoded = self.cross_attention(queries, self._memory(x_b))
        start = target_half * cfg.half
        raw = self.head(decoded[:, start:start + cfg.half])
        raw = raw.reshape(raw.shape[0], cfg.half, cfg.N, 2, 2)
        gamma = F.softplus(raw[..., 0]) + GAMMA_FLOOR
        return CouplingParams(gamma=gamma, beta=raw[..., 1])

    def coupling_params(self, x_b: Tensor, s: Tensor, tau: Tensor, target_half: int = 1) -> CouplingParams:
        return self(x_b, s, tau, target_half)
