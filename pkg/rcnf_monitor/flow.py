"""Conditional normalizing flow over (T, N, 2) point windows.

Each of the K steps applies, in order:
  ActNorm   per-channel affine, data-initialized
  mixing    invertible C×C matrix in PLU form over the channel axis
  coupling  y_t = gamma ⊙ x_t + beta with (gamma, beta) from RCPQNet(x_b, s, tau)

Channel layout: the N points are folded into G = gcd(N, MAX_CHANNEL_GROUPS)
groups so every frame holds N/G positions of C = 2G channels. Point n sits in
group n // (N/G). The temporal axis is left alone, so the coupling can split
it in halves: even steps condition on the first half and transform the
second, odd steps the reverse.

log p(x | s, task) = -(d/2)·ln 2π - ½‖z - mu_task‖² + Σ log|det J_step|,
with d = T·N·2 and mu_task the temporal broadcast of the task embedding.
"""
from __future__ import annotations

import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .artifacts import atomic_write_bytes, dumps_json
from .const import (
    ACTNORM_MIN_VARIANCE,
    CHECKPOINT_FORMAT_VERSION,
    DEFAULT_D_MODEL,
    DEFAULT_DROPOUT,
    DEFAULT_FLOW_STEPS,
    DEFAULT_GRU_LAYERS,
    DEFAULT_HEADS,
    DEFAULT_JOINTS,
    DEFAULT_MLP_HIDDEN,
    DEFAULT_POINTS,
    DEFAULT_WINDOW,
    GAMMA_FLOOR,
    MAX_CHANNEL_GROUPS,
    MIN_ABS_DET,
    state_dim,
)
from .dataset import RobotStateNormalizer
from .exceptions import (
    ActNormAlreadyInitializedError,
    InvalidDimensionsError,
    RCNFValidationError,
    ShapeMismatchError,
    SingularMixingError,
    UninitializedActNormError,
)
from .rcpqnet import RCPQConfig, RCPQNet
from .task_codec import TaskCodebook, embed_task

_LOGGER = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
META_KEY = "__meta__"


@dataclass(frozen=True)
class FlowConfig:
    T: int = DEFAULT_WINDOW
    N: int = DEFAULT_POINTS
    K: int = DEFAULT_FLOW_STEPS
    joints: int = DEFAULT_JOINTS
    d_model: int = DEFAULT_D_MODEL
    heads: int = DEFAULT_HEADS
    gru_layers: int = DEFAULT_GRU_LAYERS
    mlp_hidden: int = DEFAULT_MLP_HIDDEN
    dropout: float = DEFAULT_DROPOUT
    use_task_embedding: bool = True
    use_robot_state: bool = True
    use_shape_branch: bool = True
    use_position_branch: bool = True
    per_dim_score: bool = False

    def __post_init__(self) -> None:
        if self.K < 1:
            raise InvalidDimensionsError(f"K must be >= 1, got {self.K}")
        if self.joints < 1:
            raise InvalidDimensionsError(f"joints must be >= 1, got {self.joints}")
        # validates T, N and the network widths
        self.rcpq_config()

    @property
    def groups(self) -> int:
        return math.gcd(self.N, MAX_CHANNEL_GROUPS)

    @property
    def channels(self) -> int:
        return 2 * self.groups

    @property
    def positions(self) -> int:
        """Channel-vector positions per frame."""
        return self.N // self.groups

    @property
    def dim(self) -> int:
        return self.T * self.N * 2

    @property
    def state_dim(self) -> int:
        return state_dim(self.joints)

    def rcpq_config(self) -> RCPQConfig:
        return RCPQConfig(
            T=self.T,
            N=self.N,
            state_dim=state_dim(self.joints),
            d_model=self.d_model,
            heads=self.heads,
            gru_layers=self.gru_layers,
            mlp_hidden=self.mlp_hidden,
            dropout=self.dropout,
            use_task_embedding=self.use_task_embedding,
            use_robot_state=self.use_robot_state,
            use_shape_branch=self.use_shape_branch,
            use_position_branch=self.use_position_branch,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FlowConfig":
        return cls(**data)


def to_channels(y: Tensor, groups: int) -> Tensor:
    """(B, T, N, 2) → (B, T, N/G, 2G)."""
    B, T, N, _ = y.shape
    P = N // groups
    return y.reshape(B, T, groups, P, 2).permute(0, 1, 3, 2, 4).reshape(B, T, P, 2 * groups)


def to_points(h: Tensor, groups: int) -> Tensor:
    """(B, T, N/G, 2G) → (B, T, N, 2)."""
    B, T, P, _ = h.shape
    return h.reshape(B, T, P, groups, 2).permute(0, 1, 3, 2, 4).reshape(B, T, groups * P, 2)


# ─────────────────────────────────────────────
# Layers
# ─────────────────────────────────────────────

class ActNorm(nn.Module):
    """y = exp(log_scale) · x + bias over the last axis."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(channels, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(channels, dtype=torch.float64))
        self.register_buffer("initialized", torch.tensor(False))

    @property
    def scale(self) -> Tensor:
        return self.log_scale.exp()

    @torch.no_grad()
    def initialize(self, h: Tensor) -> list[int]:
        """Standardize ``h`` per channel; returns the zero-variance channels."""
        if bool(self.initialized):
            raise ActNormAlreadyInitializedError("ActNorm was already initialized")
        flat = h.reshape(-1, h.shape[-1])
        if flat.shape[0] == 0:
            raise RCNFValidationError("ActNorm init needs a nonempty batch")
        mean = flat.mean(dim=0)
        var = flat.var(dim=0, unbiased=False)
        flat_channels = (var < ACTNORM_MIN_VARIANCE).nonzero().flatten().tolist()
        std = torch.where(var < ACTNORM_MIN_VARIANCE, torch.ones_like(var), var.sqrt())
        self.log_scale.copy_(-std.log())
        self.bias.copy_(-mean / std)
        self.initialized.fill_(True)
        if flat_channels:
            _LOGGER.warning("ActNorm channel(s) %s have zero variance, scale fixed at 1", flat_channels)
        return flat_channels

    def forward(self, h: Tensor) -> tuple[Tensor, Tensor]:
        multiplicity = h.shape[1] * h.shape[2]
        log_det = multiplicity * self.log_scale.sum()
        return h * self.scale + self.bias, log_det.expand(h.shape[0])

    def inverse(self, h: Tensor) -> Tensor:
        return (h - self.bias) / self.scale


class InvertibleMixing(nn.Module):
    """Channel mixing y = x @ W with W = P · (L + I) · (U + diag(sign · exp(log_s)))."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        weight, _ = torch.linalg.qr(torch.randn(channels, channels, dtype=torch.float64))
        w_p, w_l, w_u = torch.linalg.lu(weight)
        w_s = torch.diagonal(w_u)
        u_mask = torch.triu(torch.ones(channels, channels, dtype=torch.float64), 1)
        self.register_buffer("w_p", w_p)
        self.register_buffer("u_mask", u_mask)
        self.register_buffer("l_mask", u_mask.T.clone())
        self.register_buffer("s_sign", torch.sign(w_s))
        self.w_l = nn.Parameter(w_l * u_mask.T)
        self.w_u = nn.Parameter(w_u * u_mask)
        self.log_s = nn.Parameter(w_s.abs().log())

    def weight(self) -> Tensor:
        eye = torch.eye(self.w_p.shape[0], dtype=self.w_p.dtype)
        lower = self.w_l * self.l_mask + eye
        upper = self.w_u * self.u_mask + torch.diag(self.s_sign * self.log_s.exp())
        return self.w_p @ lower @ upper

    def log_abs_det(self) -> Tensor:
        return self.log_s.sum()

    def forward(self, h: Tensor) -> tuple[Tensor, Tensor]:
        multiplicity = h.shape[1] * h.shape[2]
        return h @ self.weight(), (multiplicity * self.log_abs_det()).expand(h.shape[0])

    def inverse(self, h: Tensor) -> Tensor:
        if float(self.log_abs_det()) < math.log(MIN_ABS_DET):
            raise SingularMixingError(
                f"mixing determinant {math.exp(float(self.log_abs_det())):.3e} below {MIN_ABS_DET}"
            )
        return h @ torch.linalg.inv(self.weight())

    @torch.no_grad()
    def set_identity(self) -> None:
        channels = self.w_p.shape[0]
        self.w_p.copy_(torch.eye(channels, dtype=torch.float64))
        self.s_sign.fill_(1.0)
        self.w_l.zero_()
        self.w_u.zero_()
        self.log_s.zero_()


class FlowStep(nn.Module):
    def __init__(self, config: FlowConfig, index: int) -> None:
        super().__init__()
        self.index = index
        self.groups = config.groups
        self.half = config.T // 2
        self.actnorm = ActNorm(config.channels)
        self.mixing = InvertibleMixing(config.channels)
        self.coupling = RCPQNet(config.rcpq_config())

    @property
    def target_half(self) -> int:
        """Half of the time axis this step transforms."""
        return 1 if self.index % 2 == 0 else 0

    def _split(self, y: Tensor) -> tuple[Tensor, Tensor]:
        first, second = y[:, : self.half], y[:, self.half:]
        return (first, second) if self.target_half == 1 else (second, first)

    def _join(self, cond: Tensor, target: Tensor) -> Tensor:
        parts = (cond, target) if self.target_half == 1 else (target, cond)
        return torch.cat(parts, dim=1)

    def forward(self, y: Tensor, s: Tensor, tau: Tensor) -> tuple[Tensor, Tensor]:
        if not bool(self.actnorm.initialized):
            raise UninitializedActNormError(f"flow step {self.index} ActNorm is not initialized")
        h, log_det_norm = self.actnorm(to_channels(y, self.groups))
        h, log_det_mix = self.mixing(h)
        cond, target = self._split(to_points(h, self.groups))
        gamma, beta = self.coupling(cond, s, tau, self.target_half)
        out = self._join(cond, gamma * target + beta)
        log_det_coupling = gamma.log().sum(dim=(1, 2, 3))
        return out, log_det_norm + log_det_mix + log_det_coupling

    def inverse(self, y: Tensor, s: Tensor, tau: Tensor) -> Tensor:
        if not bool(self.actnorm.initialized):
            raise UninitializedActNormError(f"flow step {self.index} ActNorm is not initialized")
        cond, target = self._split(y)
        gamma, beta = self.coupling(cond, s, tau, self.target_half)
        h = to_channels(self._join(cond, (target - beta) / gamma), self.groups)
        return to_points(self.actnorm.inverse(self.mixing.inverse(h)), self.groups)


@dataclass(eq=False)
class LatentCode:
    z: np.ndarray
    log_det_total: float
    mu_task: np.ndarray
    step_log_dets: list[float] = field(default_factory=list)


# ─────────────────────────────────────────────
# Model
# ─────────────────────────────────────────────

class RCNFlow(nn.Module):
    """K conditional flow steps plus the task-conditioned Gaussian prior."""

    def __init__(
        self,
        config: FlowConfig,
        codebook: TaskCodebook,
        normalizer: RobotStateNormalizer | None = None,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if codebook.T != config.T:
            raise ShapeMismatchError(f"codebook T={codebook.T} but flow T={config.T}")
        self.config = config
        self.codebook = codebook
        self.normalizer = normalizer or RobotStateNormalizer.identity(config.state_dim)
        if self.normalizer.dim != config.state_dim:
            raise ShapeMismatchError(
                f"normalizer width {self.normalizer.dim} != state width {config.state_dim}"
            )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.steps = nn.ModuleList(FlowStep(config, k) for k in range(config.K))

    # ── Conditioning ─────────────────────────────────────────────────

    @property
    def actnorm_initialized(self) -> bool:
        return all(bool(step.actnorm.initialized) for step in self.steps)

    def _check_inputs(self, x: Tensor, s: Tensor) -> None:
        cfg = self.config
        if x.dim() != 4 or x.shape[1:] != (cfg.T, cfg.N, 2):
            raise ShapeMismatchError(f"x must be (B, {cfg.T}, {cfg.N}, 2), got {tuple(x.shape)}")
        if s.dim() != 3 or s.shape[1:] != (cfg.T, cfg.state_dim) or s.shape[0] != x.shape[0]:
            raise ShapeMismatchError(
                f"s must be ({x.shape[0]}, {cfg.T}, {cfg.state_dim}), got {tuple(s.shape)}"
            )

    def conditioning(self, s, task_ids: Sequence[str]) -> tuple[Tensor, Tensor, Tensor]:
        """Normalized robot state, tau (B, T) and mu_task (B, T, N, 2)."""
        s_norm = torch.as_tensor(self.normalizer.apply(_to_numpy(s)), dtype=torch.float64)
        tau = torch.as_tensor(self.codebook.vectors_for(task_ids), dtype=torch.float64)
        if not self.config.use_task_embedding:
            tau = torch.zeros_like(tau)
        mu = tau[:, :, None, None].expand(-1, -1, self.config.N, 2)
        return s_norm, tau, mu

    # ── Forward / inverse ────────────────────────────────────────────

    def encode(self, x, s, task_ids: Sequence[str]) -> tuple[Tensor, Tensor, list[Tensor], Tensor]:
        """(z, total log-det (B,), per-step log-dets, mu_task)."""
        x, s = _to_tensor(x), _to_tensor(s)
        self._check_inputs(x, s)
        s_norm, tau, mu = self.conditioning(s, task_ids)
        step_log_dets = []
        for step in self.steps:
            x, log_det = step(x, s_norm, tau)
            step_log_dets.append(log_det)
        return x, torch.stack(step_log_dets).sum(dim=0), step_log_dets, mu

    def decode(self, z, s, task_ids: Sequence[str]) -> Tensor:
        z, s = _to_tensor(z), _to_tensor(s)
        self._check_inputs(z, s)
        s_norm, tau, _ = self.conditioning(s, task_ids)
        for step in reversed(self.steps):
            z = step.inverse(z, s_norm, tau)
        return z

    def log_prob(self, x, s, task_ids: Sequence[str]) -> Tensor:
        """Differentiable per-window log-likelihood, shape (B,)."""
        z, log_det, _, mu = self.encode(x, s, task_ids)
        sq = (z - mu).pow(2).sum(dim=(1, 2, 3))
        return -0.5 * self.config.dim * LOG_2PI - 0.5 * sq + log_det

    def forward(self, x, s, task_ids: Sequence[str]) -> Tensor:
        return self.log_prob(x, s, task_ids)

    # ── Initialization ───────────────────────────────────────────────

    @torch.no_grad()
    def initialize_actnorm(self, x, s, task_ids: Sequence[str]) -> dict[int, list[int]]:
        """Data-dependent init: each step's ActNorm sees the previous steps' output."""
        x, s = _to_tensor(x), _to_tensor(s)
        self._check_inputs(x, s)
        s_norm, tau, _ = self.conditioning(s, task_ids)
        flagged = {}
        for step in self.steps:
            channels = actnorm_init(step, x)
            if channels:
                flagged[step.index] = channels
            x, _ = step(x, s_norm, tau)
        _LOGGER.info("ActNorm initialized on a batch of %d windows", x.shape[0])
        return flagged

    @torch.no_grad()
    def make_identity(self) -> "RCNFlow":
        """Set every step to the identity map (gamma = 1, beta = 0)."""
        head_bias = math.log(math.expm1(1.0 - GAMMA_FLOOR))
        for step in self.steps:
            step.actnorm.log_scale.zero_()
            step.actnorm.bias.zero_()
            step.actnorm.initialized.fill_(True)
            step.mixing.set_identity()
            head = step.coupling.head
            head.weight.zero_()
            bias = head.bias.view(self.config.N, 2, 2)
            bias[..., 0] = head_bias
            bias[..., 1] = 0.0
        return self


def _to_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value.to(torch.float64)
    return torch.as_tensor(np.asarray(value, dtype=np.float64))


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value, dtype=np.float64)


# ─────────────────────────────────────────────
# Step-level operations
# ─────────────────────────────────────────────

def actnorm_init(step: FlowStep, first_batch) -> list[int]:
    """Initialize one step's ActNorm from its (B, T, N, 2) input batch."""
    batch = _to_tensor(first_batch)
    if batch.shape[0] == 0:
        raise RCNFValidationError("ActNorm init needs a nonempty batch")
    return step.actnorm.initialize(to_channels(batch, step.groups))


def step_forward(step: FlowStep, y_in, s, tau) -> tuple[Tensor, Tensor]:
    """One step on already-normalized s and tau tensors."""
    return step(_to_tensor(y_in), _to_tensor(s), _to_tensor(tau))


def step_inverse(step: FlowStep, y_out, s, tau) -> Tensor:
    return step.inverse(_to_tensor(y_out), _to_tensor(s), _to_tensor(tau))


# ─────────────────────────────────────────────
# Likelihood and scores
# ─────────────────────────────────────────────

def _check_task(model: RCNFlow, task_id: str) -> None:
    embed_task(model.codebook, task_id)


@torch.no_grad()
def log_likelihood(model: RCNFlow, x, s, task_id: str) -> tuple[float, LatentCode]:
    """log p(x | s, task) for one (T, N, 2) window."""
    _check_task(model, task_id)
    x = _to_tensor(x)
    s = _to_tensor(s)
    if x.dim() != 3 or s.dim() != 2:
        raise ShapeMismatchError(
            f"expected one window, got x {tuple(x.shape)} and s {tuple(s.shape)}"
        )
    z, log_det, step_log_dets, mu = model.encode(x[None], s[None], [task_id])
    sq = float((z - mu).pow(2).sum())
    logp = -0.5 * model.config.dim * LOG_2PI - 0.5 * sq + float(log_det[0])
    code = LatentCode(
        z=z[0].numpy(),
        log_det_total=float(log_det[0]),
        mu_task=mu[0].numpy().copy(),
        step_log_dets=[float(ld[0]) for ld in step_log_dets],
    )
    return logp, code


def anomaly_score(model: RCNFlow, x, s, task_id: str) -> float:
    logp, _ = log_likelihood(model, x, s, task_id)
    score = -logp
    return score / model.config.dim if model.config.per_dim_score else score


@torch.no_grad()
def score_batch(model: RCNFlow, x, s, task_ids: Sequence[str], batch_size: int = 256) -> np.ndarray:
    """Anomaly scores for stacked windows."""
    x, s = _to_numpy(x), _to_numpy(s)
    scores = []
    for start in range(0, len(x), batch_size):
        end = start + batch_size
        logp = model.log_prob(x[start:end], s[start:end], task_ids[start:end])
        scores.append(-logp.numpy())
    out = np.concatenate(scores) if scores else np.zeros(0)
    return out / model.config.dim if model.config.per_dim_score else out


# ─────────────────────────────────────────────
# Checkpoints
# ─────────────────────────────────────────────

def save_checkpoint(
    model: RCNFlow, path: str | os.PathLike, *, force: bool = True, extra: dict | None = None
) -> Path:
    """npz archive keyed by parameter path plus a JSON ``__meta__`` string."""
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "codebook": model.codebook.to_dict(),
        "norm_stats": model.normalizer.to_dict(),
    }
    if extra:
        meta["extra"] = extra
    arrays[META_KEY] = np.array(dumps_json(meta))
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    written = atomic_write_bytes(path, buffer.getvalue(), force=force)
    _LOGGER.info("Checkpoint written to %s (%d arrays)", path, len(arrays) - 1)
    return written


def load_checkpoint(path: str | os.PathLike) -> RCNFlow:
    with np.load(path, allow_pickle=False) as archive:
        if META_KEY not in archive.files:
            raise RCNFValidationError(f"{path} is not an RC-NF checkpoint")
        meta = json.loads(str(archive[META_KEY]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise RCNFValidationError(
                f"Unsupported checkpoint format {meta.get('format_version')!r}"
            )
        state = {
            name: torch.from_numpy(archive[name].copy())
            for name in archive.files
            if name != META_KEY
        }
    model = RCNFlow(
        FlowConfig.from_dict(meta["config"]),
        TaskCodebook.from_dict(meta["codebook"]),
        RobotStateNormalizer.from_dict(meta["norm_stats"]),
    )
    model.load_state_dict(state)
    model.eval()
    _LOGGER.info("Loaded checkpoint %s (K=%d)", path, model.config.K)
    return model
