"""
Goal-masked diffusion navigation policy.

Architecture:
- Observation encoder: three strided conv + group-norm blocks and a linear
  projection, applied to every context patch with shared weights.
- Goal-fusion encoder: the same architecture with its own weights over the
  two-channel stack (current observation, goal).
- Transformer: pre-norm self-attention over the P+1 observation tokens and the
  goal token. With goal mask m=1 the goal key column carries MASK_VALUE in
  every layer, so no token reads the goal, and the goal slot of the output is
  replaced by a learned null vector.
- Distance head: two-layer MLP over the flattened context vector.
- Noise predictor: 1D U-Net over the action horizon with FiLM conditioning
  from (context, sinusoidal step embedding).
- Regression head (head_type="regression"): an MLP emitting one action
  sequence in place of the noise predictor.

Capabilities follow the masking probability the model was trained with:
undirected sampling needs p_m > 0, goal-conditioned use needs p_m < 1.
"""

import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn

from . import numcore as nc
from .logger import logger
from .schedule import NoiseSchedule, cosine_schedule, denoise_step


HEAD_TYPES = ("diffusion", "regression")


class PolicyError(Exception):
    """Base exception for policy errors."""
    pass


class PatchShapeError(PolicyError):
    """Raised when observation patches have the wrong shape or range."""
    pass


class CapabilityError(PolicyError):
    """Raised when a model is used in a mode it was not trained for."""
    pass


class MissingGoalError(PolicyError):
    """Raised when goal-conditioned sampling is requested without a goal."""
    pass


@dataclass(frozen=True)
class PolicyConfig:
    context: int = 3
    horizon: int = 8
    patch_size: int = 24
    token_dim: int = 64
    layers: int = 4
    heads: int = 4
    ffn_mult: int = 2
    diffusion_steps: int = 10
    unet_channels: Tuple[int, ...] = (32, 64, 128)
    unet_kernel: int = 5
    step_embed_dim: int = 32
    schedule_offset: float = 0.008
    encoder_channels: Tuple[int, ...] = (16, 32, 64)
    norm_groups: int = 8
    activation: str = "relu"
    head_type: str = "diffusion"
    d_norm: float = 2.0
    d_max: int = 20

    @classmethod
    def miniature(cls, **overrides) -> "PolicyConfig":
        """Width-8 model for gradient checks and smoke runs."""
        base = cls(
            patch_size=12, token_dim=8, layers=1, heads=2, diffusion_steps=4,
            unet_channels=(8, 16, 16), unet_kernel=3, step_embed_dim=8,
            encoder_channels=(4, 8, 8), norm_groups=2, activation="gelu",
        )
        return replace(base, **overrides)

    @property
    def tokens(self) -> int:
        return self.context + 2

    @property
    def context_dim(self) -> int:
        return self.tokens * self.token_dim

    def validate(self) -> None:
        if self.token_dim % self.heads:
            raise PolicyError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.diffusion_steps < 1:
            raise PolicyError("diffusion_steps must be at least 1")
        if self.horizon % 4:
            raise PolicyError(f"horizon {self.horizon} must be divisible by 4 (two U-Net downsampling stages)")
        if len(self.unet_channels) != 3 or len(self.encoder_channels) != 3:
            raise PolicyError("unet_channels and encoder_channels need three entries each")
        for c in (*self.unet_channels, *self.encoder_channels):
            if c % self.norm_groups:
                raise PolicyError(f"channel width {c} not divisible by norm_groups {self.norm_groups}")
        if self.activation not in ("relu", "gelu", "tanh"):
            raise PolicyError(f"unknown activation '{self.activation}'")
        if self.head_type not in HEAD_TYPES:
            raise PolicyError(f"unknown head_type '{self.head_type}'")
        if self.step_embed_dim % 2 or self.step_embed_dim < 4:
            raise PolicyError("step_embed_dim must be even and at least 4")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "PolicyConfig":
        data = dict(data)
        for key in ("unet_channels", "encoder_channels"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def _conv_out(n: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> int:
    return (n + 2 * padding - kernel) // stride + 1


class PatchEncoder(nn.Module):
    def __init__(self, in_channels: int, config: PolicyConfig):
        super().__init__()
        self.activation = config.activation
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        size, channels = config.patch_size, in_channels
        for width in config.encoder_channels:
            self.convs.append(nn.Conv2d(channels, width, kernel_size=3, stride=2, padding=1))
            self.norms.append(nn.GroupNorm(config.norm_groups, width))
            channels, size = width, _conv_out(size)
        self.project = nn.Linear(channels * size * size, config.token_dim)

    def forward(self, x: Tensor) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = nc.activation(nc.group_norm(nc.conv2d(x, conv), norm), self.activation)
        return nc.linear(x.reshape(x.shape[0], -1), self.project)


class AttentionBlock(nn.Module):
    """Pre-norm self-attention block. Keys carry no bias: a key bias shifts every score in a row equally."""

    def __init__(self, config: PolicyConfig):
        super().__init__()
        D = config.token_dim
        self.heads = config.heads
        self.activation = config.activation
        self.norm1 = nn.LayerNorm(D)
        self.query = nn.Linear(D, D)
        self.key = nn.Linear(D, D, bias=False)
        self.value = nn.Linear(D, D)
        self.out = nn.Linear(D, D)
        self.norm2 = nn.LayerNorm(D)
        self.ff1 = nn.Linear(D, config.ffn_mult * D)
        self.ff2 = nn.Linear(config.ffn_mult * D, D)

    def _split(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        return x.reshape(B, T, self.heads, D // self.heads).transpose(1, 2)

    def forward(self, x: Tensor, mask: Optional[Tensor]) -> Tensor:
        B, T, D = x.shape
        h = nc.layer_norm(x, self.norm1)
        q, k, v = (self._split(nc.linear(h, layer)) for layer in (self.query, self.key, self.value))
        attended = nc.attention(q, k, v, mask).transpose(1, 2).reshape(B, T, D)
        x = nc.forward_primitive("add", [x, nc.linear(attended, self.out)])
        h = nc.layer_norm(x, self.norm2)
        h = nc.linear(nc.activation(nc.linear(h, self.ff1), self.activation), self.ff2)
        return nc.forward_primitive("add", [x, h])


def sinusoidal_embedding(k: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.get_default_dtype()) / max(half - 1, 1))
    args = k.to(freqs.dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class FiLMResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, cond_dim: int, config: PolicyConfig):
        super().__init__()
        pad = config.unet_kernel // 2
        self.activation = config.activation
        self.conv1 = nn.Conv1d(in_channels, out_channels, config.unet_kernel, padding=pad)
        self.norm1 = nn.GroupNorm(config.norm_groups, out_channels)
        self.conv2 = nn.Conv1d(out_channels, out_channels, config.unet_kernel, padding=pad)
        self.norm2 = nn.GroupNorm(config.norm_groups, out_channels)
        self.cond = nn.Linear(cond_dim, 2 * out_channels)
        self.residual = nn.Conv1d(in_channels, out_channels, 1) if in_channels != out_channels else None

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        h = nc.activation(nc.group_norm(nc.conv1d(x, self.conv1), self.norm1), self.activation)
        gamma, beta = nc.linear(cond, self.cond).chunk(2, dim=-1)
        h = nc.film(h, nc.forward_primitive("add", [gamma, 1.0]), beta)
        h = nc.activation(nc.group_norm(nc.conv1d(h, self.conv2), self.norm2), self.activation)
        skip = nc.conv1d(x, self.residual) if self.residual is not None else x
        return nc.forward_primitive("add", [h, skip])


class ConditionalUnet1D(nn.Module):
    """Two down stages, a bottleneck and two up stages with skips over the action axis."""

    def __init__(self, config: PolicyConfig):
        super().__init__()
        c1, c2, c3 = config.unet_channels
        E = config.step_embed_dim
        cond_dim = config.context_dim + E
        self.step_dim = E
        self.activation = config.activation
        self.step_mlp1 = nn.Linear(E, 4 * E)
        self.step_mlp2 = nn.Linear(4 * E, E)

        self.down1 = FiLMResidualBlock(2, c1, cond_dim, config)
        self.pool1 = nn.Conv1d(c1, c1, 3, stride=2, padding=1)
        self.down2 = FiLMResidualBlock(c1, c2, cond_dim, config)
        self.pool2 = nn.Conv1d(c2, c2, 3, stride=2, padding=1)
        self.mid1 = FiLMResidualBlock(c2, c3, cond_dim, config)
        self.mid2 = FiLMResidualBlock(c3, c3, cond_dim, config)
        self.lift2 = nn.Conv1d(c3, c3, 3, padding=1)
        self.up2 = FiLMResidualBlock(c3 + c2, c2, cond_dim, config)
        self.lift1 = nn.Conv1d(c2, c2, 3, padding=1)
        self.up1 = FiLMResidualBlock(c2 + c1, c1, cond_dim, config)
        self.final = nn.Conv1d(c1, c1, config.unet_kernel, padding=config.unet_kernel // 2)
        self.final_norm = nn.GroupNorm(config.norm_groups, c1)
        self.head = nn.Conv1d(c1, 2, 1)

    def forward(self, context: Tensor, noisy: Tensor, k: Tensor) -> Tensor:
        """context (B, C), noisy (B, H, 2), k (B,) -> predicted noise (B, H, 2)."""
        step = sinusoidal_embedding(k, self.step_dim)
        step = nc.linear(nc.activation(nc.linear(step, self.step_mlp1), self.activation), self.step_mlp2)
        cond = nc.concat([context, step], dim=-1)

        x = noisy.transpose(1, 2)
        skip1 = self.down1(x, cond)
        x = nc.conv1d(skip1, self.pool1)
        skip2 = self.down2(x, cond)
        x = nc.conv1d(skip2, self.pool2)
        x = self.mid2(self.mid1(x, cond), cond)
        x = nc.conv1d(nc.upsample1d(x), self.lift2)
        x = self.up2(nc.concat([x, skip2], dim=1), cond)
        x = nc.conv1d(nc.upsample1d(x), self.lift1)
        x = self.up1(nc.concat([x, skip1], dim=1), cond)
        x = nc.activation(nc.group_norm(nc.conv1d(x, self.final), self.final_norm), self.activation)
        return nc.conv1d(x, self.head).transpose(1, 2)


class RegressionHead(nn.Module):
    def __init__(self, config: PolicyConfig):
        super().__init__()
        self.horizon = config.horizon
        self.activation = config.activation
        self.hidden = nn.Linear(config.context_dim, 4 * config.token_dim)
        self.out = nn.Linear(4 * config.token_dim, 2 * config.horizon)

    def forward(self, context: Tensor) -> Tensor:
        h = nc.activation(nc.linear(context, self.hidden), self.activation)
        return nc.activation(nc.linear(h, self.out), "tanh").reshape(-1, self.horizon, 2)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class PolicyModel(nn.Module):
    def __init__(self, config: PolicyConfig, mask_prob: Optional[float] = None):
        super().__init__()
        config.validate()
        self.config = config
        self.mask_prob = mask_prob
        self.schedule: NoiseSchedule = cosine_schedule(config.diffusion_steps, config.schedule_offset)
        D = config.token_dim

        self.obs_encoder = PatchEncoder(1, config)
        self.goal_encoder = PatchEncoder(2, config)
        self.position = nn.Parameter(torch.randn(config.tokens, D) * 0.02)
        self.null_goal = nn.Parameter(torch.randn(D) * 0.02)
        self.blocks = nn.ModuleList(AttentionBlock(config) for _ in range(config.layers))
        self.final_norm = nn.LayerNorm(D)
        self.dist_hidden = nn.Linear(config.context_dim, D)
        self.dist_out = nn.Linear(D, 1)
        if config.head_type == "diffusion":
            self.noise_net: Optional[ConditionalUnet1D] = ConditionalUnet1D(config)
            self.action_head: Optional[RegressionHead] = None
        else:
            self.noise_net = None
            self.action_head = RegressionHead(config)

    # Capabilities

    @property
    def supports_undirected(self) -> bool:
        return self.mask_prob is None or self.mask_prob > 0.0

    @property
    def supports_goal(self) -> bool:
        return self.mask_prob is None or self.mask_prob < 1.0

    def require_mode(self, mask: int) -> None:
        if mask and not self.supports_undirected:
            raise CapabilityError("model was trained with p_m = 0 and cannot run undirected (m=1)")
        if not mask and not self.supports_goal:
            raise CapabilityError("model was trained with p_m = 1 and cannot run goal-conditioned (m=0)")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def unet_conv_layers(self) -> int:
        if self.noise_net is None:
            return 0
        return sum(1 for m in self.noise_net.modules() if isinstance(m, nn.Conv1d))

    def summary(self) -> str:
        c = self.config
        return (f"{c.head_type} policy: D={c.token_dim}, {c.layers} layers x {c.heads} heads, K={c.diffusion_steps}, "
                f"unet {c.unet_channels} ({self.unet_conv_layers} conv layers), "
                f"{self.parameter_count()} parameters, p_m={self.mask_prob}")

    # Inputs

    def check_patches(self, obs_context: Tensor, goal_obs: Tensor) -> None:
        c = self.config
        S = c.patch_size
        if obs_context.dim() != 4 or tuple(obs_context.shape[1:]) != (c.context + 1, S, S):
            raise PatchShapeError(f"observation context must be (B, {c.context + 1}, {S}, {S}), got {tuple(obs_context.shape)}")
        if goal_obs.dim() != 3 or tuple(goal_obs.shape[1:]) != (S, S) or goal_obs.shape[0] != obs_context.shape[0]:
            raise PatchShapeError(f"goal must be (B, {S}, {S}), got {tuple(goal_obs.shape)}")
        for name, x in (("observation", obs_context), ("goal", goal_obs)):
            if x.numel() and (float(x.min()) < 0.0 or float(x.max()) > 1.0):
                raise PatchShapeError(f"{name} patch values must lie in [0, 1]")

    # Forward pieces

    def observation_features(self, obs_context: Tensor) -> Tensor:
        """Per-patch observation encodings before positional embedding, (B, P+1, D)."""
        B, T, S, _ = obs_context.shape
        flat = self.obs_encoder(obs_context.reshape(B * T, 1, S, S))
        return flat.reshape(B, T, -1)

    def goal_features(self, obs_context: Tensor, goal_obs: Tensor) -> Tensor:
        stacked = nc.concat([obs_context[:, -1:], goal_obs[:, None]], dim=1)
        return self.goal_encoder(stacked)

    def encode_tokens(self, obs_context: Tensor, goal_obs: Tensor) -> Tuple[Tensor, Tensor]:
        """Return (observation tokens (B, P+1, D), goal token (B, 1, D))."""
        self.check_patches(obs_context, goal_obs)
        P1 = self.config.context + 1
        obs_tokens = nc.forward_primitive("add", [self.observation_features(obs_context), self.position[:P1]])
        goal_token = nc.forward_primitive("add", [self.goal_features(obs_context, goal_obs), self.position[P1]])
        return obs_tokens, goal_token[:, None, :]

    def forward_context(self, obs_tokens: Tensor, goal_token: Tensor, mask: Tensor) -> Tensor:
        """Context vector (B, (P+2) * D). `mask` is a (B,) bool tensor, True hides the goal."""
        tokens = nc.concat([obs_tokens, goal_token], dim=1)
        B, T, D = tokens.shape
        mask = mask.to(torch.bool).reshape(B)
        additive = torch.zeros(B, 1, 1, T, dtype=tokens.dtype)
        additive[:, 0, 0, -1] = torch.where(mask, torch.tensor(nc.MASK_VALUE, dtype=tokens.dtype),
                                            torch.tensor(0.0, dtype=tokens.dtype))
        for block in self.blocks:
            tokens = block(tokens, additive)
        tokens = nc.layer_norm(tokens, self.final_norm)
        goal_slot = torch.where(mask[:, None], self.null_goal.expand(B, D), tokens[:, -1])
        tokens = nc.concat([tokens[:, :-1], goal_slot[:, None]], dim=1)
        return tokens.reshape(B, T * D)

    def context(self, obs_context: Tensor, goal_obs: Tensor, mask: Tensor) -> Tensor:
        obs_tokens, goal_token = self.encode_tokens(obs_context, goal_obs)
        return self.forward_context(obs_tokens, goal_token, mask)

    def predict_distance(self, context: Tensor) -> Tensor:
        """Normalized temporal distance, (B,)."""
        h = nc.activation(nc.linear(context, self.dist_hidden), self.config.activation)
        return nc.linear(h, self.dist_out).reshape(-1)

    def predict_noise(self, context: Tensor, noisy: Tensor, k: Tensor) -> Tensor:
        if self.noise_net is None:
            raise CapabilityError("regression-head model has no noise predictor")
        if tuple(noisy.shape[1:]) != (self.config.horizon, 2):
            raise PolicyError(f"noisy actions must be (B, {self.config.horizon}, 2), got {tuple(noisy.shape)}")
        return self.noise_net(context, noisy, k)

    def predict_actions(self, context: Tensor) -> Tensor:
        if self.action_head is None:
            raise CapabilityError("diffusion-head model has no point-estimate action head")
        return self.action_head(context)


def build_policy(config: Optional[PolicyConfig] = None, seed: int = 0,
                 mask_prob: Optional[float] = None) -> PolicyModel:
    """Construct a policy with parameters drawn from `seed`, leaving the global RNG untouched."""
    config = config or PolicyConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PolicyModel(config, mask_prob)
    model.eval()
    logger.debug(f"Built {model.summary()}")
    return model


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _as_batch(patches, dims: int) -> Tensor:
    x = torch.as_tensor(np.asarray(patches), dtype=torch.get_default_dtype())
    return x[None] if x.dim() == dims else x


def sample_actions(model: PolicyModel, obs_context, goal_obs=None, mask: int = 1, n_samples: int = 8,
                   generator: Optional[torch.Generator] = None) -> np.ndarray:
    """Draw `n_samples` denormalized egocentric action sequences, shape (n, H, 2).

    All chains share one context vector and consume one generator stream in
    order. With mask=1 the goal is ignored and a zero patch stands in for it.
    """
    model.require_mode(mask)
    if not mask and goal_obs is None:
        raise MissingGoalError("goal-conditioned sampling (m=0) needs a goal observation")
    if n_samples < 1:
        raise PolicyError("n_samples must be at least 1")
    c = model.config
    context_batch = _as_batch(obs_context, 3)
    goal = _as_batch(goal_obs, 2) if (goal_obs is not None and not mask) else \
        torch.zeros(1, c.patch_size, c.patch_size, dtype=torch.get_default_dtype())

    with torch.no_grad():
        ctx = model.context(context_batch, goal, torch.tensor([bool(mask)]))
        if model.noise_net is None:
            actions = model.predict_actions(ctx).expand(n_samples, c.horizon, 2)
        else:
            ctx = ctx.expand(n_samples, -1)
            actions = torch.randn((n_samples, c.horizon, 2), generator=generator, dtype=ctx.dtype)
            for k in range(c.diffusion_steps, 0, -1):
                steps = torch.full((n_samples,), k, dtype=torch.long)
                eps = model.predict_noise(ctx, actions, steps)
                actions = denoise_step(model.schedule, actions, eps, k, generator)
        actions = actions.clamp(-1.0, 1.0) * c.d_norm
    return actions.detach().cpu().numpy().astype(np.float64)


def predict_pair_distances(model: PolicyModel, obs_context, goals: Sequence) -> np.ndarray:
    """Normalized goal-conditioned distance from one context to each goal patch."""
    model.require_mode(0)
    goals = _as_batch(np.asarray(goals), 2)
    n = goals.shape[0]
    if n == 0:
        return np.zeros(0)
    context_batch = _as_batch(obs_context, 3).expand(n, -1, -1, -1)
    with torch.no_grad():
        ctx = model.context(context_batch, goals, torch.zeros(n, dtype=torch.bool))
        return model.predict_distance(ctx).detach().cpu().numpy().astype(np.float64)
