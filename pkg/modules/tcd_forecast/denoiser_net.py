# /modules/tcd_forecast/denoiser_net.py
# epsilon-prediction network. Each residual layer adds the projected step
# embedding, then runs a temporal transformer (frames attend to frames, per
# joint) followed by a spatial transformer (joints attend to joints, per frame).

import math
import logging
from collections import OrderedDict
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import config as CFG
from .errors import StructuralError, ModeError, DegenerateBatchError, ParameterError
from .utils import make_generator, torch_dtype

logger = logging.getLogger('tcd_system.denoiser')

# noisy values, conditioning values, mask bit (3 each); refine adds hint values + presence flag
BASE_CHANNELS = 9
HINT_CHANNELS = 4


@dataclass(frozen=True)
class DenoiserConfig:
    residual_layers: int = CFG.DESK_DENOISER["residual_layers"]
    channels: int = CFG.DESK_DENOISER["channels"]
    heads: int = CFG.DESK_DENOISER["heads"]
    feedforward_mult: int = CFG.FEEDFORWARD_MULT
    step_embed_dim: int = CFG.STEP_EMBED_DIM
    frames: int = CFG.OBSERVATION_LEN + CFG.PREDICTION_LEN   # upper bound
    joints: int = len(CFG.JOINT_NAMES)
    diffusion_steps: int = CFG.DIFFUSION_STEPS
    temporal: bool = True
    spatial: bool = True
    refine: bool = False
    precision: str = CFG.PRECISION

    def __post_init__(self):
        if self.residual_layers < 1:
            raise ParameterError(f"residual_layers must be >= 1, got {self.residual_layers}")
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ParameterError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.feedforward_mult < 1:
            raise ParameterError(f"feedforward_mult must be >= 1, got {self.feedforward_mult}")
        if self.step_embed_dim < 2 or self.step_embed_dim % 2:
            raise ParameterError(f"step_embed_dim must be an even number >= 2, got {self.step_embed_dim}")
        if self.frames < 1 or self.joints < 2:
            raise ParameterError(f"Shape bounds need frames >= 1 and joints >= 2, got {self.frames}, {self.joints}")
        torch_dtype(self.precision)

    @property
    def input_channels(self) -> int:
        return BASE_CHANNELS + (HINT_CHANNELS if self.refine else 0)

    def to_manifest(self) -> dict:
        return asdict(self)


# --- EMBEDDINGS ---

def step_embedding(t: torch.Tensor, dim: int = CFG.STEP_EMBED_DIM) -> torch.Tensor:
    """Sinusoidal diffusion-step table: half sin, half cos over log-spaced frequencies."""
    half = dim // 2
    frequencies = 10.0 ** (torch.arange(half, dtype=torch.float64) / max(half - 1, 1) * 4.0)
    table = t.to(torch.float64).unsqueeze(-1) * frequencies
    return torch.cat([torch.sin(table), torch.cos(table)], dim=-1)


def frame_encoding(frames: int, channels: int) -> torch.Tensor:
    position = torch.arange(frames, dtype=torch.float64).unsqueeze(1)
    div_term = 1.0 / torch.pow(10000.0, torch.arange(0, channels, 2, dtype=torch.float64) / channels)
    pe = torch.zeros(frames, channels, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div_term)
    pe[:, 1::2] = torch.cos(position * div_term)[:, :channels // 2]
    return pe


# --- LAYERS ---

class AttentionBlock(nn.Module):
    """Pre-norm self-attention with its own residual connection."""

    def __init__(self, channels, heads):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, dropout=0.0, batch_first=True)

    def forward(self, tokens):
        h = self.norm(tokens)
        out, _ = self.attn(h, h, h, need_weights=False)
        return tokens + out


class ResidualLayer(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        C = cfg.channels
        self.step_proj = nn.Linear(C, C)
        self.temporal = AttentionBlock(C, cfg.heads) if cfg.temporal else None
        self.spatial = AttentionBlock(C, cfg.heads) if cfg.spatial else None
        self.ff_norm = nn.LayerNorm(C)
        self.ff = nn.Sequential(nn.Linear(C, cfg.feedforward_mult * C), nn.GELU(),
                                nn.Linear(cfg.feedforward_mult * C, C))

    def forward(self, h, step):
        # h: B x F x J x C
        B, Fr, J, C = h.shape
        h = h + self.step_proj(step)[:, None, None, :]
        if self.temporal is not None:
            seq = h.permute(0, 2, 1, 3).reshape(B * J, Fr, C)
            h = self.temporal(seq).reshape(B, J, Fr, C).permute(0, 2, 1, 3)
        if self.spatial is not None:
            h = self.spatial(h.reshape(B * Fr, J, C)).reshape(B, Fr, J, C)
        return h + self.ff(self.ff_norm(h))


class DenoiserNet(nn.Module):
    """
    forward(s_t, t, mask, observed, hint=None) -> eps_hat, all B x F x J x 3.
    `mask` is boolean (True = observed); `hint` (refine mode only) is
    B x F x J x 4: initial-prediction values plus a presence flag.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.channels
        self.input_proj = nn.Linear(cfg.input_channels, C)
        self.joint_embed = nn.Embedding(cfg.joints, C)
        self.register_buffer("frame_pe", frame_encoding(cfg.frames, C), persistent=False)
        self.step_mlp = nn.Sequential(nn.Linear(cfg.step_embed_dim, C), nn.SiLU(), nn.Linear(C, C), nn.SiLU())
        self.layers = nn.ModuleList([ResidualLayer(cfg) for _ in range(cfg.residual_layers)])
        self.out_norm = nn.LayerNorm(C)
        self.output_proj = nn.Linear(C, 3)

    @property
    def dtype(self):
        return self.input_proj.weight.dtype

    def check_input(self, s_t, t, hint):
        if s_t.dim() != 4 or s_t.shape[-1] != 3:
            raise StructuralError(f"Denoiser input must be B x frames x J x 3, got {tuple(s_t.shape)}")
        if s_t.shape[1] > self.cfg.frames or s_t.shape[2] != self.cfg.joints:
            raise StructuralError(
                f"Denoiser built for <= {self.cfg.frames} frames x {self.cfg.joints} joints, "
                f"got {s_t.shape[1]} x {s_t.shape[2]}")
        if t.min() < 1 or t.max() > self.cfg.diffusion_steps:
            raise ParameterError(f"Diffusion steps must lie in 1..{self.cfg.diffusion_steps}")
        if self.cfg.refine and hint is None:
            raise ModeError("Refine denoiser needs an initial-prediction hint")
        if not self.cfg.refine and hint is not None:
            raise ModeError("Hint given to a denoiser not trained in refine mode")

    def embed_tokens(self, s_t, mask, observed, hint=None):
        """Input projection plus joint and frame embeddings: B x F x J x C."""
        keep = mask.to(self.dtype)
        parts = [s_t.to(self.dtype), observed.to(self.dtype) * keep, keep]
        if hint is not None:
            parts.append(hint.to(self.dtype))
        h = self.input_proj(torch.cat(parts, dim=-1))
        Fr = s_t.shape[1]
        return h + self.joint_embed.weight[None, None] + self.frame_pe[:Fr].to(self.dtype)[None, :, None, :]

    def forward(self, s_t, t, mask, observed, hint=None):
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(s_t.shape[0])
        self.check_input(s_t, t, hint)
        h = self.embed_tokens(s_t, mask, observed, hint)
        step = self.step_mlp(step_embedding(t, self.cfg.step_embed_dim).to(self.dtype))
        for layer in self.layers:
            h = layer(h, step)
        return self.output_proj(self.out_norm(h))

    def named_params(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((name, p) for name, p in self.named_parameters())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# --- INITIALIZATION ---

def init_params(cfg: DenoiserConfig, seed) -> DenoiserNet:
    """
    LeCun-normal weights drawn from an explicit generator, zero biases,
    unit LayerNorm gains. Attention output and the final projection start at
    zero, so a fresh network predicts eps_hat = 0 everywhere.
    """
    gen = make_generator(seed)
    net = DenoiserNet(cfg)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias") or "norm" in name:
                p.fill_(1.0 if ("norm" in name and name.endswith("weight")) else 0.0)
            elif "joint_embed" in name:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64))
            else:
                fan_in = p.shape[-1]
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in))
        for module in net.modules():
            if isinstance(module, nn.MultiheadAttention):
                module.out_proj.weight.zero_()
                module.out_proj.bias.zero_()
        net.output_proj.weight.zero_()
        net.output_proj.bias.zero_()
    return net.to(torch_dtype(cfg.precision))


# --- OBJECTIVE ---

def masked_eps_loss(eps_hat, eps, keep) -> torch.Tensor:
    """mean_b  sum(((eps - eps_hat) * (1 - M))^2) / count(1 - M)."""
    missing = (~keep).to(eps_hat.dtype)
    count = missing.sum(dim=(1, 2, 3))
    if (count == 0).any():
        raise DegenerateBatchError("Batch element has no unavailable entries to learn from")
    per_element = (((eps.to(eps_hat.dtype) - eps_hat) * missing) ** 2).sum(dim=(1, 2, 3)) / count
    return per_element.mean()


@dataclass(eq=False)
class TrainingBatch:
    s_t: torch.Tensor
    t: torch.Tensor
    keep: torch.Tensor
    observed: torch.Tensor
    eps: torch.Tensor
    hint: torch.Tensor = None

    def __post_init__(self):
        if self.s_t.shape[0] == 0:
            raise ParameterError("Training batch is empty")


def loss_and_grad(net: DenoiserNet, batch: TrainingBatch):
    """(loss, OrderedDict name -> gradient) via reverse-mode autodiff."""
    eps_hat = net(batch.s_t, batch.t, batch.keep, batch.observed, batch.hint)
    loss = masked_eps_loss(eps_hat, batch.eps, batch.keep)
    params = net.named_params()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return loss, OrderedDict(
        (name, g if g is not None else torch.zeros_like(p)) for (name, p), g in zip(params.items(), grads))
