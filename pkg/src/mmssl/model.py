"""Encoder, projection heads, and the student/teacher pair.

The encoder is a standard pre-norm ViT over already-embedded token
sequences (the tokenizer owns patch/positional/modality embeddings, so the
encoder itself is permutation-equivariant over tokens). Two separate MLP
heads map features to K prototype logits: one for the CLS token (image
level) and one for patch tokens. The teacher is a structural clone of the
student updated only through EMA; its image-head logits are centered by a
running mean before the softmax to prevent collapse.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import ModalityConfig, MultiModalTokenizer, TokenizedCrop, TokenizerMode


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    patch_size: int = 14

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")

    @classmethod
    def desk(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def vit_b14(cls) -> "EncoderConfig":
        return cls(embed_dim=768, depth=12, num_heads=12)


@dataclass(frozen=True)
class HeadConfig:
    prototype_count: int = 3
    hidden_dims: tuple[int, ...] = (64,)
    temperature_student: float = 0.1
    temperature_teacher: float = 0.07

    def __post_init__(self):
        if self.prototype_count < 2:
            raise ValueError(f"prototype_count must be >= 2, got {self.prototype_count}")
        if self.temperature_student <= 0 or self.temperature_teacher <= 0:
            raise ValueError("temperatures must be > 0")


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # [B, heads, N, d_head]
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim != 3 or tokens.shape[1] < 2:
            raise ValueError(f"expected [B, N>=2, D] tokens, got {tuple(tokens.shape)}")
        x = tokens
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class ProjectionHead(nn.Module):
    """Non-linear projection to K prototype logits."""

    def __init__(self, in_dim: int, cfg: HeadConfig):
        super().__init__()
        layers: list[nn.Module] = []
        d = in_dim
        for h in cfg.hidden_dims:
            layers += [nn.Linear(d, h), nn.GELU()]
            d = h
        layers.append(nn.Linear(d, cfg.prototype_count))
        self.mlp = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(x)


def prototype_scores(
    logits: torch.Tensor, temperature: float, center: torch.Tensor | None = None
) -> torch.Tensor:
    """Softmax over prototypes; the teacher passes its running center."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = logits - center if center is not None else logits
    return torch.softmax(z / temperature, dim=-1)


class MultiModalModel(nn.Module):
    """Tokenizer + encoder + the two prototype heads (one network of the pair)."""

    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        head_cfg: HeadConfig,
        modalities: ModalityConfig | None = None,
        mode: TokenizerMode | None = None,
        base_grid: int = 7,
        interp: str = "bicubic",
    ):
        super().__init__()
        self.encoder_cfg = encoder_cfg
        self.head_cfg = head_cfg
        self.tokenizer = MultiModalTokenizer(
            encoder_cfg.embed_dim,
            modalities,
            mode,
            patch_size=encoder_cfg.patch_size,
            base_grid=base_grid,
            interp=interp,
        )
        self.encoder = Encoder(encoder_cfg)
        self.image_head = ProjectionHead(encoder_cfg.embed_dim, head_cfg)
        self.patch_head = ProjectionHead(encoder_cfg.embed_dim, head_cfg)

    def encode(self, crop: TokenizedCrop) -> tuple[torch.Tensor, torch.Tensor]:
        """TokenizedCrop -> (cls_feature [B, D], patch_features [B, T, D])."""
        feats = self.encoder(crop.tokens)
        return feats[:, 0], feats[:, 1:]


@dataclass
class ModelState:
    """Student/teacher pair plus the teacher-centering vector."""

    student: MultiModalModel
    teacher: MultiModalModel
    center: torch.Tensor
    ema_momentum: float = 0.992

    @classmethod
    def create(
        cls,
        encoder_cfg: EncoderConfig,
        head_cfg: HeadConfig,
        modalities: ModalityConfig | None = None,
        mode: TokenizerMode | None = None,
        seed: int = 0,
        base_grid: int = 7,
        interp: str = "bicubic",
    ) -> "ModelState":
        torch.manual_seed(seed)
        student = MultiModalModel(encoder_cfg, head_cfg, modalities, mode, base_grid, interp)
        teacher = copy.deepcopy(student)
        teacher.requires_grad_(False)
        return cls(
            student=student,
            teacher=teacher,
            center=torch.zeros(head_cfg.prototype_count),
        )


def _matched_params(state: ModelState) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    s_named = dict(state.student.named_parameters())
    t_named = dict(state.teacher.named_parameters())
    if s_named.keys() != t_named.keys():
        missing = s_named.keys() ^ t_named.keys()
        raise ValueError(f"student/teacher structure mismatch on {sorted(missing)}")
    names = list(s_named)
    return [s_named[n] for n in names], [t_named[n] for n in names]


def ema_update(state: ModelState, momentum: float) -> ModelState:
    """teacher <- m * teacher + (1 - m) * student for every parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum {momentum} outside [0, 1]")
    s_params, t_params = _matched_params(state)
    with torch.no_grad():
        torch._foreach_mul_(t_params, momentum)
        torch._foreach_add_(t_params, s_params, alpha=1.0 - momentum)
    state.ema_momentum = momentum
    return state


def center_update(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float = 0.9) -> torch.Tensor:
    """center <- c * center + (1 - c) * batch mean of teacher image logits."""
    if teacher_logits.ndim != 2 or teacher_logits.shape[1] != center.shape[0]:
        raise ValueError(
            f"expected [B, {center.shape[0]}] logits, got {tuple(teacher_logits.shape)}"
        )
    return momentum * center + (1.0 - momentum) * teacher_logits.mean(dim=0)
