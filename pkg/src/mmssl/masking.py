"""Mask-plan sampling and application for the student's masked-token objective.

Two training-time mask kinds exist per item: random_patch (uniformly chosen
tokens across all modalities, iBOT style) and full_modality (every token of
one modality, so the student must reconstruct that modality's targets from
the others). Evaluation-time missingness is different: tokens are removed,
not substituted (drop_modality).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .tokenizer import TokenizedCrop

MASK_KINDS = ("none", "random_patch", "full_modality")


@dataclass
class MaskPlan:
    """Per-item mask over the non-CLS tokens of one crop."""

    flags: np.ndarray  # [T] bool
    kind: str
    masked_modality: str | None = None

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        self.flags = np.asarray(self.flags, dtype=bool)
        if self.kind == "none" and self.flags.any():
            raise ValueError("kind=none must carry no flags")
        if self.kind == "full_modality" and self.masked_modality is None:
            raise ValueError("full_modality plan needs masked_modality")

    @property
    def n_flagged(self) -> int:
        return int(self.flags.sum())


@dataclass(frozen=True)
class MaskingPolicy:
    sample_fraction: float = 0.5
    ratio_range: tuple[float, float] = (0.1, 0.5)
    modality_mask_prob: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.sample_fraction <= 1.0:
            raise ValueError(f"sample_fraction {self.sample_fraction} outside [0, 1]")
        if not 0.0 <= self.modality_mask_prob <= 1.0:
            raise ValueError(f"modality_mask_prob {self.modality_mask_prob} outside [0, 1]")
        lo, hi = self.ratio_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"ratio_range {self.ratio_range} must be ordered within (0, 1)")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def sample_plan_for(
    present_modalities: tuple[str, ...],
    n_cells: int,
    policy: MaskingPolicy,
    rng: np.random.Generator,
    stacked: bool = False,
) -> MaskPlan:
    """Shape-level plan draw; lets data producers sample without tokenizing.

    Assumes the modality-major token layout (block i covers
    [i*n_cells, (i+1)*n_cells)). Channel-stacked layouts have no modality
    blocks, so full-modality draws are rejected there.
    """
    t = n_cells if stacked else len(present_modalities) * n_cells
    flags = np.zeros(t, dtype=bool)
    if rng.uniform() < policy.modality_mask_prob:
        if stacked:
            raise ValueError("channel-stacked crops have no per-modality blocks")
        i = int(rng.integers(len(present_modalities)))
        flags[i * n_cells : (i + 1) * n_cells] = True
        return MaskPlan(
            flags=flags, kind="full_modality", masked_modality=present_modalities[i]
        )
    if rng.uniform() < policy.sample_fraction:
        ratio = rng.uniform(*policy.ratio_range)
        n = _round_half_up(ratio * t)
        idx = rng.choice(t, size=n, replace=False)
        flags[idx] = True
        return MaskPlan(flags=flags, kind="random_patch")
    return MaskPlan(flags=flags, kind="none")


def sample_plan(crop: TokenizedCrop, policy: MaskingPolicy, rng: np.random.Generator) -> MaskPlan:
    """Draw one per-item plan; the caller owns the rng stream (determinism)."""
    stacked = bool(crop.coords[0, 0] < 0)
    return sample_plan_for(
        crop.present_modalities, crop.grid.n_cells, policy, rng, stacked=stacked
    )


def sample_plans(
    crop: TokenizedCrop, policy: MaskingPolicy, rng: np.random.Generator, batch: int
) -> list[MaskPlan]:
    return [sample_plan(crop, policy, rng) for _ in range(batch)]


def apply_plan(crop: TokenizedCrop, plan: MaskPlan, mask_token: torch.Tensor) -> TokenizedCrop:
    """Replace flagged tokens with mask_token + their positional/modality adds."""
    return apply_plans(crop, [plan] * crop.tokens.shape[0], mask_token)


def apply_plans(crop: TokenizedCrop, plans: list[MaskPlan], mask_token: torch.Tensor) -> TokenizedCrop:
    b, t = crop.tokens.shape[0], crop.n_patch_tokens
    if len(plans) != b:
        raise ValueError(f"{len(plans)} plans for batch of {b}")
    for plan in plans:
        if plan.flags.shape[0] != t:
            raise ValueError(f"plan has {plan.flags.shape[0]} flags, crop has {t} tokens")
    flag_mat = np.stack([p.flags for p in plans])
    if not flag_mat.any():
        return crop
    rows, cols = np.nonzero(flag_mat)
    rows_t = torch.from_numpy(rows)
    cols_t = torch.from_numpy(cols)
    replacement = mask_token + crop.pos_add[cols_t] + crop.mod_add[cols_t]
    tokens = crop.tokens.clone()
    tokens[rows_t, cols_t + 1] = replacement
    return TokenizedCrop(
        tokens=tokens,
        coords=crop.coords,
        present_modalities=crop.present_modalities,
        grid=crop.grid,
        pos_add=crop.pos_add,
        mod_add=crop.mod_add,
    )


def drop_modality(crop: TokenizedCrop, name: str) -> TokenizedCrop:
    """Remove one modality's tokens entirely (inference-time missingness)."""
    if len(crop.present_modalities) <= 1:
        raise ValueError("cannot drop the only remaining modality")
    block = crop.modality_token_mask(name)
    keep = ~block
    keep_t = torch.from_numpy(np.flatnonzero(keep))
    tokens = torch.cat([crop.tokens[:, :1], crop.tokens[:, 1:][:, keep_t]], dim=1)
    return TokenizedCrop(
        tokens=tokens,
        coords=crop.coords[keep],
        present_modalities=tuple(m for m in crop.present_modalities if m != name),
        grid=crop.grid,
        pos_add=crop.pos_add[keep_t],
        mod_add=crop.mod_add[keep_t],
    )
