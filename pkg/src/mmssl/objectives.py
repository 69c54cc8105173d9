"""Image-level, patch-level, and combined training objectives.

All loss functions consume prototype scores (probabilities), keep teacher
targets detached, and normalize per item before batch reduction so variable
mask sizes and crop counts do not bias scale:

  * image level: per item, the mean cross entropy over valid
    (target global crop, student crop) pairs, excluding same-crop pairs;
  * labeled items replace the teacher's pseudo targets with a smoothed
    one-hot distribution under the same pairing, reported separately and
    weighted (default 2.0) in the total;
  * patch level: per item, the mean cross entropy over flagged tokens,
    teacher scores always from the unmasked sequence;
  * total = sum_unlabeled(image)/B + w * sum_labeled(supervised)/B
          + mean_over_masked_items(patch).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .masking import MaskPlan

_LOG_FLOOR = 1e-12


@dataclass
class ImageLevelTarget:
    """Target distribution for one item: teacher pseudo-scores or a real label."""

    kind: str  # pseudo | real
    probs: torch.Tensor  # [K], detached simplex
    label: int | None = None

    def __post_init__(self):
        if self.kind not in ("pseudo", "real"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.kind == "real" and self.label is None:
            raise ValueError("real target requires a label")


def smoothed_one_hot(label: int, k: int, eps: float, dtype=torch.float32) -> torch.Tensor:
    """(1 - eps) * onehot + eps / K, uniform smoothing over all K classes."""
    t = torch.full((k,), eps / k, dtype=dtype)
    t[label] += 1.0 - eps
    return t


def _check_simplex(probs: torch.Tensor, what: str) -> None:
    sums = probs.sum(dim=-1)
    if probs.min() < -1e-6 or (sums - 1.0).abs().max() > 1e-4:
        raise ValueError(f"{what} are not on the probability simplex")


def cross_entropy_probs(target: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """-sum_k t_k log s_k over the last axis; target treated as constant."""
    return -(target.detach() * probs.clamp_min(_LOG_FLOOR).log()).sum(dim=-1)


def image_level_loss(
    student_probs: torch.Tensor,  # [C, B, K] scores of C student crops
    target_probs: torch.Tensor,  # [G, B, K] targets attributed to G global crops
    same_crop: np.ndarray,  # [G, C] bool, True where target g came from crop c
) -> torch.Tensor:
    """Per-item mean CE over valid (g, c) pairs; returns [B]."""
    g, b, k = target_probs.shape
    c = student_probs.shape[0]
    if student_probs.shape[1:] != (b, k) or same_crop.shape != (g, c):
        raise ValueError("student/target/pairing shapes disagree")
    _check_simplex(student_probs, "student scores")
    _check_simplex(target_probs, "targets")
    valid = ~np.asarray(same_crop, dtype=bool)
    if not valid.any():
        raise ValueError("no valid (target, student crop) pairs")
    ce = cross_entropy_probs(target_probs[:, None], student_probs[None])  # [G, C, B]
    mask = torch.from_numpy(valid).to(ce.dtype)
    return (ce * mask[:, :, None]).sum(dim=(0, 1)) / mask.sum()


def patch_level_loss(
    student_patch_probs: torch.Tensor,  # [T, K]
    teacher_patch_probs: torch.Tensor,  # [T, K]
    plan: MaskPlan,
) -> torch.Tensor:
    """Mean CE over the plan's flagged tokens of one item; 0 when none."""
    if student_patch_probs.shape != teacher_patch_probs.shape:
        raise ValueError("student/teacher patch score shapes disagree")
    if plan.flags.shape[0] != student_patch_probs.shape[0]:
        raise ValueError(
            f"plan covers {plan.flags.shape[0]} tokens, scores have {student_patch_probs.shape[0]}"
        )
    if not plan.flags.any():
        return torch.zeros((), dtype=student_patch_probs.dtype)
    idx = torch.from_numpy(np.flatnonzero(plan.flags))
    ce = cross_entropy_probs(teacher_patch_probs[idx], student_patch_probs[idx])
    return ce.mean()


def patch_level_loss_items(
    pairs: list[tuple[torch.Tensor, torch.Tensor, np.ndarray]],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Combine per-crop patch scores into per-item means over all flags.

    Each pair is (student [B, T, K], teacher [B, T, K], flags [B, T]); the
    per-item value is the mean CE over that item's flagged tokens pooled
    across the crops. Returns (per_item [B], masked [B] bool).
    """
    if not pairs:
        raise ValueError("need at least one (student, teacher, flags) triple")
    b = pairs[0][0].shape[0]
    ce_sum = torch.zeros(b, dtype=pairs[0][0].dtype)
    n_flags = torch.zeros(b, dtype=pairs[0][0].dtype)
    for student, teacher, flags in pairs:
        if student.shape != teacher.shape or flags.shape != student.shape[:2]:
            raise ValueError("patch score/flag shapes disagree")
        ce = cross_entropy_probs(teacher, student)  # [B, T]
        fl = torch.from_numpy(np.asarray(flags)).to(ce.dtype)
        ce_sum = ce_sum + (ce * fl).sum(dim=1)
        n_flags = n_flags + fl.sum(dim=1)
    masked = n_flags > 0
    per_item = ce_sum / n_flags.clamp_min(1.0)
    return per_item, masked


@dataclass
class LossBreakdown:
    image_loss: torch.Tensor
    patch_loss: torch.Tensor
    supervised_loss: torch.Tensor
    total: torch.Tensor
    weights: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {
            "image_loss": float(self.image_loss.detach()),
            "patch_loss": float(self.patch_loss.detach()),
            "supervised_loss": float(self.supervised_loss.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(
    pseudo_ce: torch.Tensor,  # [B] per-item image CE against teacher targets
    real_ce: torch.Tensor,  # [B] per-item image CE against smoothed labels
    labeled: np.ndarray,  # [B] bool
    patch_per_item: torch.Tensor,  # [B]
    masked: torch.Tensor,  # [B] bool
    supervised_weight: float = 2.0,
) -> LossBreakdown:
    """Assemble the semi-supervised total; see module docstring for weights."""
    b = pseudo_ce.shape[0]
    lab = torch.from_numpy(np.asarray(labeled, dtype=bool))
    image = torch.where(lab, torch.zeros_like(pseudo_ce), pseudo_ce).sum() / b
    supervised = torch.where(lab, real_ce, torch.zeros_like(real_ce)).sum() / b
    masked_f = masked.to(patch_per_item.dtype)
    patch = (patch_per_item * masked_f).sum() / masked_f.sum().clamp_min(1.0)
    total = image + supervised_weight * supervised + patch
    return LossBreakdown(
        image_loss=image,
        patch_loss=patch,
        supervised_loss=supervised,
        total=total,
        weights={"supervised": supervised_weight},
    )
