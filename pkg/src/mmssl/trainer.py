"""Semi-supervised pretraining loop.

Per step: sample a batch of tumor-centered multi-crop views -> tokenize ->
mask the student's global crops -> forward student (all crops) and teacher
(unmasked globals) -> assemble the LossBreakdown -> clipped gradient step ->
EMA teacher update -> center update. For the first head_warmup_epochs only
the two projection heads receive updates; encoder and embedding tables stay
frozen. Checkpoints land at epoch boundaries where the data rng stream is
exactly consumed, which is what makes resume bit-faithful.

All stochastic choices (subject sampling, crop geometry, mask plans) consume
one numpy Generator inside the single producer thread, in a fixed order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig, TrainConfig
from .data import BatchPrefetcher, CropConfig, SubjectRecord, sample_training_view
from .masking import MaskPlan, apply_plans, sample_plan_for
from .model import (
    HeadConfig,
    ModalityConfig,
    ModelState,
    center_update,
    ema_update,
    prototype_scores,
)
from .objectives import (
    image_level_loss,
    patch_level_loss_items,
    smoothed_one_hot,
    total_loss,
)
from .checkpoint import load_checkpoint, restore_np_rng, save_checkpoint

METRIC_FIELDS = ("step", "image_loss", "patch_loss", "supervised_loss", "total")
CHECKPOINT_NAME = "ckpt_last.npz"


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient goes non-finite; carries diagnostics."""

    def __init__(self, diagnostics: dict):
        super().__init__(f"non-finite training state: {diagnostics}")
        self.diagnostics = diagnostics


# --- schedules ----------------------------------------------------------------------


def lr_schedule(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    warm = cfg.lr_warmup_epochs * cfg.steps_per_epoch
    total = cfg.total_steps
    if warm > 0 and step < warm:
        return cfg.base_lr * (step + 1) / warm
    if total <= warm:
        return cfg.base_lr
    t = (step - warm) / (total - warm)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def ema_schedule(cfg: TrainConfig, step: int) -> float:
    """Cosine ramp of the teacher momentum from start to end over the run."""
    total = max(cfg.total_steps - 1, 1)
    t = min(step / total, 1.0)
    span = cfg.ema_momentum_end - cfg.ema_momentum_start
    return cfg.ema_momentum_end - span * 0.5 * (1.0 + math.cos(math.pi * t))


def teacher_temperature(cfg: TrainConfig, head: HeadConfig, step: int) -> float:
    """Linear warmup from teacher_temp_start to the head's temperature."""
    warm = cfg.teacher_temp_warmup_epochs * cfg.steps_per_epoch
    end = head.temperature_teacher
    if warm <= 0 or step >= warm:
        return end
    return cfg.teacher_temp_start + (end - cfg.teacher_temp_start) * step / warm


# --- batches ------------------------------------------------------------------------


@dataclass
class StepBatch:
    """One pre-assembled training batch (crops, labels, mask plans)."""

    global_crops: np.ndarray  # [G, B, M, Hg, Wg]
    local_crops: np.ndarray  # [L, B, M, Hl, Wl]
    names: tuple[str, ...]
    labels: np.ndarray  # [B] int, -1 where unlabeled
    labeled: np.ndarray  # [B] bool
    plans: list[list[MaskPlan]]  # [G][B]


def _stack_indices(run: RunConfig) -> list[int] | None:
    if not run.tokenizer.channel_stack:
        return None
    return [run.modalities.index(n) for n in run.tokenizer.stack_modalities]


def make_step_batch(
    records: Sequence[SubjectRecord],
    run: RunConfig,
    rng: np.random.Generator,
) -> StepBatch:
    """Sample one batch; sole consumer of the rng during training."""
    cfg: CropConfig = run.crops
    b = run.train.batch_size
    idx = rng.integers(0, len(records), size=b)
    views = [sample_training_view(records[int(i)], rng, cfg) for i in idx]

    names = views[0].modalities
    global_crops = np.stack([v.global_crops for v in views], axis=1)  # [G, B, M, h, w]
    local_crops = (
        np.stack([v.local_crops for v in views], axis=1)
        if cfg.n_local
        else np.zeros((0, b, len(names), cfg.local_size, cfg.local_size), np.float32)
    )

    stack_idx = _stack_indices(run)
    if stack_idx is not None:
        global_crops = global_crops[:, :, stack_idx]
        local_crops = local_crops[:, :, stack_idx] if cfg.n_local else local_crops
        names = tuple(run.tokenizer.stack_modalities)

    n_cells = (cfg.global_size // run.encoder.patch_size) ** 2
    plans = [
        [
            sample_plan_for(names, n_cells, run.masking, rng, stacked=stack_idx is not None)
            for _ in range(b)
        ]
        for _ in range(cfg.n_global)
    ]

    labels = np.array([-1 if r.label is None else r.label for r in (records[int(i)] for i in idx)])
    return StepBatch(
        global_crops=global_crops,
        local_crops=local_crops,
        names=names,
        labels=labels,
        labeled=labels >= 0,
        plans=plans,
    )


# --- one optimization step ----------------------------------------------------------


def training_step(
    state: ModelState,
    batch: StepBatch,
    run: RunConfig,
    optimizer: torch.optim.Optimizer,
    step: int,
):
    """Forward/backward/update for one batch; returns the LossBreakdown."""
    train, head = run.train, run.head
    t_temp = teacher_temperature(train, head, step)
    s_temp = head.temperature_student
    g = batch.global_crops.shape[0]

    lr = lr_schedule(train, step)
    for group in optimizer.param_groups:
        group["lr"] = lr

    # teacher: unmasked globals only, outside autograd
    with torch.inference_mode():
        t_img_logits, t_img_probs, t_patch_probs = [], [], []
        for gi in range(g):
            imgs = torch.from_numpy(batch.global_crops[gi])
            crop = state.teacher.tokenizer.tokenize(imgs, batch.names)
            cls_feat, patch_feat = state.teacher.encode(crop)
            logits = state.teacher.image_head(cls_feat)
            t_img_logits.append(logits)
            t_img_probs.append(prototype_scores(logits, t_temp, state.center))
            t_patch_probs.append(
                prototype_scores(state.teacher.patch_head(patch_feat), t_temp)
            )
    # inference tensors cannot enter autograd graphs; clone them out
    t_img_logits = [x.clone() for x in t_img_logits]
    t_img_probs = [x.clone() for x in t_img_probs]
    t_patch_probs = [x.clone() for x in t_patch_probs]

    # student: masked globals plus all local crops
    student = state.student
    mask_token = student.tokenizer.mask_token
    s_img_probs, s_patch_probs = [], []
    for gi in range(g):
        imgs = torch.from_numpy(batch.global_crops[gi])
        crop = student.tokenizer.tokenize(imgs, batch.names)
        crop = apply_plans(crop, batch.plans[gi], mask_token)
        cls_feat, patch_feat = student.encode(crop)
        s_img_probs.append(prototype_scores(student.image_head(cls_feat), s_temp))
        s_patch_probs.append(prototype_scores(student.patch_head(patch_feat), s_temp))
    for li in range(batch.local_crops.shape[0]):
        imgs = torch.from_numpy(batch.local_crops[li])
        crop = student.tokenizer.tokenize(imgs, batch.names)
        cls_feat, _ = student.encode(crop)
        s_img_probs.append(prototype_scores(student.image_head(cls_feat), s_temp))

    # image level: teacher targets, overridden by smoothed labels where known
    targets = torch.stack(t_img_probs)  # [G, B, K]
    k = targets.shape[-1]
    for i in np.flatnonzero(batch.labeled):
        targets[:, i] = smoothed_one_hot(int(batch.labels[i]), k, train.label_smoothing)
    student_probs = torch.stack(s_img_probs)  # [C, B, K], globals first
    same_crop = np.zeros((g, student_probs.shape[0]), dtype=bool)
    same_crop[np.arange(g), np.arange(g)] = True
    per_item_image = image_level_loss(student_probs, targets, same_crop)

    # patch level: per-item mean over flagged tokens pooled across globals
    pairs = [
        (s_patch_probs[gi], t_patch_probs[gi], np.stack([p.flags for p in batch.plans[gi]]))
        for gi in range(g)
    ]
    patch_per_item, masked = patch_level_loss_items(pairs)

    breakdown = total_loss(
        per_item_image,
        per_item_image,
        batch.labeled,
        patch_per_item,
        masked,
        supervised_weight=train.supervised_weight,
    )

    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(student.parameters(), train.clip_norm)
    if not (torch.isfinite(breakdown.total) and torch.isfinite(grad_norm)):
        raise TrainingDiverged(
            {
                "step": step,
                **breakdown.as_floats(),
                "grad_norm": float(grad_norm),
                "lr": lr,
            }
        )
    optimizer.step()

    ema_update(state, ema_schedule(train, step))
    state.center = center_update(
        state.center, torch.cat(t_img_logits, dim=0), train.center_momentum
    )
    return breakdown


# --- the loop -----------------------------------------------------------------------


def build_optimizer(state: ModelState, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        state.student.parameters(),
        lr=cfg.base_lr,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
        foreach=True,
    )


def set_backbone_frozen(state: ModelState, frozen: bool) -> None:
    """Freeze/unfreeze encoder + embedding tables; heads always train."""
    state.student.encoder.requires_grad_(not frozen)
    state.student.tokenizer.requires_grad_(not frozen)


def build_state(run: RunConfig) -> ModelState:
    return ModelState.create(
        run.encoder,
        run.head,
        modalities=ModalityConfig(run.modalities),
        mode=run.tokenizer,
        seed=run.train.seed,
        base_grid=run.base_grid,
    )


def pretrain(
    run: RunConfig,
    subjects: Sequence[SubjectRecord],
    state: ModelState | None = None,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    max_steps: int | None = None,
) -> tuple[ModelState, list[dict]]:
    """Run (or resume) pretraining; returns the state and per-step metrics."""
    train = run.train
    records = [r for r in subjects if r.split == "train"]
    if not records:
        raise ValueError("no training-split subjects supplied")

    if state is None:
        state = build_state(run)
    optimizer = build_optimizer(state, train)

    if resume_from is not None:
        meta = load_checkpoint(resume_from, state, optimizer)
        rng = restore_np_rng(meta)
        start_step = int(meta["step"])
    else:
        rng = np.random.default_rng(train.seed)
        start_step = 0

    out_path = Path(out_dir) if out_dir is not None else None
    writer = None
    csv_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        csv_path = out_path / "metrics.csv"
        fresh = start_step == 0 or not csv_path.exists()
        csv_fh = open(csv_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(csv_fh, fieldnames=METRIC_FIELDS)
        if fresh:
            writer.writeheader()

    total = train.total_steps if max_steps is None else min(max_steps, train.total_steps)
    metrics: list[dict] = []
    step = start_step
    try:
        while step < total:
            epoch = step // train.steps_per_epoch
            set_backbone_frozen(state, epoch < train.head_warmup_epochs)
            chunk = min(
                train.steps_per_epoch - step % train.steps_per_epoch, total - step
            )
            batches = BatchPrefetcher(
                lambda _i: make_step_batch(records, run, rng), chunk, queue_size=2
            )
            for batch in batches:
                breakdown = training_step(state, batch, run, optimizer, step)
                row = {"step": step, **breakdown.as_floats()}
                metrics.append(row)
                if writer is not None:
                    writer.writerow(row)
                step += 1
            if csv_fh is not None:
                csv_fh.flush()
            if out_path is not None:
                # prefetcher drained: the rng stream is exactly consumed here
                save_checkpoint(
                    out_path / CHECKPOINT_NAME,
                    state,
                    optimizer,
                    step=step,
                    np_rng=rng,
                    config=run.to_dict(),
                )
    finally:
        if csv_fh is not None:
            csv_fh.close()
    return state, metrics
