"""Linear probing and the evaluation suite.

Covers the hand-rolled metric trio (multiclass MCC, macro one-vs-rest AUROC
with tie correction, per-class F1), frozen-feature linear probing, the
drop-one-modality robustness protocol, the 4-row ablation runner, and
report rendering (markdown/csv/json plus static plots).

Conventions, all documented here because they only matter for degenerate
classifiers: MCC returns 0 when a denominator term vanishes; F1 returns 0
when a class is absent from both truth and prediction (the report flags
it); AUROC skips classes without both a positive and a negative and
returns 0.5 when no class qualifies.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import logsumexp
from scipy.stats import rankdata

from .config import RunConfig
from .data import CLASS_NAMES, CropConfig, SubjectRecord, eval_view
from .masking import MaskPlan, apply_plan, drop_modality
from .model import MultiModalModel
from .tokenizer import TokenizerMode

K = len(CLASS_NAMES)


# --- metrics ------------------------------------------------------------------------


def confusion_matrix(y_true, y_pred, k: int = K) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("y_true and y_pred must be equal-length 1-d arrays")
    if y_true.size and (
        y_true.min() < 0 or y_true.max() >= k or y_pred.min() < 0 or y_pred.max() >= k
    ):
        raise ValueError(f"labels outside [0, {k})")
    cm = np.zeros((k, k), dtype=int)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def compute_mcc(y_true, y_pred) -> float:
    """Multiclass MCC via the covariance-of-confusion form; 0 if degenerate."""
    cm = confusion_matrix(y_true, y_pred).astype(float)
    s = cm.sum()
    c = np.trace(cm)
    t = cm.sum(axis=1)  # true class counts
    p = cm.sum(axis=0)  # predicted class counts
    num = c * s - float(t @ p)
    den_sq = (s * s - float(p @ p)) * (s * s - float(t @ t))
    if den_sq <= 0:
        return 0.0
    return float(num / np.sqrt(den_sq))


def compute_auroc(y_true, class_scores) -> float:
    """Macro one-vs-rest AUROC from mid-ranks (tie-corrected)."""
    y_true = np.asarray(y_true, dtype=int)
    scores = np.asarray(class_scores, dtype=float)
    if scores.ndim != 2 or scores.shape[0] != y_true.shape[0]:
        raise ValueError("class_scores must be [n, K] aligned with y_true")
    aucs = []
    for k in range(scores.shape[1]):
        pos = y_true == k
        n_pos = int(pos.sum())
        n_neg = int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(scores[:, k])  # mid-rank convention handles ties
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
        aucs.append(auc)
    return float(np.mean(aucs)) if aucs else 0.5


def compute_f1(y_true, y_pred, cls: int) -> float:
    """Per-class F1; defined 0 when the class is absent from both sides."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    tp = int(np.sum((y_true == cls) & (y_pred == cls)))
    fp = int(np.sum((y_true != cls) & (y_pred == cls)))
    fn = int(np.sum((y_true == cls) & (y_pred != cls)))
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


@dataclass
class EvalReport:
    """One split's metric bundle; invariants checked on construction."""

    mcc: float
    auroc_macro_ovr: float
    f1: dict[str, float]
    split: str  # internal | external
    confusion: np.ndarray  # [K, K] counts, rows = true class
    config_fingerprint: str = ""
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not -1.0 - 1e-9 <= self.mcc <= 1.0 + 1e-9:
            raise ValueError(f"mcc {self.mcc} outside [-1, 1]")
        if not 0.0 <= self.auroc_macro_ovr <= 1.0:
            raise ValueError(f"auroc {self.auroc_macro_ovr} outside [0, 1]")
        if set(self.f1) != set(CLASS_NAMES):
            raise ValueError(f"f1 must cover {CLASS_NAMES}")
        for name, v in self.f1.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"f1[{name}] = {v} outside [0, 1]")
        self.confusion = np.asarray(self.confusion, dtype=int)
        if self.confusion.shape != (K, K) or (self.confusion < 0).any():
            raise ValueError("confusion matrix must be nonnegative [K, K]")

    def to_dict(self) -> dict:
        return {
            "mcc": self.mcc,
            "auroc_macro_ovr": self.auroc_macro_ovr,
            "f1": dict(self.f1),
            "split": self.split,
            "confusion": self.confusion.tolist(),
            "config_fingerprint": self.config_fingerprint,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            mcc=d["mcc"],
            auroc_macro_ovr=d["auroc_macro_ovr"],
            f1=dict(d["f1"]),
            split=d["split"],
            confusion=np.asarray(d["confusion"]),
            config_fingerprint=d.get("config_fingerprint", ""),
            flags=list(d.get("flags", [])),
        )


def build_report(y_true, y_pred, scores, split: str, fingerprint: str = "") -> EvalReport:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    flags = []
    f1 = {}
    for k, name in enumerate(CLASS_NAMES):
        f1[name] = compute_f1(y_true, y_pred, k)
        if not np.any(y_true == k) and not np.any(y_pred == k):
            flags.append(f"f1[{name}]=0 by convention: class absent from truth and prediction")
    mcc = compute_mcc(y_true, y_pred)
    if mcc == 0.0 and len(np.unique(y_pred)) == 1:
        flags.append("mcc=0 by convention: single-class predictions")
    return EvalReport(
        mcc=mcc,
        auroc_macro_ovr=compute_auroc(y_true, scores),
        f1=f1,
        split=split,
        confusion=confusion_matrix(y_true, y_pred),
        config_fingerprint=fingerprint,
        flags=flags,
    )


# --- linear probe -------------------------------------------------------------------


@dataclass
class LinearProbe:
    weights: np.ndarray  # [K, D]
    bias: np.ndarray  # [K]

    def scores(self, features) -> np.ndarray:
        z = np.asarray(features, dtype=float) @ self.weights.T + self.bias
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, features) -> np.ndarray:
        return self.scores(features).argmax(axis=1)


def linear_probe(
    features,
    labels,
    k: int = K,
    tol: float = 1e-6,
    ridge: float = 1e-6,
    max_iter: int = 2000,
) -> LinearProbe:
    """Multinomial logistic fit to convergence; deterministic (zeros init).

    Raises when any of the k classes is missing from the labels: a k-way
    probe cannot be fit without every class.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError("features must be [n, d] aligned with 1-d labels")
    present = np.unique(y)
    missing = sorted(set(range(k)) - set(present.tolist()))
    if missing or (y.min() < 0 or y.max() >= k):
        raise ValueError(f"probe training labels must cover all {k} classes; missing {missing}")
    n, d = x.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    def objective(flat: np.ndarray):
        w = flat[: k * d].reshape(k, d)
        b = flat[k * d :]
        z = x @ w.T + b
        logp = z - logsumexp(z, axis=1, keepdims=True)
        loss = -logp[np.arange(n), y].mean() + 0.5 * ridge * float((w * w).sum())
        probs = np.exp(logp)
        g = (probs - onehot) / n
        gw = g.T @ x + ridge * w
        gb = g.sum(axis=0)
        return loss, np.concatenate([gw.ravel(), gb])

    res = minimize(
        objective,
        np.zeros(k * d + k),
        jac=True,
        method="L-BFGS-B",
        options={"ftol": tol, "gtol": 1e-12, "maxiter": max_iter},
    )
    flat = res.x
    return LinearProbe(weights=flat[: k * d].reshape(k, d), bias=flat[k * d :])


# --- feature extraction -------------------------------------------------------------


def extract_features(
    model: MultiModalModel,
    records: Sequence[SubjectRecord],
    crop_cfg: CropConfig | None = None,
    drop: dict[str, str] | None = None,
    substitute: bool = False,
) -> np.ndarray:
    """CLS features [n, D] from deterministic eval views, frozen model.

    `drop` maps subject_id -> modality to remove; with `substitute` the
    modality's tokens are replaced by mask-token composites instead of
    being removed from the sequence.
    """
    crop_cfg = crop_cfg or CropConfig()
    drop = drop or {}
    stacked = model.tokenizer.mode.channel_stack
    if drop and stacked:
        raise ValueError("channel-stacked inputs cannot drop a single modality")
    feats = []
    with torch.inference_mode():
        for record in records:
            stack, names = eval_view(record, crop_cfg)
            if stacked:
                keep = [names.index(n) for n in model.tokenizer.mode.stack_modalities]
                stack, names = stack[keep], tuple(model.tokenizer.mode.stack_modalities)
            crop = model.tokenizer.tokenize(torch.from_numpy(stack[None]), names)
            name = drop.get(record.subject_id)
            if name is not None:
                if substitute:
                    flags = crop.modality_token_mask(name)
                    plan = MaskPlan(flags=flags, kind="full_modality", masked_modality=name)
                    crop = apply_plan(crop, plan, model.tokenizer.mask_token)
                else:
                    crop = drop_modality(crop, name)
            cls_feat, _ = model.encode(crop)
            feats.append(cls_feat[0].numpy().copy())
    return np.stack(feats)


def fit_probe_on_split(
    model: MultiModalModel,
    records: Sequence[SubjectRecord],
    crop_cfg: CropConfig | None = None,
) -> LinearProbe:
    """Probe on the labeled subset of the train split."""
    train = [r for r in records if r.split == "train" and r.label is not None]
    if not train:
        raise ValueError("no labeled training subjects to fit the probe on")
    feats = extract_features(model, train, crop_cfg)
    labels = np.array([r.label for r in train])
    return linear_probe(feats, labels)


def evaluate_split(
    model: MultiModalModel,
    probe: LinearProbe,
    records: Sequence[SubjectRecord],
    split: str,
    crop_cfg: CropConfig | None = None,
    fingerprint: str = "",
    drop: dict[str, str] | None = None,
    substitute: bool = False,
) -> EvalReport:
    subset = [r for r in records if r.split == split]
    if not subset:
        raise ValueError(f"no subjects in split {split!r}")
    missing_label = [r.subject_id for r in subset if r.label is None]
    if missing_label:
        raise ValueError(f"unlabeled subjects in evaluation split: {missing_label[:3]}")
    feats = extract_features(model, subset, crop_cfg, drop=drop, substitute=substitute)
    y_true = np.array([r.label for r in subset])
    scores = probe.scores(feats)
    tag = "internal" if split == "test_internal" else "external" if split == "test_external" else split
    report = build_report(y_true, scores.argmax(axis=1), scores, tag, fingerprint)
    return report


def missing_modality_eval(
    model: MultiModalModel,
    records: Sequence[SubjectRecord],
    rng: np.random.Generator,
    split: str = "test_internal",
    probe: LinearProbe | None = None,
    crop_cfg: CropConfig | None = None,
    control: bool = False,
    substitute: bool = False,
    fingerprint: str = "",
) -> EvalReport:
    """Drop one uniformly chosen modality per subject, then evaluate.

    The control flag disables the drops (result equals the standard eval);
    `substitute` masks the tokens in place instead of removing them. Drop
    choices are a pure function of the rng state, recorded via flags.
    """
    if probe is None:
        probe = fit_probe_on_split(model, records, crop_cfg)
    subset = [r for r in records if r.split == split]
    drop: dict[str, str] = {}
    if not control:
        for record in subset:  # fixed iteration order keeps choices seeded
            present = record.present_modalities
            drop[record.subject_id] = present[int(rng.integers(len(present)))]
    report = evaluate_split(
        model, probe, records, split, crop_cfg, fingerprint, drop=drop or None,
        substitute=substitute,
    )
    report.flags.append(
        "missing-modality control (no drops)" if control
        else f"dropped one modality per subject ({'masked' if substitute else 'removed'})"
    )
    return report


# --- ablation -----------------------------------------------------------------------

ABLATION_LABELS = {
    1: "concat positions",
    2: "+ per-modality positions",
    3: "+ modality embeddings",
    4: "+ full-modality masking",
}


def ablation_variant(row: int):
    """Tokenizer/masking settings of one ablation row (cumulative design)."""
    from .masking import MaskingPolicy

    if row == 1:
        return (
            TokenizerMode(pos_mode="global_concat", use_modality_embedding=False),
            MaskingPolicy(modality_mask_prob=0.0),
        )
    if row == 2:
        return (
            TokenizerMode(pos_mode="per_modality", use_modality_embedding=False),
            MaskingPolicy(modality_mask_prob=0.0),
        )
    if row == 3:
        return (
            TokenizerMode(pos_mode="per_modality", use_modality_embedding=True),
            MaskingPolicy(modality_mask_prob=0.0),
        )
    if row == 4:
        return (
            TokenizerMode(pos_mode="per_modality", use_modality_embedding=True),
            MaskingPolicy(modality_mask_prob=0.2),
        )
    raise ValueError(f"ablation rows are 1..4, got {row}")


@dataclass
class AblationRow:
    row: int
    label: str
    fingerprint: str
    internal: EvalReport
    external: EvalReport

    def to_dict(self) -> dict:
        return {
            "row": self.row,
            "label": self.label,
            "fingerprint": self.fingerprint,
            "internal": self.internal.to_dict(),
            "external": self.external.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AblationRow":
        return cls(
            row=d["row"],
            label=d["label"],
            fingerprint=d.get("fingerprint", ""),
            internal=EvalReport.from_dict(d["internal"]),
            external=EvalReport.from_dict(d["external"]),
        )


def run_ablation(
    records: Sequence[SubjectRecord],
    base: RunConfig,
    out_root: str | Path | None = None,
) -> list[AblationRow]:
    """Train and evaluate all 4 rows under one seed/budget; returns the table."""
    from .trainer import pretrain

    rows = []
    for row in sorted(ABLATION_LABELS):
        tokenizer, masking = ablation_variant(row)
        run = dataclasses.replace(base, tokenizer=tokenizer, masking=masking)
        out_dir = Path(out_root) / f"row{row}" if out_root is not None else None
        state, _ = pretrain(run, records, out_dir=out_dir)
        probe = fit_probe_on_split(state.teacher, records, run.crops)
        fp = run.fingerprint()
        rows.append(
            AblationRow(
                row=row,
                label=ABLATION_LABELS[row],
                fingerprint=fp,
                internal=evaluate_split(state.teacher, probe, records, "test_internal", run.crops, fp),
                external=evaluate_split(state.teacher, probe, records, "test_external", run.crops, fp),
            )
        )
    fingerprints = [r.fingerprint for r in rows]
    if len(set(fingerprints)) != len(fingerprints):
        raise RuntimeError("ablation rows produced identical config fingerprints")
    return rows


# --- report rendering ---------------------------------------------------------------


def _row_cells(row: AblationRow) -> list[str]:
    cells = [str(row.row), row.label]
    for report in (row.internal, row.external):
        cells += [f"{report.mcc:.3f}", f"{report.auroc_macro_ovr:.3f}"]
        cells += [f"{report.f1[name]:.3f}" for name in CLASS_NAMES]
    return cells


_HEADER = ["row", "variant"] + [
    f"{split}_{metric}"
    for split in ("internal", "external")
    for metric in ("mcc", "auroc") + tuple(f"f1_{n}" for n in CLASS_NAMES)
]


def render_ablation(rows: Sequence[AblationRow], fmt: str = "md") -> str:
    if fmt == "json":
        return json.dumps([r.to_dict() for r in rows], indent=2)
    table = [_HEADER] + [_row_cells(r) for r in rows]
    if fmt == "csv":
        return "\n".join(",".join(cells) for cells in table) + "\n"
    if fmt == "md":
        lines = [
            "| " + " | ".join(table[0]) + " |",
            "|" + "|".join("---" for _ in table[0]) + "|",
        ]
        lines += ["| " + " | ".join(cells) + " |" for cells in table[1:]]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r} (use md, csv, or json)")


def write_plots(rows: Sequence[AblationRow], out_dir: str | Path, metrics_csv: str | Path | None = None) -> list[Path]:
    """Static images: ablation metric bars, plus loss curves when a log exists."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    labels = [f"{r.row}: {r.label}" for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(x - 0.2, [r.internal.mcc for r in rows], width=0.4, label="internal MCC")
    ax.bar(x + 0.2, [r.external.mcc for r in rows], width=0.4, label="external MCC")
    ax.set_xticks(x, labels, rotation=15, ha="right")
    ax.set_ylabel("MCC")
    ax.legend()
    fig.tight_layout()
    bars = out_dir / "ablation_mcc.png"
    fig.savefig(bars)
    plt.close(fig)
    written.append(bars)

    if metrics_csv is not None and Path(metrics_csv).exists():
        rows_ = np.genfromtxt(metrics_csv, delimiter=",", names=True)
        fig, ax = plt.subplots(figsize=(8, 4))
        for key in ("image_loss", "patch_loss", "supervised_loss", "total"):
            ax.plot(rows_["step"], rows_[key], label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        curves = out_dir / "loss_curves.png"
        fig.savefig(curves)
        plt.close(fig)
        written.append(curves)
    return written
