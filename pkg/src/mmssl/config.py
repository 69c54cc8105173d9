"""Run configuration: training hyperparameters plus the merged run view.

RunConfig aggregates every component config so a single YAML document fully
determines a run; it is validated before any compute and written verbatim
into each output directory together with the seed and a git fingerprint.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import subprocess
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import MODALITIES, CropConfig, SynthSpec
from .masking import MaskingPolicy
from .model import EncoderConfig, HeadConfig
from .tokenizer import TokenizerMode


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 42
    batch_size: int = 64
    base_lr: float = 1e-4
    head_warmup_epochs: int = 10
    lr_warmup_epochs: int = 3
    weight_decay: float = 0.04
    betas: tuple[float, float] = (0.9, 0.999)
    clip_norm: float = 3.0
    supervised_weight: float = 2.0
    label_smoothing: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_warmup_epochs: int = 10
    ema_momentum_start: float = 0.992
    ema_momentum_end: float = 1.0
    center_momentum: float = 0.9
    seed: int = 0
    desk_scale: bool = False

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.head_warmup_epochs < self.epochs:
            raise ValueError(
                f"head_warmup_epochs {self.head_warmup_epochs} must lie in [0, epochs)"
            )
        if self.lr_warmup_epochs < 0 or self.lr_warmup_epochs > self.epochs:
            raise ValueError(f"lr_warmup_epochs {self.lr_warmup_epochs} outside [0, epochs]")
        if self.teacher_temp_start <= 0:
            raise ValueError("teacher_temp_start must be > 0")
        if not 0.0 <= self.ema_momentum_start <= self.ema_momentum_end <= 1.0:
            raise ValueError(
                f"ema momentum range ({self.ema_momentum_start}, {self.ema_momentum_end}) "
                "must be ordered within [0, 1]"
            )
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValueError(f"center_momentum {self.center_momentum} outside [0, 1)")
        for name in ("weight_decay", "clip_norm", "supervised_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing {self.label_smoothing} outside [0, 1)")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        args = dict(epochs=30, batch_size=32, head_warmup_epochs=10, desk_scale=True)
        args.update(overrides)
        return cls(**args)


@dataclass
class RunConfig:
    """Merged view of every component config plus paths and the run seed."""

    train: TrainConfig = field(default_factory=TrainConfig)
    masking: MaskingPolicy = field(default_factory=MaskingPolicy)
    tokenizer: TokenizerMode = field(default_factory=TokenizerMode)
    head: HeadConfig = field(default_factory=HeadConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    crops: CropConfig = field(default_factory=CropConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    modalities: tuple[str, ...] = MODALITIES
    base_grid: int = 7
    data_root: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.synth.validate()
        if self.crops.global_size % self.encoder.patch_size:
            raise ValueError(
                f"global crop {self.crops.global_size} not divisible by patch "
                f"{self.encoder.patch_size}"
            )
        if self.crops.local_size % self.encoder.patch_size:
            raise ValueError(
                f"local crop {self.crops.local_size} not divisible by patch "
                f"{self.encoder.patch_size}"
            )

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        """Desk-scale preset: 30 epochs, batch 32, 4 local crops."""
        args = dict(
            train=TrainConfig.desk(),
            crops=CropConfig(n_local=4),
            encoder=EncoderConfig.desk(),
        )
        args.update(overrides)
        return cls(**args)

    @property
    def seed(self) -> int:
        return self.train.seed

    def fingerprint(self) -> str:
        """Stable short hash of the full config for report labeling."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return _tuples_to_lists(out)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data or {})
        sections = {
            "train": TrainConfig,
            "masking": MaskingPolicy,
            "tokenizer": TokenizerMode,
            "head": HeadConfig,
            "encoder": EncoderConfig,
            "crops": CropConfig,
            "synth": SynthSpec,
        }
        kwargs = {}
        explicit_seeds = set()
        for key, section_cls in sections.items():
            if key in data:
                raw = data.pop(key)
                if isinstance(raw, dict) and "seed" in raw:
                    explicit_seeds.add(key)
                kwargs[key] = _build_section(section_cls, raw, key)
        for key in ("modalities", "base_grid", "data_root", "out_dir"):
            if key in data:
                val = data.pop(key)
                kwargs[key] = tuple(val) if key == "modalities" and val is not None else val
        seed = data.pop("seed", None)
        if data:
            raise ValueError(f"unknown config keys: {sorted(data)}")
        run = cls(**kwargs)
        # top-level seed fills any section that did not pin its own
        if seed is not None:
            if "train" not in explicit_seeds:
                run.train = dataclasses.replace(run.train, seed=int(seed))
            if "synth" not in explicit_seeds:
                run.synth = dataclasses.replace(run.synth, seed=int(seed))
        return run

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        return cls.from_dict(data or {})

    def to_yaml(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tuples_to_lists(v) for v in obj]
    return obj


def _build_section(section_cls, data, where: str):
    if dataclasses.is_dataclass(data):
        return data
    if not isinstance(data, dict):
        raise ValueError(f"config section {where!r} must be a mapping")
    known = {f.name: f for f in fields(section_cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown keys in config section {where!r}: {sorted(unknown)}")
    kwargs = {}
    for key, val in data.items():
        # YAML has no tuple type; coerce lists for tuple-annotated fields
        if isinstance(val, list) and "tuple" in str(known[key].type):
            val = tuple(val)
        kwargs[key] = val
    return section_cls(**kwargs)


def git_fingerprint(cwd: str | Path | None = None) -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            cwd=cwd,
            timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return "unknown"


def write_provenance(out_dir: str | Path, run: RunConfig) -> None:
    """Drop config + seed + git fingerprint into the run's output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run.to_yaml(out_dir / "config.yaml")
    prov = {"seed": run.seed, "git": git_fingerprint(), "fingerprint": run.fingerprint()}
    (out_dir / "provenance.json").write_text(json.dumps(prov, indent=2) + "\n")
