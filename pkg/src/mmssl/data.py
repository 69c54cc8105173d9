"""Dataset model, synthetic multi-modal generator, on-disk format, crop sampling.

A dataset is a flat list of subjects, each holding one aligned 2D slice per
MRI modality plus a binary tumor mask and an optional subtype label. The
synthetic generator stands in for a real glioma cohort at desk scale: class
identity is encoded by tumor-appearance features (rim enhancement contrast
between sequences of an acquisition family, core texture frequency, halo
extent) rendered into a configurable subset of modalities, so
missing-modality behavior can be controlled exactly.

On-disk layout (all multi-byte values little-endian):

    root/manifest                     JSON, UTF-8
    root/subjects/<id>/<modality>.f32 raw float32, row-major
    root/subjects/<id>/mask.u8        raw uint8 {0, 1}
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import ndimage

from .interp import resize_stack

MODALITIES = ("T1w", "T1ce", "T2w", "FLAIR")
CLASS_NAMES = ("astro", "gbm", "oligo")
SPLITS = ("train", "val", "test_internal", "test_external")

MIN_TUMOR_PIXELS = 500
MANIFEST_NAME = "manifest"
FORMAT_VERSION = 1


class DatasetError(Exception):
    """Manifest or array file inconsistent with the documented format."""


class InfeasibleSpec(ValueError):
    """Generator parameters cannot satisfy the construction guarantees."""


@dataclass
class SubjectRecord:
    """One subject: aligned per-modality slices, tumor mask, optional label."""

    subject_id: str
    slices: dict[str, np.ndarray]  # modality -> [H, W] float32
    tumor_mask: np.ndarray  # [H, W] uint8 in {0, 1}
    label: int | None
    split: str

    @property
    def present_modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.slices)

    def validate(self) -> None:
        if not self.slices:
            raise DatasetError(f"{self.subject_id}: no modalities present")
        shape = self.tumor_mask.shape
        for m, arr in self.slices.items():
            if arr.shape != shape:
                raise DatasetError(
                    f"{self.subject_id}: {m} shape {arr.shape} != mask shape {shape}"
                )
        vals = np.unique(self.tumor_mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise DatasetError(f"{self.subject_id}: mask is not binary (values {vals[:5]})")
        if self.label is not None and self.label not in range(len(CLASS_NAMES)):
            raise DatasetError(f"{self.subject_id}: unknown label {self.label}")
        if self.split not in SPLITS:
            raise DatasetError(f"{self.subject_id}: unknown split {self.split!r}")


@dataclass
class SynthSpec:
    """Parameters of the synthetic cohort."""

    n_subjects: int = 800  # non-external; external adds 20% on top
    labeled_fraction: float = 0.5
    class_prevalence: tuple[float, float, float] = (0.8, 0.1, 0.1)
    image_size: int = 96
    redundancy: float = 1.0  # 0: all class evidence in FLAIR only; 1: in every modality
    seed: int = 0
    # Explicit per-split counts (train, val, test_internal, test_external);
    # when None, splits are 70/10/20 of n_subjects plus 20% external.
    split_counts: tuple[int, int, int, int] | None = None

    def validate(self) -> None:
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise InfeasibleSpec(f"labeled_fraction {self.labeled_fraction} outside [0, 1]")
        if len(self.class_prevalence) != len(CLASS_NAMES):
            raise InfeasibleSpec("class_prevalence must have one entry per class")
        if any(p < 0 for p in self.class_prevalence):
            raise InfeasibleSpec("class_prevalence entries must be nonnegative")
        if abs(sum(self.class_prevalence) - 1.0) > 1e-6:
            raise InfeasibleSpec(f"class_prevalence sums to {sum(self.class_prevalence)}")
        if not 0.0 <= self.redundancy <= 1.0:
            raise InfeasibleSpec(f"redundancy {self.redundancy} outside [0, 1]")
        if self.image_size < 64:
            raise InfeasibleSpec(
                f"image_size {self.image_size} too small to guarantee "
                f"{MIN_TUMOR_PIXELS} tumor pixels with margins"
            )
        if self.split_counts is not None and (
            len(self.split_counts) != 4 or any(c < 0 for c in self.split_counts)
        ):
            raise InfeasibleSpec(f"split_counts must be 4 nonnegative ints, got {self.split_counts}")

    def resolved_split_counts(self) -> dict[str, int]:
        if self.split_counts is not None:
            return dict(zip(SPLITS, self.split_counts))
        n = self.n_subjects
        n_train = int(round(0.7 * n))
        n_val = int(round(0.1 * n))
        n_internal = n - n_train - n_val
        n_external = int(round(0.2 * n))
        return {
            "train": n_train,
            "val": n_val,
            "test_internal": n_internal,
            "test_external": n_external,
        }


# --- synthetic rendering -----------------------------------------------------

# Class-independent appearance.
_BG_LEVEL = {"T1w": 0.20, "T1ce": 0.35, "T2w": 0.50, "FLAIR": 0.40}
_CORE_AMP = {"T1w": 0.50, "T1ce": 0.80, "T2w": 1.00, "FLAIR": 0.90}

# MRI intensities are non-quantitative, so tumor-feature amplitudes carry a
# per-subject gain drawn per acquisition family (T1-family, T2-family).
# A feature term is gain-scaled iff both family members carry it; a feature
# confined to one sequence renders at reference amplitude so low-redundancy
# datasets keep their single-carrier levels readable.
_FAMILIES = (("T1w", "T1ce"), ("T2w", "FLAIR"))  # lead sequence listed second
_FAMILY_GAIN = (0.6, 1.6)
_FAMILY_OF = {m: i for i, pair in enumerate(_FAMILIES) for m in pair}

# Class-coded features. Rim enhancement is contrast-coded: the lead/other
# amplitude split within a family depends on the class while the family sum
# stays constant, so under gain noise the classes separate through
# same-location cross-sequence differences rather than absolute brightness
# (the radiological reading, e.g. the T2-FLAIR mismatch sign).
_RIM_LEAD = (3.0, 1.8, 0.6)  # astro, gbm, oligo
_RIM_OTHER = (0.6, 1.8, 3.0)
_TEXTURE_FREQ = (4.0, 7.0, 10.0)  # cycles per image width
_TEXTURE_AMP = 0.8
# halo extent descends with class like the lead rim level, so boundary
# cells reinforce rather than cancel for coarse pixel readers
_HALO_EXTENT = (9.0, 5.0, 2.0)  # e-folding length in pixels
_HALO_AMP = 0.9

# Carrier preference order per feature; redundancy r activates the first
# 1 + round(r * (|M| - 1)) entries, so r = 0 keeps all class evidence in
# FLAIR and r = 1 spreads every feature across all four modalities. Second
# entries complete the T2 family, making the contrast codes readable from
# redundancy ~1/3 up.
_CARRIER_ORDER = {
    "rim": ("FLAIR", "T2w", "T1ce", "T1w"),
    "texture": ("FLAIR", "T2w", "T1ce", "T1w"),
    "halo": ("FLAIR", "T2w", "T1w", "T1ce"),
}

# Acquisition-site shift applied to the external test split.
_INTERNAL_SITE = {"bg_sigma": 6.0, "bg_amp": 0.28, "gain": 1.0, "offset": 0.0, "noise": 0.12}
_EXTERNAL_SITE = {"bg_sigma": 2.5, "bg_amp": 0.42, "gain": 1.30, "offset": 0.40, "noise": 0.16}


def feature_carriers(feature: str, redundancy: float) -> tuple[str, ...]:
    order = _CARRIER_ORDER[feature]
    k = 1 + int(np.floor(redundancy * (len(order) - 1) + 0.5))
    return order[:k]


def _largest_remainder_counts(fractions: Sequence[float], n: int) -> list[int]:
    ideal = np.asarray(fractions, dtype=float) * n
    counts = np.floor(ideal).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(ideal - counts), kind="stable")
    for i in order[:remainder]:
        counts[i] += 1
    return counts.tolist()


def _capped_allocation(ideal: Sequence[float], total: int, caps: Sequence[int]) -> list[int]:
    """Integer allocation near `ideal` summing to `total`, per-entry capped."""
    counts = np.minimum(np.floor(ideal).astype(int), caps)
    frac_order = np.argsort(-(np.asarray(ideal) - counts), kind="stable")
    remaining = total - counts.sum()
    while remaining > 0:
        progressed = False
        for i in frac_order:
            if remaining == 0:
                break
            if counts[i] < caps[i]:
                counts[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise InfeasibleSpec("labeled-count allocation exceeds class capacities")
    return counts.tolist()


def _render_subject(
    rng: np.random.Generator, cls: int, spec: SynthSpec, external: bool
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    size = spec.image_size
    site = _EXTERNAL_SITE if external else _INTERNAL_SITE

    # Elliptical tumor near the image center; margins keep the center pixel
    # inside the tumor for every draw (offset <= 8*sqrt(2) < min semi-axis).
    cy, cx = size / 2.0 + rng.uniform(-8.0, 8.0, size=2)
    ax_a, ax_b = rng.uniform(14.0, 22.0, size=2)
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    mask = ((u / ax_a) ** 2 + (v / ax_b) ** 2 <= 1.0).astype(np.uint8)
    if int(mask.sum()) < MIN_TUMOR_PIXELS:
        raise InfeasibleSpec(
            f"tumor area {int(mask.sum())} < {MIN_TUMOR_PIXELS} at image_size {size}"
        )

    d_in = ndimage.distance_transform_edt(mask)
    d_out = ndimage.distance_transform_edt(1 - mask)

    core_profile = np.clip(d_in / 3.0, 0.0, 1.0)
    rim_profile = np.exp(-(((d_in - 2.5) / 3.0) ** 2)) * (d_in > 0)
    halo_profile = np.exp(-d_out / _HALO_EXTENT[cls]) * (d_out > 0)
    phi = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(
        2.0 * np.pi * _TEXTURE_FREQ[cls] * (np.cos(phi) * xx + np.sin(phi) * yy) / size + phase
    )
    texture_profile = wave * np.clip((d_in - 2.0) / 2.0, 0.0, 1.0)

    carriers = {f: feature_carriers(f, spec.redundancy) for f in _CARRIER_ORDER}
    family_gain = rng.uniform(*_FAMILY_GAIN, size=len(_FAMILIES))

    slices: dict[str, np.ndarray] = {}
    for m in MODALITIES:
        fam = _FAMILY_OF[m]
        lead = m == _FAMILIES[fam][1]

        def g(feature_carriers_: tuple[str, ...]) -> float:
            both = all(name in feature_carriers_ for name in _FAMILIES[fam])
            return float(family_gain[fam]) if both else 1.0

        smooth = ndimage.gaussian_filter(rng.normal(size=(size, size)), site["bg_sigma"])
        smooth /= max(smooth.std(), 1e-8)
        img = _BG_LEVEL[m] + site["bg_amp"] * smooth
        img = img + g(MODALITIES) * _CORE_AMP[m] * core_profile
        if m in carriers["rim"]:
            rim_amp = (_RIM_LEAD if lead else _RIM_OTHER)[cls]
            img = img + g(carriers["rim"]) * rim_amp * rim_profile
        if m in carriers["texture"]:
            img = img + g(carriers["texture"]) * _TEXTURE_AMP * texture_profile
        if m in carriers["halo"]:
            img = img + g(carriers["halo"]) * _HALO_AMP * halo_profile
        img = site["gain"] * img + site["offset"]
        img = img + rng.normal(0.0, site["noise"], size=(size, size))
        slices[m] = img.astype(np.float32)
    return slices, mask


def synth_generate(spec: SynthSpec) -> list[SubjectRecord]:
    """Generate the synthetic cohort in memory (see module docstring)."""
    spec.validate()
    counts = spec.resolved_split_counts()
    root_ss = np.random.SeedSequence(spec.seed)
    alloc_rng = np.random.Generator(np.random.PCG64(root_ss.spawn(1)[0]))

    records: list[SubjectRecord] = []
    index = 0
    for split in SPLITS:
        n_split = counts[split]
        class_counts = _largest_remainder_counts(spec.class_prevalence, n_split)
        classes = np.repeat(np.arange(len(CLASS_NAMES)), class_counts)
        alloc_rng.shuffle(classes)

        # Labels withheld only on the training split, stratified per class so
        # labeled-class frequencies track the prevalence up to rounding.
        labeled = np.ones(n_split, dtype=bool)
        if split == "train" and n_split > 0:
            n_labeled = int(np.floor(spec.labeled_fraction * n_split + 0.5))
            keep_counts = _capped_allocation(
                [spec.labeled_fraction * n_c for n_c in class_counts], n_labeled, class_counts
            )
            for c, n_keep in enumerate(keep_counts):
                idx = np.flatnonzero(classes == c)
                keep = alloc_rng.permutation(idx)[:n_keep]
                labeled[idx] = False
                labeled[keep] = True

        for i in range(n_split):
            ss = np.random.SeedSequence([spec.seed, 1000 + index])
            rng = np.random.Generator(np.random.PCG64(ss))
            cls = int(classes[i])
            slices, mask = _render_subject(rng, cls, spec, external=(split == "test_external"))
            records.append(
                SubjectRecord(
                    subject_id=f"synth-{index:05d}",
                    slices=slices,
                    tumor_mask=mask,
                    label=cls if labeled[i] else None,
                    split=split,
                )
            )
            index += 1
    return records


# --- on-disk format ----------------------------------------------------------


def save_dataset(records: Sequence[SubjectRecord], root: str | Path, generator_meta: dict | None = None) -> None:
    root = Path(root)
    (root / "subjects").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        rec.validate()
        subj_dir = root / "subjects" / rec.subject_id
        subj_dir.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for m, arr in rec.slices.items():
            rel = f"subjects/{rec.subject_id}/{m}.f32"
            arr.astype("<f4").tofile(root / rel)
            arrays[m] = rel
        rel = f"subjects/{rec.subject_id}/mask.u8"
        rec.tumor_mask.astype(np.uint8).tofile(root / rel)
        arrays["mask"] = rel
        entries.append(
            {
                "id": rec.subject_id,
                "split": rec.split,
                "label": rec.label,
                "shape": list(rec.tumor_mask.shape),
                "arrays": arrays,
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "modalities": list(MODALITIES),
        "class_names": list(CLASS_NAMES),
        "generator": generator_meta or {},
        "subjects": entries,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def _read_raw(path: Path, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"array file missing: {path}")
    arr = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise DatasetError(f"{path}: has {arr.size} values, manifest shape {shape} needs {expected}")
    return arr.reshape(shape)


def load_dataset(root: str | Path) -> list[SubjectRecord]:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"manifest missing: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{manifest_path}: unsupported format_version {manifest.get('format_version')}")

    records = []
    for entry in manifest["subjects"]:
        shape = tuple(entry["shape"])
        arrays = entry["arrays"]
        if "mask" not in arrays:
            raise DatasetError(f"{entry['id']}: manifest entry lacks a mask array")
        mask = _read_raw(root / arrays["mask"], np.uint8, shape)
        slices = {
            m: _read_raw(root / rel, "<f4", shape).astype(np.float32)
            for m, rel in arrays.items()
            if m != "mask"
        }
        rec = SubjectRecord(
            subject_id=entry["id"],
            slices=slices,
            tumor_mask=mask,
            label=entry["label"],
            split=entry["split"],
        )
        rec.validate()
        records.append(rec)
    return records


def split_subjects(records: Sequence[SubjectRecord]) -> dict[str, list[SubjectRecord]]:
    out: dict[str, list[SubjectRecord]] = {s: [] for s in SPLITS}
    for rec in records:
        out[rec.split].append(rec)
    return out


# --- crop sampling -----------------------------------------------------------


@dataclass
class CropConfig:
    """Multi-crop geometry; sizes follow the tokenizer's patch grid."""

    window: int = 96
    global_size: int = 98
    local_size: int = 56
    n_global: int = 2
    n_local: int = 8
    global_scale: tuple[float, float] = (0.5, 1.0)  # area fraction of the window
    local_scale: tuple[float, float] = (0.2, 0.5)
    interp: str = "bicubic"


@dataclass
class CropSet:
    """Tumor-centered multi-crop view of one subject, aligned across modalities."""

    global_crops: np.ndarray  # [n_global, M, global_size, global_size] float32
    local_crops: np.ndarray  # [n_local, M, local_size, local_size] float32
    modalities: tuple[str, ...]
    global_scales: np.ndarray = field(default_factory=lambda: np.zeros(0))
    local_scales: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # Source geometry in window coordinates, rows of (top, left, side).
    global_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), int))
    local_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), int))


def _tumor_window(record: SubjectRecord, window: int, rng: np.random.Generator | None) -> tuple[int, int]:
    """Top-left of a tumor-containing window; identity when slices match it."""
    h, w = record.tumor_mask.shape
    if h < window or w < window:
        raise ValueError(f"{record.subject_id}: slices {h}x{w} smaller than window {window}")
    if h == window and w == window:
        return 0, 0
    ys, xs = np.nonzero(record.tumor_mask)
    if rng is None:
        cy, cx = int(round(ys.mean())), int(round(xs.mean()))
    else:
        k = int(rng.integers(len(ys)))
        cy, cx = int(ys[k]), int(xs[k])
    top = int(np.clip(cy - window // 2, 0, h - window))
    left = int(np.clip(cx - window // 2, 0, w - window))
    return top, left


def _sample_tumor_crop(
    stack: np.ndarray,
    mask: np.ndarray,
    scale_range: tuple[float, float],
    out_size: int,
    rng: np.random.Generator,
    interp: str,
) -> tuple[np.ndarray, float, tuple[int, int, int]]:
    """One tumor-centered random-resized crop applied to all modalities."""
    window = mask.shape[0]
    ys, xs = np.nonzero(mask)
    for shrink in range(64):
        frac = rng.uniform(*scale_range)
        side = max(4, int(round(np.sqrt(frac) * window)) - 2 * shrink)
        side = min(side, window)
        lo = side // 2
        hi_y = mask.shape[0] - side + lo
        hi_x = mask.shape[1] - side + lo
        ok = (ys >= lo) & (ys <= hi_y) & (xs >= lo) & (xs <= hi_x)
        if ok.any():
            k = int(rng.integers(int(ok.sum())))
            cy, cx = int(ys[ok][k]), int(xs[ok][k])
            top, left = cy - lo, cx - lo
            crop = stack[:, top : top + side, left : left + side]
            resized = resize_stack(crop.astype(np.float64), out_size, out_size, interp)
            return resized.astype(np.float32), side**2 / window**2, (top, left, side)
    raise RuntimeError("no tumor-centered crop position found")  # unreachable for valid masks


def sample_training_view(
    record: SubjectRecord, rng: np.random.Generator, cfg: CropConfig | None = None
) -> CropSet:
    """Tumor-centered multi-crop set; every crop center is a tumor pixel."""
    cfg = cfg or CropConfig()
    n_tumor = int(record.tumor_mask.sum())
    if n_tumor < MIN_TUMOR_PIXELS:
        raise ValueError(
            f"{record.subject_id}: {n_tumor} tumor pixels < required {MIN_TUMOR_PIXELS}"
        )
    top, left = _tumor_window(record, cfg.window, rng)
    names = record.present_modalities
    win = slice(top, top + cfg.window), slice(left, left + cfg.window)
    stack = np.stack([record.slices[m][win] for m in names])
    mask = record.tumor_mask[win]

    globals_, g_scales, g_boxes = [], [], []
    for _ in range(cfg.n_global):
        crop, frac, box = _sample_tumor_crop(stack, mask, cfg.global_scale, cfg.global_size, rng, cfg.interp)
        globals_.append(crop)
        g_scales.append(frac)
        g_boxes.append(box)
    locals_, l_scales, l_boxes = [], [], []
    for _ in range(cfg.n_local):
        crop, frac, box = _sample_tumor_crop(stack, mask, cfg.local_scale, cfg.local_size, rng, cfg.interp)
        locals_.append(crop)
        l_scales.append(frac)
        l_boxes.append(box)

    return CropSet(
        global_crops=np.stack(globals_) if globals_ else np.zeros((0, len(names), cfg.global_size, cfg.global_size), np.float32),
        local_crops=np.stack(locals_) if locals_ else np.zeros((0, len(names), cfg.local_size, cfg.local_size), np.float32),
        modalities=names,
        global_scales=np.array(g_scales),
        local_scales=np.array(l_scales),
        global_boxes=np.array(g_boxes, int).reshape(-1, 3),
        local_boxes=np.array(l_boxes, int).reshape(-1, 3),
    )


def eval_view(record: SubjectRecord, cfg: CropConfig | None = None) -> tuple[np.ndarray, tuple[str, ...]]:
    """Deterministic tumor-centered crop resized to the global crop size."""
    cfg = cfg or CropConfig()
    top, left = _tumor_window(record, cfg.window, rng=None)
    names = record.present_modalities
    win = slice(top, top + cfg.window), slice(left, left + cfg.window)
    stack = np.stack([record.slices[m][win] for m in names]).astype(np.float64)
    out = resize_stack(stack, cfg.global_size, cfg.global_size, cfg.interp)
    return out.astype(np.float32), names


# --- bounded prefetch queue ---------------------------------------------------


class BatchPrefetcher:
    """Single-producer bounded FIFO batch queue.

    Batches are produced by calling `make_batch(i)` for i in range(n_batches)
    in order on one background thread; at most `queue_size` finished batches
    are held at a time, so order and rng consumption stay deterministic.
    """

    def __init__(self, make_batch: Callable[[int], object], n_batches: int, queue_size: int = 2):
        if queue_size < 1:
            raise ValueError("queue_size must be >= 1")
        self._queue: queue.Queue = queue.Queue(maxsize=queue_size)
        self._n = n_batches
        self._error: BaseException | None = None

        def produce() -> None:
            try:
                for i in range(n_batches):
                    self._queue.put((i, make_batch(i)))
            except BaseException as exc:  # surfaced on the consumer side
                self._error = exc
            finally:
                self._queue.put(None)

        self._thread = threading.Thread(target=produce, daemon=True)
        self._thread.start()

    def __iter__(self) -> Iterator[object]:
        seen = 0
        while True:
            item = self._queue.get()
            if item is None:
                if self._error is not None:
                    raise self._error
                if seen != self._n:
                    raise RuntimeError(f"producer stopped after {seen}/{self._n} batches")
                return
            i, batch = item
            if i != seen:
                raise RuntimeError(f"batch order violated: got {i}, expected {seen}")
            seen += 1
            yield batch

    @property
    def pending(self) -> int:
        return self._queue.qsize()
