"""Datasets: ingestion, procedural toy data, splitting, normalization.

The on-disk layout is uniform for every dataset: ``images/*.png`` plus a
``metadata.csv`` with columns image_id,label. Pixels live in [0, 1] float64
in memory; stages convert with :func:`to_diffusion_range` ([-1, 1]) or
:func:`to_classifier_input` (fixed per-channel standardization).
"""

from __future__ import annotations

import csv
import warnings as _warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .rng import RngState

HAM_CLASSES = ("akiec", "bcc", "bkl", "df", "mel", "nv", "vasc")
HAM_MALIGNANT = frozenset({"akiec", "bcc", "mel"})

# classifier inputs: (pixel - mean) / std per channel, constants fixed
CLASSIFIER_MEAN = 0.5
CLASSIFIER_STD = 0.5


def to_diffusion_range(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to the diffusion data range [-1, 1]."""
    return 2.0 * images - 1.0


def from_diffusion_range(images: np.ndarray) -> np.ndarray:
    return np.clip((images + 1.0) / 2.0, 0.0, 1.0)


def to_classifier_input(images: np.ndarray) -> np.ndarray:
    return (images - CLASSIFIER_MEAN) / CLASSIFIER_STD


def benign_flag_for(name: str) -> bool:
    """Fixed benign/malignant attribute by class name (overridable upstream)."""
    return not (name in HAM_MALIGNANT or name.startswith("malignant"))


@dataclass
class LabeledDataset:
    """Immutable image records with class structure and provenance."""

    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64 class ids
    class_names: tuple[str, ...]
    benign_flags: tuple[bool, ...]  # per class, True = benign
    provenance: str = "real"  # real | synthetic | mixed
    image_ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        c = len(self.class_names)
        if len(self.benign_flags) != c:
            raise DataError(
                f"{c} class names but {len(self.benign_flags)} benign flags"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= c):
            raise DataError(
                f"class ids must lie in [0, {c}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        if not self.image_ids:
            self.image_ids = tuple(f"img{i:06d}" for i in range(len(self.labels)))
        if len(self.image_ids) != len(self.labels):
            raise DataError(
                f"{len(self.labels)} records but {len(self.image_ids)} image ids"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def frequency_table(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            class_names=self.class_names,
            benign_flags=self.benign_flags,
            provenance=self.provenance,
            image_ids=tuple(self.image_ids[i] for i in idx),
        )

    def merge(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.class_names != self.class_names:
            raise DataError(
                f"cannot merge datasets with class sets "
                f"{self.class_names} and {other.class_names}"
            )
        if other.images.shape[1:] != self.images.shape[1:]:
            raise DataError(
                f"cannot merge image shapes {self.images.shape[1:]} "
                f"and {other.images.shape[1:]}"
            )
        provenance = (
            self.provenance
            if self.provenance == other.provenance
            else "mixed"
        )
        return LabeledDataset(
            images=np.concatenate([self.images, other.images]),
            labels=np.concatenate([self.labels, other.labels]),
            class_names=self.class_names,
            benign_flags=self.benign_flags,
            provenance=provenance,
            image_ids=self.image_ids + other.image_ids,
        )


# -- procedural toy data ---------------------------------------------------------


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV to RGB; all inputs in [0, 1], output stacked last."""
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def class_hue(class_id: int, num_classes: int) -> float:
    """Hue band center for a class: evenly spaced, no wraparound."""
    if num_classes == 1:
        return 0.03
    return 0.03 + 0.8 * class_id / (num_classes - 1)


def _render_toy_image(
    class_id: int, num_classes: int, size: int, rng: RngState
) -> np.ndarray:
    hue = class_hue(class_id, num_classes)
    blobs = 1 + class_id % 3
    radius = 0.10 + 0.06 * ((class_id // 3) % 3)
    fuzz = 0.006 + 0.014 * (class_id % 2)

    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij"
    )
    mask = np.zeros((size, size))
    for b in range(blobs):
        g = rng.child(f"blob{b}")
        cy, cx = g.uniform((2,), low=0.25, high=0.75)
        r = radius * g.child("r").uniform((), low=0.8, high=1.2)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = np.maximum(mask, 1.0 / (1.0 + np.exp((dist - r) / fuzz)))

    h = np.full((size, size), hue + rng.child("hue").uniform((), low=-0.02, high=0.02))
    s = mask * rng.child("sat").uniform((), low=0.65, high=0.85)
    v = 0.08 + mask * rng.child("val").uniform((), low=0.75, high=0.95)
    img = _hsv_to_rgb(h, s, v)
    img += rng.child("noise").normal((3, size, size), std=0.01)
    return np.clip(img, 0.0, 1.0)


def make_toy_dataset(
    counts,
    image_size: int = 32,
    seed: int = 0,
    malignant_classes: int | None = None,
) -> LabeledDataset:
    """Procedural imbalanced dataset: one hue band and blob pattern per class.

    ``counts`` gives per-class record counts; the trailing
    ``malignant_classes`` classes (default: up to three of the rarest)
    are flagged malignant. Deterministic under ``seed``.
    """
    counts = [int(c) for c in counts]
    num_classes = len(counts)
    if num_classes < 1 or any(c < 0 for c in counts):
        raise ParameterError(f"per-class counts must be non-negative, got {counts}")
    if image_size < 8:
        raise ParameterError(f"image size must be >= 8, got {image_size}")
    if malignant_classes is None:
        malignant_classes = min(3, num_classes - 1)
    if not 0 <= malignant_classes <= num_classes:
        raise ParameterError(
            f"malignant class count must lie in [0, {num_classes}], "
            f"got {malignant_classes}"
        )
    benign = num_classes - malignant_classes
    names = tuple(
        f"benign{i}" if i < benign else f"malignant{i - benign}"
        for i in range(num_classes)
    )
    root = RngState(seed).child("toy-data")
    images, labels, ids = [], [], []
    for c, n in enumerate(counts):
        for j in range(n):
            images.append(
                _render_toy_image(c, num_classes, image_size, root.child(f"c{c}", f"s{j}"))
            )
            labels.append(c)
            ids.append(f"{names[c]}_{j:05d}")
    if not images:
        images = np.zeros((0, 3, image_size, image_size))
    return LabeledDataset(
        images=np.asarray(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=names,
        benign_flags=tuple(benign_flag_for(n) for n in names),
        provenance="real",
        image_ids=tuple(ids),
    )


def mean_hue(image: np.ndarray) -> float:
    """Hue of the mean pixel; a one-number color summary per image."""
    r, g, b = np.asarray(image).reshape(3, -1).mean(axis=1)
    mx, mn = max(r, g, b), min(r, g, b)
    if mx == mn:
        return 0.0
    if mx == r:
        h = ((g - b) / (mx - mn)) % 6.0
    elif mx == g:
        h = (b - r) / (mx - mn) + 2.0
    else:
        h = (r - g) / (mx - mn) + 4.0
    return h / 6.0


# -- splitting --------------------------------------------------------------------


@dataclass(frozen=True)
class SplitAssignment:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    fractions: tuple[float, float]
    warnings: tuple[str, ...] = ()


def _apportion(n: int, fractions: list[float]) -> list[int]:
    """Largest-remainder apportionment of n records over fraction buckets.

    Floors every ideal share, then hands leftover records to the largest
    fractional remainders; ties resolve toward earlier buckets, so listing
    train first rounds toward train.
    """
    ideal = [f * n for f in fractions]
    out = [int(np.floor(x)) for x in ideal]
    rem = [x - o for x, o in zip(ideal, out)]
    short = n - sum(out)
    order = sorted(range(len(fractions)), key=lambda i: (-rem[i], i))
    for i in order[:short]:
        out[i] += 1
    return out


def split(
    dataset: LabeledDataset, fractions: dict, seed: int
) -> SplitAssignment:
    """Stratified class-wise split into train/val/test index sets.

    ``fractions`` holds train and val shares; the remainder is test.
    Each class is apportioned by largest remainder with ties toward
    train, which keeps per-class shares within one record of the global
    fractions.
    """
    f_train = float(fractions.get("train", 0.0))
    f_val = float(fractions.get("val", 0.0))
    unknown = set(fractions) - {"train", "val"}
    if unknown:
        raise ParameterError(f"unknown split fractions {sorted(unknown)}")
    if f_train < 0 or f_val < 0 or f_train + f_val > 1.0 + 1e-12:
        raise ParameterError(
            f"fractions must be non-negative and sum to at most 1, "
            f"got train={f_train}, val={f_val}"
        )
    f_test = max(0.0, 1.0 - f_train - f_val)
    parts = sum(1 for f in (f_train, f_val, f_test) if f > 0)
    rng = RngState(seed).child("split")
    buckets: list[list[np.ndarray]] = [[], [], []]
    notes: list[str] = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) == 0:
            continue
        members = members[rng.child(f"class{c}").permutation(len(members))]
        if len(members) < parts:
            note = (
                f"class {dataset.class_names[c]} has {len(members)} record(s), "
                f"fewer than {parts} split parts; assigning all to train"
            )
            notes.append(note)
            _warnings.warn(note)
            buckets[0].append(members)
            continue
        n_train, n_val, _ = _apportion(len(members), [f_train, f_val, f_test])
        buckets[0].append(members[:n_train])
        buckets[1].append(members[n_train : n_train + n_val])
        buckets[2].append(members[n_train + n_val :])
    packed = [
        np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64)
        for b in buckets
    ]
    return SplitAssignment(
        train=packed[0],
        val=packed[1],
        test=packed[2],
        seed=seed,
        fractions=(f_train, f_val),
        warnings=tuple(notes),
    )


# -- disk layout -------------------------------------------------------------------


def save_dataset(dataset: LabeledDataset, root) -> Path:
    """Write ``images/*.png`` + ``metadata.csv`` (image_id,label)."""
    from .images import save_png

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "metadata.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "label"])
        for i, image_id in enumerate(dataset.image_ids):
            save_png(root / "images" / f"{image_id}.png", dataset.images[i])
            writer.writerow([image_id, dataset.class_names[dataset.labels[i]]])
    return root


def _read_metadata(csv_path: Path) -> list[tuple[str, str]]:
    if not csv_path.exists():
        raise DataError(f"metadata file not found: {csv_path}")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        return []
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["image_id", "label"]:
        raise DataError(
            f"metadata header must start with image_id,label, got {header}"
        )
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < 2:
            raise DataError(f"metadata row {lineno} has {len(row)} columns, need 2")
        out.append((row[0].strip(), row[1].strip()))
    return out


def load_dataset(
    root,
    metadata_csv=None,
    allowed_labels: tuple[str, ...] | None = None,
    provenance: str = "real",
) -> LabeledDataset:
    """Load the uniform directory layout back into memory.

    Class ids follow sorted label-name order unless ``allowed_labels``
    pins an explicit ordering (then unknown labels are rejected).
    """
    from .images import load_png

    root = Path(root)
    csv_path = Path(metadata_csv) if metadata_csv else root / "metadata.csv"
    rows = _read_metadata(csv_path)
    if allowed_labels is not None:
        names = tuple(allowed_labels)
        lookup = {n: i for i, n in enumerate(names)}
        for lineno, (_, label) in enumerate(rows, start=2):
            if label not in lookup:
                raise DataError(
                    f"metadata row {lineno}: unknown label {label!r}; "
                    f"accepted labels are {sorted(lookup)}"
                )
    else:
        names = tuple(sorted({label for _, label in rows}))
        lookup = {n: i for i, n in enumerate(names)}
    images, labels, ids, missing = [], [], [], []
    shape = None
    for image_id, label in rows:
        path = None
        for ext in (".png", ".jpg", ".jpeg"):
            candidate = root / "images" / f"{image_id}{ext}"
            if candidate.exists():
                path = candidate
                break
        if path is None:
            missing.append(image_id)
            continue
        img = load_png(path)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DataError(
                f"image {path} has shape {img.shape}, expected {shape}"
            )
        images.append(img)
        labels.append(lookup[label])
        ids.append(image_id)
    if missing:
        raise DataError(
            f"{len(missing)} image file(s) missing under {root / 'images'}: "
            f"{missing[:5]}"
        )
    if not images:
        side = 8
        return LabeledDataset(
            images=np.zeros((0, 3, side, side)),
            labels=np.zeros(0, dtype=np.int64),
            class_names=names,
            benign_flags=tuple(benign_flag_for(n) for n in names),
            provenance=provenance,
            image_ids=(),
        )
    return LabeledDataset(
        images=np.asarray(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=names,
        benign_flags=tuple(benign_flag_for(n) for n in names),
        provenance=provenance,
        image_ids=tuple(ids),
    )


def ingest_ham_format(root, metadata_csv=None) -> LabeledDataset:
    """Load a dermoscopy-style directory with the fixed 7-code label table.

    Labels must come from the known diagnosis codes; anything else is
    an error naming the row and the accepted set.
    """
    return load_dataset(
        root, metadata_csv=metadata_csv, allowed_labels=HAM_CLASSES
    )
