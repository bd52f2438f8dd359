"""Datasets: synthetic paired-task images, IDX ingestion and stratified splits."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import read_container, write_container
from .errors import DataFormatError
from .modelgraph import TensorSpec

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
ATTRIBUTES = ("stripe", "corner_glyph")


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # "user" or "attacker"
    num_classes: int
    description: str = ""

    def __post_init__(self):
        if self.kind not in ("user", "attacker"):
            raise ValueError(f"task kind must be 'user' or 'attacker', got {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("a task needs at least 2 classes")


@dataclass
class DatasetManifest:
    """Images as uint8 (n, C, H, W) with one class index per image."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    task: TaskSpec
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise DataFormatError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.task.num_classes:
            raise DataFormatError("label outside [0, num_classes)")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def input_spec(self) -> TensorSpec:
        return TensorSpec(self.images.shape[1:], self.images.dtype.name)

    def features(self) -> np.ndarray:
        """Model inputs: float32 scaled to [0, 1]."""
        if self.images.dtype == np.uint8:
            return self.images.astype(np.float32) / np.float32(255.0)
        return self.images.astype(np.float32, copy=False)

    def subset(self, idx: np.ndarray, name: str | None = None) -> "DatasetManifest":
        return replace(self, name=name or self.name, images=self.images[idx], labels=self.labels[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.task.num_classes)


# --- synthetic generator ---------------------------------------------------------

_GLYPH = 5  # template resolution
_SCALE = 3  # upsampling factor -> 15x15 glyphs


def _templates(num_classes: int, seed: int = 7) -> np.ndarray:
    """Distinct random binary 5x5 glyphs, pairwise Hamming distance >= 6."""
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    while len(out) < num_classes:
        t = rng.random((_GLYPH, _GLYPH)) < 0.5
        if 8 <= t.sum() <= 17 and all(np.sum(t != o) >= 6 for o in out):
            out.append(t)
    return np.stack(out)


def generate_synthetic(seed: int, n: int, user_classes: int = 10, attacker_attribute: str = "stripe",
                       decodability: float = 1.0, overlap: bool = False, size: int = 28
                       ) -> tuple[DatasetManifest, DatasetManifest]:
    """Images carrying a user-class glyph plus an independent binary attribute.

    The attribute is drawn independently of the user class.  ``decodability``
    is the accuracy an ideal (linear) probe can reach on the attribute: the
    visible pattern disagrees with the attribute label with probability
    ``1 - decodability``.  The attribute sits in a band disjoint from the
    glyph unless ``overlap`` is set.
    """
    if n < 200:
        raise ValueError("n must be >= 200")
    if not 2 <= user_classes <= 16:
        raise ValueError("user_classes must lie in [2, 16]")
    if attacker_attribute not in ATTRIBUTES:
        raise ValueError(f"attacker_attribute must be one of {ATTRIBUTES}")
    if not 0.5 <= decodability <= 1.0:
        raise ValueError(f"unattainable decodability {decodability}: must lie in [0.5, 1]")
    if size < 28:
        raise ValueError("size must be >= 28")

    rng = np.random.default_rng(seed)
    templates = _templates(user_classes)
    user = rng.permutation(np.arange(n) % user_classes)
    attr = rng.permutation(np.arange(n) % 2)
    flip = rng.random(n) >= decodability
    shown = np.where(flip, 1 - attr, attr)

    img = rng.normal(30.0, 12.0, size=(n, size, size))
    g = _GLYPH * _SCALE
    glyphs = np.kron(templates.astype(np.float64), np.ones((_SCALE, _SCALE)))
    dy = rng.integers(0, 5, n)
    dx = rng.integers(0, 5, n)
    intensity = rng.uniform(170, 230, n)
    for i in range(n):
        r, c = 1 + dy[i], 3 + dx[i]
        img[i, r:r + g, c:c + g] += intensity[i] * glyphs[user[i]]
    jitter = rng.integers(0, 3, n)
    for i in np.flatnonzero(shown):
        if attacker_attribute == "stripe":
            r = (9 if overlap else size - 6) + jitter[i]
            img[i, r:r + 2, 3:size - 3] += 150.0
        else:
            c = (10 if overlap else size - 6) + jitter[i]
            img[i, 1:5, c:c + 4] += 150.0
    images = np.clip(np.rint(img), 0, 255).astype(np.uint8)[:, None]

    src = {"generator": "synthetic", "seed": seed, "n": n, "user_classes": user_classes,
           "attribute": attacker_attribute, "decodability": decodability, "overlap": overlap}
    user_m = DatasetManifest("synthetic-user", images, user,
                             TaskSpec("user", user_classes, "glyph class"), dict(src))
    att_m = DatasetManifest("synthetic-attacker", images, attr,
                            TaskSpec("attacker", 2, f"{attacker_attribute} present"), dict(src))
    return user_m, att_m


# --- IDX --------------------------------------------------------------------------

def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _parse_idx(data: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(data) < 4:
        raise DataFormatError(f"{what}: truncated header")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise DataFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(data) < head:
        raise DataFormatError(f"{what}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    expected = int(np.prod(dims))
    if len(data) - head != expected:
        raise DataFormatError(f"{what}: dimensions {dims} need {expected} bytes, payload has {len(data) - head}")
    return np.frombuffer(data, dtype=np.uint8, offset=head).reshape(dims).copy()


def load_idx(images_path, labels_path, num_classes: int | None = None, kind: str = "user",
             name: str | None = None) -> DatasetManifest:
    img_bytes = Path(images_path).read_bytes()
    lab_bytes = Path(labels_path).read_bytes()
    images = _parse_idx(img_bytes, IDX_IMAGES, 3, str(images_path))
    labels = _parse_idx(lab_bytes, IDX_LABELS, 1, str(labels_path))
    if len(images) != len(labels):
        raise DataFormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    if len(labels) == 0:
        raise DataFormatError("IDX files hold no samples")
    c = num_classes or max(2, int(labels.max()) + 1)
    return DatasetManifest(name or Path(images_path).stem, images[:, None], labels.astype(np.int64),
                           TaskSpec(kind, c), {"images_sha256": _digest(img_bytes),
                                               "labels_sha256": _digest(lab_bytes)})


def write_idx(manifest: DatasetManifest, images_path, labels_path) -> None:
    imgs = manifest.images
    if imgs.dtype != np.uint8 or imgs.ndim != 4 or imgs.shape[1] != 1:
        raise DataFormatError("IDX export needs single-channel uint8 images")
    if manifest.labels.max() > 255:
        raise DataFormatError("IDX labels must fit in uint8")
    n, _, h, w = imgs.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, h, w) + imgs.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, n)
                                  + manifest.labels.astype(np.uint8).tobytes())


def save_manifest(manifest: DatasetManifest, path) -> None:
    meta = {"name": manifest.name, "task": {"kind": manifest.task.kind, "num_classes": manifest.task.num_classes,
                                            "description": manifest.task.description},
            "source": manifest.source}
    write_container(path, {"images": manifest.images, "labels": manifest.labels}, {"manifest": meta})


def load_manifest(path) -> DatasetManifest:
    tensors, meta = read_container(path)
    m = meta["manifest"]
    return DatasetManifest(m["name"], tensors["images"], tensors["labels"], TaskSpec(**m["task"]), m["source"])


# --- splits -------------------------------------------------------------------------

def split_train_val(manifest: DatasetManifest, val_fraction: float, seed: int
                    ) -> tuple[DatasetManifest, DatasetManifest]:
    """Stratified split: each class contributes round(val_fraction * count) to validation."""
    if not 0 < val_fraction < 0.5:
        raise ValueError("val_fraction must lie in (0, 0.5)")
    counts = manifest.class_counts()
    small = [c for c, k in enumerate(counts) if 0 < k < 2]
    if small:
        raise DataFormatError(f"classes {small} have fewer than 2 samples")
    rng = np.random.default_rng(seed)
    val_idx = []
    for c in range(manifest.task.num_classes):
        members = np.flatnonzero(manifest.labels == c)
        if len(members) == 0:
            continue
        k = int(np.floor(val_fraction * len(members) + 0.5))
        val_idx.append(rng.permutation(members)[:k])
    val = np.sort(np.concatenate(val_idx)) if val_idx else np.array([], dtype=np.int64)
    if len(val) == 0:
        raise DataFormatError(f"val_fraction {val_fraction} leaves the validation split empty")
    train = np.setdiff1d(np.arange(manifest.n), val)
    return manifest.subset(train, manifest.name + "-train"), manifest.subset(val, manifest.name + "-val")
