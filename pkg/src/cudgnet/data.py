"""CIFAR-10 source data, CIFAR-10-C evaluation domains and report aggregation."""
from __future__ import annotations

import csv
import json
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

NUM_CLASSES = 10
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
IMAGES_PER_SEVERITY = 10_000
SEVERITIES = (1, 2, 3, 4, 5)
CATEGORIES = ("weather", "blur", "noise", "digital")

# file stem -> category; the 19 published CIFAR-10-C corruptions
CORRUPTIONS = {
    "snow": "weather",
    "frost": "weather",
    "fog": "weather",
    "brightness": "weather",
    "spatter": "weather",
    "defocus_blur": "blur",
    "glass_blur": "blur",
    "motion_blur": "blur",
    "zoom_blur": "blur",
    "gaussian_blur": "blur",
    "gaussian_noise": "noise",
    "shot_noise": "noise",
    "impulse_noise": "noise",
    "speckle_noise": "noise",
    "contrast": "digital",
    "elastic_transform": "digital",
    "pixelate": "digital",
    "jpeg_compression": "digital",
    "saturate": "digital",
}

DATA_ROOT_ENV = "CUDGNET_DATA_ROOT"

FETCH_HINT = (
    "Download CIFAR-10 (python version) from https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz "
    "and CIFAR-10-C from https://zenodo.org/record/2535967, extract both under one directory and "
    f"point --data-root or ${DATA_ROOT_ENV} at it."
)


def data_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV) or "data"
    return Path(root)


@dataclass(frozen=True)
class CorruptionSpec:
    name: str
    severity: int

    def __post_init__(self):
        if self.name not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.name!r}; valid names: {', '.join(sorted(CORRUPTIONS))}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def category(self) -> str:
        return CORRUPTIONS[self.name]


def corruption_specs(names=None, severities=SEVERITIES) -> list[CorruptionSpec]:
    names = list(CORRUPTIONS) if names is None else list(names)
    return [CorruptionSpec(n, int(s)) for n in names for s in severities]


class ImageArrayDataset(torch.utils.data.Dataset):
    """uint8 ``(N, H, W, C)`` images with integer labels; items are float ``(C, H, W)`` in [0, 1]."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, name: str = ""):
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)
        self.name = name

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return to_float_chw(self.images[i]), int(self.labels[i])

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        indices = np.asarray(indices)
        return to_float_chw(self.images[indices]), self.labels[indices]

    def subset(self, indices) -> "ImageArrayDataset":
        indices = np.asarray(indices)
        return ImageArrayDataset(self.images[indices], self.labels[indices], self.name)


def to_float_chw(images) -> np.ndarray:
    arr = np.asarray(images)
    arr = arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)
    return np.moveaxis(arr, -1, -3)


def normalize(x: torch.Tensor, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> torch.Tensor:
    mean = torch.as_tensor(mean, dtype=x.dtype, device=x.device).view(-1, 1, 1)
    std = torch.as_tensor(std, dtype=x.dtype, device=x.device).view(-1, 1, 1)
    return (x - mean) / std


# ---------------------------------------------------------------------------
# CIFAR-10


def _find_cifar10(root: Path) -> Path:
    for cand in (root / "cifar-10-batches-py", root / "cifar-10-batches-bin", root):
        if (cand / "data_batch_1").exists() or (cand / "data_batch_1.bin").exists():
            return cand
    raise FileNotFoundError(f"CIFAR-10 not found under {root}. {FETCH_HINT}")


def _read_pickled(path: Path):
    with open(path, "rb") as f:
        d = pickle.load(f, encoding="bytes")
    data = d[b"data"] if b"data" in d else d["data"]
    labels = d.get(b"labels", d.get("labels"))
    images = np.asarray(data, dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, np.asarray(labels, dtype=np.int64)


def _read_binary(path: Path):
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, 1 + 3072)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), raw[:, 0].astype(np.int64)


def load_cifar10(root=None, train: bool = True) -> ImageArrayDataset:
    folder = _find_cifar10(data_root(root))
    stems = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    parts = []
    for stem in stems:
        if (folder / stem).exists():
            parts.append(_read_pickled(folder / stem))
        elif (folder / f"{stem}.bin").exists():
            parts.append(_read_binary(folder / f"{stem}.bin"))
        else:
            raise FileNotFoundError(f"missing CIFAR-10 file {folder / stem}. {FETCH_HINT}")
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return ImageArrayDataset(images, labels, "cifar10-train" if train else "cifar10-test")


def class_balanced_indices(labels, size: int, seed: int, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Deterministic class-balanced sample of ``size`` indices (sorted)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    per_class = [size // num_classes + (1 if c < size % num_classes else 0) for c in range(num_classes)]
    chosen = []
    for c, k in enumerate(per_class):
        pool = np.flatnonzero(labels == c)
        if k > len(pool):
            raise ValueError(f"class {c} has only {len(pool)} images, {k} requested")
        chosen.append(rng.choice(pool, size=k, replace=False))
    return np.sort(np.concatenate(chosen))


def load_source(root=None, subset_size: int | None = None, seed: int = 0, train: bool = True) -> ImageArrayDataset:
    """CIFAR-10 source split, optionally reduced to a class-balanced subset."""
    ds = load_cifar10(root, train=train)
    if subset_size is None or subset_size <= 0 or subset_size >= len(ds):
        return ds
    return ds.subset(class_balanced_indices(ds.labels, subset_size, seed))


# ---------------------------------------------------------------------------
# CIFAR-10-C


def _find_cifar10c(root: Path) -> Path:
    for cand in (root / "CIFAR-10-C", root):
        if (cand / "labels.npy").exists():
            return cand
    raise FileNotFoundError(f"CIFAR-10-C (labels.npy + <corruption>.npy) not found under {root}. {FETCH_HINT}")


def severity_slice(severity: int, per_severity: int = IMAGES_PER_SEVERITY) -> slice:
    return slice((severity - 1) * per_severity, severity * per_severity)


def load_cifar10c(root=None, specs=None):
    """Yield ``(spec, ImageArrayDataset)`` for each requested corruption/severity.

    Arrays are memory-mapped. Each file stacks the five severities, so with
    ``n = len(file) // 5`` (10000 in the published release) severity ``s``
    occupies rows ``[(s - 1) * n, s * n)``.
    """
    specs = corruption_specs() if specs is None else [
        s if isinstance(s, CorruptionSpec) else CorruptionSpec(*s) for s in specs
    ]
    folder = _find_cifar10c(data_root(root))
    labels = np.load(folder / "labels.npy", mmap_mode="r")
    for spec in specs:
        path = folder / f"{spec.name}.npy"
        if not path.exists():
            raise FileNotFoundError(f"missing CIFAR-10-C file {path}. {FETCH_HINT}")
        arr = np.load(path, mmap_mode="r")
        if len(arr) != len(labels) or len(arr) % len(SEVERITIES):
            raise ValueError(f"{path} has {len(arr)} rows; expected {len(labels)}, a multiple of 5")
        sl = severity_slice(spec.severity, len(arr) // len(SEVERITIES))
        yield spec, ImageArrayDataset(arr[sl], np.asarray(labels[sl]), f"{spec.name}-{spec.severity}")


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)            # (corruption, severity, accuracy %)
    per_corruption: dict = field(default_factory=dict)  # mean over severities
    per_category: dict = field(default_factory=dict)
    overall: float = float("nan")                       # mean of category means
    corruption_avg: float = float("nan")                # mean over corruptions

    def to_dict(self):
        return {
            "rows": [{"corruption": c, "severity": s, "accuracy": a} for c, s, a in self.rows],
            "per_corruption": self.per_corruption,
            "per_category": self.per_category,
            "overall": self.overall,
            "corruption_avg": self.corruption_avg,
        }

    @classmethod
    def from_dict(cls, d):
        rows = [(r["corruption"], int(r["severity"]), float(r["accuracy"])) for r in d["rows"]]
        return aggregate(rows)

    def table_row(self) -> dict:
        """Category columns plus ``Avg``, the layout of the CIFAR-10-C comparison tables."""
        row = {cat.capitalize(): self.per_category.get(cat, float("nan")) for cat in CATEGORIES}
        row["Avg"] = self.overall
        return row

    def write(self, directory, stem: str = "eval") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        json_path = directory / f"{stem}.json"
        csv_path = directory / f"{stem}.csv"
        json_path.write_text(json.dumps(self.to_dict(), indent=2))
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["corruption", "category", "severity", "accuracy"])
            for c, s, a in self.rows:
                w.writerow([c, CORRUPTIONS[c], s, f"{a:.4f}"])
            for cat, v in self.per_category.items():
                w.writerow([f"mean:{cat}", cat, "all", f"{v:.4f}"])
            w.writerow(["mean:Avg", "all", "all", f"{self.overall:.4f}"])
        return csv_path, json_path


def aggregate(rows, corruptions=None) -> EvalReport:
    """Category and overall means from ``(corruption, severity, accuracy)`` rows.

    Per-corruption accuracy averages its severities; a category is the mean of
    its member corruptions; the overall score is the mean of the category means.
    ``corruptions`` lists names that must be present.
    """
    rows = [(str(c), int(s), float(a)) for c, s, a in rows]
    if not rows:
        raise ValueError("no evaluation rows to aggregate")
    by_corruption: dict[str, list[float]] = {}
    for c, _, a in rows:
        if c not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {c!r}")
        by_corruption.setdefault(c, []).append(a)
    if corruptions is not None:
        missing = [c for c in corruptions if c not in by_corruption]
        if missing:
            raise ValueError(f"corruptions missing from evaluation: {', '.join(missing)}")
    per_corruption = {c: float(np.mean(v)) for c, v in by_corruption.items()}
    per_category = {}
    for cat in CATEGORIES:
        members = [v for c, v in per_corruption.items() if CORRUPTIONS[c] == cat]
        if members:
            per_category[cat] = float(np.mean(members))
    return EvalReport(
        rows=rows,
        per_corruption=per_corruption,
        per_category=per_category,
        overall=float(np.mean(list(per_category.values()))),
        corruption_avg=float(np.mean(list(per_corruption.values()))),
    )
