"""Synthetic generators, MNIST IDX / CSV loaders and group samplers.

All randomness comes from :func:`rng_stream`, a Philox (counter-based)
generator keyed by ``(seed, purpose)``; the same pair always gives the same
stream, and different purposes never share one.
"""

from __future__ import annotations

import csv
import gzip
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .model import Dataset, GroupSpec

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def rng_stream(seed: int, purpose: str) -> np.random.Generator:
    """Deterministic generator for one named purpose."""
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode())])
    return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "gaussian_binary"
    m: int = 10000
    d: int = 5
    seed: int = 0
    class_means: Tuple[float, ...] = (0.1, 0.8)
    cov_diag_range: Tuple[float, float] = (0.0, 1.0)
    n_classes: int = 4          # blobs only
    center_box: Tuple[float, float] = (-10.0, 10.0)  # blobs only
    add_bias: bool = False
    stream: str = "train"

    def __post_init__(self):
        if self.kind not in ("gaussian_binary", "blobs"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.m < 2 or self.d < 1:
            raise ValueError("need m >= 2 and d >= 1")
        lo, hi = self.cov_diag_range
        if not 0 <= lo < hi:
            raise ValueError("cov_diag_range must satisfy 0 <= low < high")
        if self.kind == "gaussian_binary" and len(self.class_means) != 2:
            raise ValueError("gaussian_binary needs exactly two class means")
        if self.kind == "blobs" and self.n_classes < 2:
            raise ValueError("blobs need at least two classes")


def _balanced_labels(m: int, n_classes: int, rng) -> np.ndarray:
    labels = np.arange(m) % n_classes
    return rng.permutation(labels)


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian two-class data or isotropic blobs, a pure function of ``spec``.

    ``gaussian_binary``: class ``c`` has mean ``class_means[c]`` on every
    coordinate and a diagonal covariance whose entries are uniform on
    ``cov_diag_range`` (drawn once per class from the ``seed``).
    ``blobs``: ``n_classes`` unit-variance clusters with centres uniform in
    ``center_box``. Classes are balanced to within one sample.
    """
    params = rng_stream(spec.seed, f"synthetic/{spec.kind}/params")
    rng = rng_stream(spec.seed, f"synthetic/{spec.kind}/{spec.stream}")
    if spec.kind == "gaussian_binary":
        n_classes = 2
        lo, hi = spec.cov_diag_range
        means = np.repeat(np.asarray(spec.class_means, dtype=np.float64)[:, None], spec.d, axis=1)
        variances = params.uniform(lo, hi, size=(2, spec.d))
        scales = np.sqrt(variances)
    else:
        n_classes = spec.n_classes
        means = params.uniform(*spec.center_box, size=(n_classes, spec.d))
        scales = np.ones((n_classes, spec.d))
    y = _balanced_labels(spec.m, n_classes, rng)
    X = means[y] + scales[y] * rng.standard_normal((spec.m, spec.d))
    if spec.add_bias:
        X = np.hstack([X, np.ones((spec.m, 1))])
    ds_id = f"synth:{spec.kind}:m={spec.m}:d={spec.d}:seed={spec.seed}:{spec.stream}"
    return Dataset(X, y, n_classes, ds_id)


def with_bias(data: Dataset) -> Dataset:
    X = np.hstack([data.features, np.ones((data.m, 1))])
    return Dataset(X, data.labels, data.class_count, data.id + "+bias")


# --- IDX ---------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise ValueError("IDX file too short for a magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ValueError(f"unexpected magic 0x{magic:08x} (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < n:
        raise ValueError(f"IDX payload truncated: {len(payload)} bytes, need {n}")
    return np.frombuffer(payload, dtype=np.uint8, count=n).reshape(dims)


def write_idx(array, path, compress: Optional[bool] = None) -> None:
    """Write a uint8 array as IDX (gzip-compressed when the path ends in ``.gz``)."""
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.uint8))
    magic = 0x00000800 | arr.ndim
    raw = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        raw = gzip.compress(raw, mtime=0)
    path.write_bytes(raw)


def load_mnist_idx(images_path, labels_path, classes: Optional[Sequence[int]] = None,
                   max_per_class: Optional[int] = None, normalize: bool = True,
                   flatten: bool = True, add_bias: bool = False,
                   relabel: bool = True) -> Dataset:
    """Load MNIST-style IDX files (plain or gzipped).

    With a ``classes`` filter the labels are re-indexed to ``0..len(classes)-1``
    in the given order (``relabel``), so ``classes=(1, 7)`` yields a binary task
    where digit 7 is label 1. ``max_per_class`` keeps the first samples of each
    class in file order.
    """
    if not flatten:
        raise ValueError("Dataset rows are feature vectors; use parse_idx for unflattened images")
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    keep = np.arange(labels.size)
    if classes is not None:
        keep = keep[np.isin(labels, classes)]
    if max_per_class is not None:
        counts = {}
        mask = []
        for i in keep:
            c = labels[i]
            counts[c] = counts.get(c, 0) + 1
            mask.append(counts[c] <= max_per_class)
        keep = keep[np.asarray(mask, dtype=bool)] if len(mask) else keep
    X = images[keep].astype(np.float64)
    if normalize:
        X /= 255.0
    X = X.reshape(X.shape[0], -1)
    y = labels[keep]
    if classes is not None and relabel:
        lookup = {c: j for j, c in enumerate(classes)}
        y = np.array([lookup[c] for c in y], dtype=np.int64)
        n_classes = len(classes)
    else:
        n_classes = 10
    if add_bias:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    tag = "all" if classes is None else "-".join(str(c) for c in classes)
    return Dataset(X, y, n_classes, f"idx:{Path(images_path).name}:{tag}")


# --- CSV ---------------------------------------------------------------------

def load_csv_labeled(path, header: Optional[bool] = None, add_bias: bool = False,
                     regression: bool = False) -> Dataset:
    """Numeric CSV with the label in the last column.

    ``header=None`` detects a header by checking whether the first row parses
    as numbers. Non-numeric labels are mapped to class ids in order of first
    appearance.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: empty CSV file")

    def numeric(cells):
        try:
            [float(c) for c in cells]
            return True
        except ValueError:
            return False

    if header is None:
        header = not numeric(rows[0][:-1])
    if header:
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    feats, raw_labels = [], []
    for lineno, r in enumerate(rows, start=2 if header else 1):
        if len(r) != width:
            raise ValueError(f"{path}: ragged row {lineno} has {len(r)} cells, expected {width}")
        try:
            feats.append([float(c) for c in r[:-1]])
        except ValueError as exc:
            raise ValueError(f"{path}: non-numeric cell in row {lineno}: {exc}") from None
        raw_labels.append(r[-1].strip())
    X = np.asarray(feats, dtype=np.float64)
    if regression:
        y = np.asarray([float(v) for v in raw_labels])
        n_classes = None
    else:
        try:
            vals = [float(v) for v in raw_labels]
            if all(v == int(v) and v >= 0 for v in vals):
                y = np.asarray(vals, dtype=np.int64)
            else:
                raise ValueError
        except ValueError:
            names = {}
            y = np.asarray([names.setdefault(v, len(names)) for v in raw_labels], dtype=np.int64)
        n_classes = int(y.max()) + 1
    if add_bias:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    return Dataset(X, y, n_classes, f"csv:{Path(path).name}")


# --- splitting and groups ------------------------------------------------------

def train_test_split(data: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = rng_stream(seed, "split")
    perm = rng.permutation(data.m)
    n_test = max(1, int(round(test_fraction * data.m)))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return data.subset(train_idx, data.id + ":train"), data.subset(test_idx, data.id + ":test")


def sample_groups(data: Dataset, size: int, count: int, mode: str = "random",
                  seed: int = 0, stream: str = "") -> List[GroupSpec]:
    """Draw ``count`` independent groups of ``size`` indices.

    ``random`` samples uniformly without replacement from all of ``S``.
    ``coherent`` first picks a class uniformly among the classes holding at
    least ``size`` samples, then samples within that class.
    """
    m = data.m
    if not 1 <= size < m:
        raise ValueError(f"group size must satisfy 1 <= size < m={m}, got {size}")
    if mode not in ("random", "coherent"):
        raise ValueError(f"unknown group mode {mode!r}")
    rng = rng_stream(seed, f"groups/{mode}/{size}/{stream}")
    groups = []
    if mode == "random":
        for g in range(count):
            idx = rng.choice(m, size, replace=False)
            groups.append(GroupSpec(idx, m, id=f"{mode}-{size}-{g}"))
        return groups
    if data.class_count is None:
        raise ValueError("coherent groups need class labels")
    members = [np.flatnonzero(data.labels == c) for c in range(data.class_count)]
    eligible = [c for c, idx in enumerate(members) if idx.size >= size]
    if not eligible:
        counts = {c: int(idx.size) for c, idx in enumerate(members)}
        raise ValueError(f"no class has {size} members for a coherent group; class counts {counts}")
    for g in range(count):
        c = eligible[rng.integers(len(eligible))]
        idx = rng.choice(members[c], size, replace=False)
        groups.append(GroupSpec(idx, m, id=f"{mode}-c{c}-{size}-{g}"))
    return groups


def dataset_manifest_rows(datasets: Iterable[Tuple[str, Dataset]], seed: int) -> List[dict]:
    """One metadata row per dataset (kind, seed, m, d, classes, digest)."""
    return [{"role": role, "kind": ds.id.split(":")[0], "id": ds.id, "seed": seed, "m": ds.m,
             "d": ds.d, "classes": "" if ds.class_count is None else ds.class_count,
             "sha256": ds.digest()} for role, ds in datasets]
