"""Feature datasets: file formats, splitting and synthetic generators."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..core_math import l2_normalize
from ..errors import InvalidArgumentError

MAGIC = b"VFEA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQII")
ROLES = ("train", "val", "test", "ood", "id")


@dataclass
class FeatureDataset:
    features: np.ndarray  # (N, d_f) float64
    labels: np.ndarray    # (N,) int64
    num_classes: int
    role: str = "train"
    dropped: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise InvalidArgumentError("features must be (N, d) with N labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidArgumentError(f"labels must lie in [0, {self.num_classes})")
        if self.role not in ROLES:
            raise InvalidArgumentError(f"unknown role {self.role!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, role: str | None = None) -> "FeatureDataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx],
                       role=role or self.role, dropped=0)


def write_binary(dataset: FeatureDataset, path) -> None:
    """``VFEA`` header, N float32 rows, then N uint32 labels, little-endian."""
    n, d = dataset.features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, d, dataset.num_classes))
        fh.write(dataset.features.astype("<f4").tobytes())
        fh.write(dataset.labels.astype("<u4").tobytes())


def write_csv(dataset: FeatureDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"f{j}" for j in range(dataset.dim))])
        for y, row in zip(dataset.labels, dataset.features):
            w.writerow([int(y), *(repr(float(v)) for v in row)])


def _read_binary(path) -> tuple[np.ndarray, np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidArgumentError(f"{path}: truncated header")
    magic, version, n, d, k = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InvalidArgumentError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise InvalidArgumentError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * d + 4 * n
    if len(raw) != expected:
        raise InvalidArgumentError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = _HEADER.size
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 4 * n * d)
    return feats.astype(np.float64), labels.astype(np.int64), int(k)


def _read_csv(path) -> tuple[np.ndarray, np.ndarray]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[0] != "label" or any(
            h != f"f{j}" for j, h in enumerate(header[1:])) or len(header) < 2:
        raise InvalidArgumentError(f"{path}: header must be 'label,f0,f1,...'")
    labels, rows = [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise InvalidArgumentError(f"{path}:{lineno}: expected {len(header)} fields")
        try:
            label = float(rec[0])
            vals = [float(v) for v in rec[1:]]
        except ValueError as exc:
            raise InvalidArgumentError(f"{path}:{lineno}: {exc}") from None
        labels.append(label)
        rows.append(vals)
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    return feats, np.array(labels, dtype=np.float64)


def load_features(path, fmt: str | None = None, num_classes: int | None = None,
                  role: str = "train") -> FeatureDataset:
    """Read a feature file, dropping rows with non-finite features.

    ``fmt`` defaults from the extension (``.csv`` or anything else = binary).
    For CSV input ``num_classes`` defaults to ``max(label) + 1``.
    """
    fmt = fmt or ("csv" if str(path).lower().endswith(".csv") else "binary")
    if fmt == "binary":
        feats, labels, k = _read_binary(path)
        if num_classes is not None and num_classes != k:
            raise InvalidArgumentError(f"{path}: file declares {k} classes, expected {num_classes}")
    elif fmt == "csv":
        feats, labels = _read_csv(path)
        k = num_classes
    else:
        raise InvalidArgumentError(f"unknown feature format {fmt!r}")
    keep = np.all(np.isfinite(feats), axis=1) & np.isfinite(labels)
    feats, labels = feats[keep], labels[keep]
    if len(labels) == 0:
        raise InvalidArgumentError(f"{path}: no usable rows")
    if np.any(labels != np.round(labels)) or labels.min() < 0:
        raise InvalidArgumentError(f"{path}: labels must be non-negative integers")
    labels = labels.astype(np.int64)
    if k is None:
        k = int(labels.max()) + 1
    if labels.max() >= k:
        raise InvalidArgumentError(f"{path}: label {labels.max()} out of range for {k} classes")
    return FeatureDataset(feats, labels, k, role=role, dropped=int((~keep).sum()))


def _n_val(n: int, fraction: float) -> int:
    # round toward the validation side; the epsilon absorbs products like 0.2 * 10
    return min(n, math.ceil(n * fraction - 1e-9))


def split_indices(labels, num_classes: int, val_fraction: float, seed: int,
                  stratified: bool = True) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < val_fraction < 1:
        raise InvalidArgumentError("val_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    if not stratified:
        perm = rng.permutation(len(labels))
        n_val = _n_val(len(labels), val_fraction)
        return np.sort(perm[n_val:]), np.sort(perm[:n_val])
    train_idx, val_idx = [], []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise InvalidArgumentError(f"class {c} has no samples to stratify")
        members = members[rng.permutation(members.size)]
        n_val = _n_val(members.size, val_fraction)
        val_idx.append(members[:n_val])
        train_idx.append(members[n_val:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def split(dataset: FeatureDataset, val_fraction: float, seed: int, stratified: bool = True,
          roles: tuple[str, str] = ("train", "val")) -> tuple[FeatureDataset, FeatureDataset]:
    """Seeded (optionally class-stratified) split into two disjoint datasets."""
    tr, va = split_indices(dataset.labels, dataset.num_classes, val_fraction, seed, stratified)
    return dataset.subset(tr, roles[0]), dataset.subset(va, roles[1])


@dataclass(frozen=True)
class BlobSpec:
    """Isotropic Gaussian classes with means placed ``separation`` apart.

    OOD blobs (``ood_blobs`` of them, default one per class) sit exactly
    ``ood_separation`` (default ``separation``) from every ID mean.
    """

    num_classes: int = 10
    dim: int = 64
    samples_per_class: int = 300
    separation: float = 6.0
    std: float = 1.0
    seed: int = 0
    ood_samples_per_blob: int | None = None
    ood_blobs: int | None = None
    ood_separation: float | None = None

    def __post_init__(self):
        if self.num_classes < 1 or self.dim < 1 or self.samples_per_class < 1:
            raise InvalidArgumentError("num_classes, dim and samples_per_class must be positive")
        if not self.separation > 0 or not self.std > 0:
            raise InvalidArgumentError("separation and std must be positive")
        if self.ood_separation is not None and not self.ood_separation >= self.separation:
            raise InvalidArgumentError("ood_separation must be at least separation")


def blob_means(spec: BlobSpec) -> tuple[np.ndarray, np.ndarray]:
    """ID and OOD means along distinct axes of a random rotation.

    ID means are pairwise ``separation`` apart and every OOD mean is
    ``ood_separation`` from every ID mean, which needs
    ``num_classes + ood_blobs <= dim``.
    """
    n_ood = spec.num_classes if spec.ood_blobs is None else spec.ood_blobs
    if spec.num_classes + n_ood > spec.dim:
        raise InvalidArgumentError(
            f"cannot place {spec.num_classes} ID and {n_ood} OOD means pairwise "
            f"{spec.separation} apart in {spec.dim} dimensions"
        )
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 4]))
    q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
    r_id = spec.separation / math.sqrt(2.0)
    d_ood = spec.separation if spec.ood_separation is None else spec.ood_separation
    r_ood = math.sqrt(d_ood**2 - r_id**2)
    return q.T[:spec.num_classes] * r_id, q.T[spec.num_classes:spec.num_classes + n_ood] * r_ood


def make_blobs(spec: BlobSpec) -> tuple[FeatureDataset, FeatureDataset]:
    id_means, ood_means = blob_means(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 5]))
    y = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    x = id_means[y] + spec.std * rng.standard_normal((len(y), spec.dim))
    n_ood = spec.samples_per_class if spec.ood_samples_per_blob is None else spec.ood_samples_per_blob
    blob = np.repeat(np.arange(len(ood_means)), n_ood)
    x_ood = ood_means[blob] + spec.std * rng.standard_normal((len(blob), spec.dim))
    # OOD rows carry label 0 so the file formats stay uniform; the blob id is irrelevant
    return (FeatureDataset(x, y, spec.num_classes, role="id"),
            FeatureDataset(x_ood, np.zeros(len(blob), dtype=np.int64), spec.num_classes, role="ood"))


@dataclass(frozen=True)
class SeparationSpec:
    """Sphere embeddings with a guaranteed margin between ID and OOD."""

    dim: int = 16
    num_classes: int = 8
    margin: float = 0.9      # OOD: max_k z.p_k <= 1 - margin
    delta: float = 0.05      # ID: z.p_y >= 1 - delta
    eps_id: float = 0.05
    n_id: int = 500
    n_ood: int = 500
    seed: int = 0
    max_attempts: int = 1_000_000

    def __post_init__(self):
        if not 0 < self.delta < self.margin < 1:
            raise InvalidArgumentError("need 0 < delta < margin < 1")
        if self.num_classes > self.dim:
            raise InvalidArgumentError("orthonormal prototypes need num_classes <= dim")


@dataclass
class SeparatedEmbeddings:
    prototypes: np.ndarray
    id_embeddings: np.ndarray
    id_labels: np.ndarray
    ood_embeddings: np.ndarray
    id_tail_mass: float


def make_separated_embeddings(spec: SeparationSpec) -> SeparatedEmbeddings:
    """Orthonormal prototypes, ID points near their prototype, OOD points far from all.

    ID points are ``normalize(p_y + s g)`` with the spread ``s`` chosen so the
    typical angle to ``p_y`` is half the allowed one; draws violating
    ``z.p_y >= 1 - delta`` are rejected and their rate reported as
    ``id_tail_mass``. OOD points are uniform on the sphere, rejected unless
    every similarity is at most ``1 - margin``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 6]))
    q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.num_classes)))
    protos = q.T.copy()
    cos_min = 1.0 - spec.delta
    max_tan = math.sqrt(1.0 - cos_min**2) / cos_min
    spread = 0.5 * max_tan / math.sqrt(max(spec.dim - 1, 1))

    labels = rng.integers(0, spec.num_classes, spec.n_id)
    id_z = np.empty((spec.n_id, spec.dim))
    rejected = 0
    for i, y in enumerate(labels):
        for _ in range(spec.max_attempts):
            z = l2_normalize(protos[y] + spread * rng.standard_normal(spec.dim))
            if z @ protos[y] >= cos_min:
                id_z[i] = z
                break
            rejected += 1
        else:
            raise InvalidArgumentError("ID rejection sampling exceeded the attempt budget")

    ood_z = np.empty((spec.n_ood, spec.dim))
    cap = 1.0 - spec.margin
    chunk = 4096
    filled = attempts = 0
    while filled < spec.n_ood:
        if attempts > spec.max_attempts * (filled + 1):
            raise InvalidArgumentError("OOD rejection sampling exceeded the attempt budget")
        cand = l2_normalize(rng.standard_normal((chunk, spec.dim)))
        ok = cand[(cand @ protos.T).max(axis=1) <= cap]
        take = ok[:spec.n_ood - filled]
        ood_z[filled:filled + len(take)] = take
        filled += len(take)
        attempts += chunk
    if not (np.all(np.einsum("nd,nd->n", id_z, protos[labels]) >= cos_min)
            and np.all((ood_z @ protos.T).max(axis=1) <= cap)):
        raise RuntimeError("emitted embeddings violate the separation constraints")
    return SeparatedEmbeddings(protos, id_z, labels, ood_z,
                               rejected / (rejected + spec.n_id))
