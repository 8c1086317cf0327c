"""Deterministic synthetic multi-domain dataset generation with controllable
domain shift and label noise, plus stratified splits, batching, and CSV I/O.

Generation model: shared class centers in input space (common label space
across domains), per-domain feature noise, then a per-domain transform of
rotation (first two coordinates) -> scale -> offset.  Label noise flips a
sample's label to a uniformly random other class and marks it corrupted.
The corrupted flag is ground truth for diagnostics only; training losses
never read it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataFormatError


@dataclass(frozen=True)
class DomainSpec:
    """One source domain's shift and noise knobs.

    ``offset`` may be a scalar (broadcast over all input coordinates) or a
    per-coordinate tuple.
    """

    domain_id: int
    rotation_angle: float = 0.0
    scale: float = 1.0
    offset: float | tuple[float, ...] = 0.0
    feature_noise_std: float = 0.3
    label_noise_rate: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"domain {self.domain_id}: scale must be > 0")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise ConfigError(
                f"domain {self.domain_id}: label_noise_rate must lie in [0, 1)"
            )
        if self.feature_noise_std < 0:
            raise ConfigError(
                f"domain {self.domain_id}: feature_noise_std must be >= 0"
            )

    def offset_vector(self, input_dim: int) -> np.ndarray:
        if isinstance(self.offset, (int, float)):
            return np.full(input_dim, float(self.offset))
        vec = np.asarray(self.offset, dtype=np.float64)
        if vec.shape != (input_dim,):
            raise ConfigError(
                f"domain {self.domain_id}: offset length {vec.size} != "
                f"input_dim {input_dim}"
            )
        return vec

    def to_dict(self) -> dict:
        off = self.offset if isinstance(self.offset, (int, float)) else list(self.offset)
        return {
            "domain_id": self.domain_id,
            "rotation_angle": self.rotation_angle,
            "scale": self.scale,
            "offset": off,
            "feature_noise_std": self.feature_noise_std,
            "label_noise_rate": self.label_noise_rate,
        }


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int
    domain_id: int
    corrupted: bool


@dataclass
class Dataset:
    """Columnar sample storage; rows are (x, y, domain_id, corrupted)."""

    x: np.ndarray          # (n, d) float64
    y: np.ndarray          # (n,) int64
    domain_id: np.ndarray  # (n,) int64
    corrupted: np.ndarray  # (n,) bool
    n_classes: int
    seed: int | None = None
    provenance: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.domain_id = np.asarray(self.domain_id, dtype=np.int64)
        self.corrupted = np.asarray(self.corrupted, dtype=bool)
        n = len(self.x)
        if not (len(self.y) == len(self.domain_id) == len(self.corrupted) == n):
            raise DataFormatError("dataset columns have mismatched lengths")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.y[i]), int(self.domain_id[i]), bool(self.corrupted[i]))

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def domains(self) -> list[int]:
        return sorted(int(d) for d in np.unique(self.domain_id))

    def restrict(self, domain_ids: Sequence[int]) -> "Dataset":
        keep = np.isin(self.domain_id, list(domain_ids))
        return self.subset(np.where(keep)[0])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.x[idx],
            self.y[idx],
            self.domain_id[idx],
            self.corrupted[idx],
            self.n_classes,
            self.seed,
            self.provenance,
        )

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact row equality plus matching class count."""
        return (
            self.n_classes == other.n_classes
            and self.x.shape == other.x.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.domain_id, other.domain_id)
            and np.array_equal(self.corrupted, other.corrupted)
        )


@dataclass
class SplitPair:
    """Per-domain stratified 80/20 split; disjoint, union equals the parent."""

    train: Dataset
    val: Dataset
    ratio: float = 0.2


@dataclass
class Batch:
    x: np.ndarray          # (b, d)
    y: np.ndarray          # (b,)
    corrupted: np.ndarray  # (b,) diagnostics only, never read by losses

    def __len__(self) -> int:
        return len(self.y)

    @staticmethod
    def concat(parts: Sequence["Batch"]) -> "Batch":
        return Batch(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.corrupted for p in parts]),
        )


def _class_centers(n_classes: int, input_dim: int, rng: np.random.Generator) -> np.ndarray:
    centers = rng.standard_normal((n_classes, input_dim))
    dists = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    min_dist = dists.min()
    if min_dist < 2.0:
        centers *= 2.0 / min_dist
    return centers


def _rotation(input_dim: int, angle: float) -> np.ndarray:
    rot = np.eye(input_dim)
    c, s = np.cos(angle), np.sin(angle)
    rot[0, 0], rot[0, 1] = c, -s
    rot[1, 0], rot[1, 1] = s, c
    return rot


def generate(
    n_classes: int,
    input_dim: int,
    n_per_domain: int,
    domain_specs: Sequence[DomainSpec],
    seed: int,
) -> Dataset:
    """Generate a multi-domain dataset; bit-identical for identical seeds.

    Labels are balanced within each domain (seeded shuffle of a round-robin
    assignment), so domain-conditional class mixtures match exactly.
    """
    if n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    if input_dim < 2:
        raise ConfigError(f"input_dim must be >= 2, got {input_dim}")
    if n_per_domain < n_classes:
        raise ConfigError("n_per_domain must be >= n_classes")
    if not domain_specs:
        raise ConfigError("need at least one domain spec")
    ids = [spec.domain_id for spec in domain_specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate domain ids: {ids}")

    centers = _class_centers(n_classes, input_dim, np.random.default_rng((seed, 0)))

    xs, ys, doms, cors = [], [], [], []
    for d_idx, spec in enumerate(domain_specs):
        rng = np.random.default_rng((seed, 1 + d_idx))
        labels = np.arange(n_per_domain) % n_classes
        rng.shuffle(labels)
        noise = rng.standard_normal((n_per_domain, input_dim)) * spec.feature_noise_std
        raw = centers[labels] + noise
        transformed = raw @ _rotation(input_dim, spec.rotation_angle).T
        transformed = spec.scale * transformed + spec.offset_vector(input_dim)

        flips = rng.random(n_per_domain) < spec.label_noise_rate
        stored = labels.copy()
        if flips.any():
            shift = rng.integers(1, n_classes, size=int(flips.sum()))
            stored[flips] = (labels[flips] + shift) % n_classes

        xs.append(transformed)
        ys.append(stored)
        doms.append(np.full(n_per_domain, spec.domain_id, dtype=np.int64))
        cors.append(flips)

    provenance = {
        "n_classes": n_classes,
        "input_dim": input_dim,
        "n_per_domain": n_per_domain,
        "seed": seed,
        "domains": [spec.to_dict() for spec in domain_specs],
    }
    return Dataset(
        np.concatenate(xs),
        np.concatenate(ys),
        np.concatenate(doms),
        np.concatenate(cors),
        n_classes,
        seed,
        provenance,
    )


def split_train_val(ds: Dataset, seed: int, ratio: float = 0.2) -> SplitPair:
    """Per-domain stratified split with a seeded shuffle; the validation share
    of each domain is round(ratio * n), i.e. floor or ceil of the exact value."""
    train_idx, val_idx = [], []
    for pos, domain in enumerate(ds.domains()):
        idx = np.where(ds.domain_id == domain)[0]
        if len(idx) < 5:
            raise ConfigError(
                f"domain {domain} has only {len(idx)} samples; need >= 5 to split"
            )
        rng = np.random.default_rng((seed, pos))
        perm = rng.permutation(len(idx))
        n_val = int(round(ratio * len(idx)))
        val_idx.append(idx[perm[:n_val]])
        train_idx.append(idx[perm[n_val:]])
    return SplitPair(
        train=ds.subset(np.concatenate(train_idx)),
        val=ds.subset(np.concatenate(val_idx)),
        ratio=ratio,
    )


def batch_iter(
    ds: Dataset, batch_size: int, seed, epoch: int
) -> Iterator[Batch]:
    """Seeded per-epoch shuffle; the last short batch is kept.  Iteration
    order is a pure function of (seed, epoch)."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(ds)
    seed_key = seed if isinstance(seed, (tuple, list)) else (seed,)
    rng = np.random.default_rng((*seed_key, epoch))
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        yield Batch(ds.x[idx], ds.y[idx], ds.corrupted[idx])


def endless_batches(ds: Dataset, batch_size: int, seed) -> Iterator[Batch]:
    """Concatenated epochs of batch_iter, reshuffled each epoch."""
    epoch = 0
    while True:
        yield from batch_iter(ds, batch_size, seed, epoch)
        epoch += 1


# -- file I/O -----------------------------------------------------------------


def _fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def save_csv(ds: Dataset, path) -> None:
    """CSV with header x_0..x_{d-1}, y, domain_id, corrupted; floats at 17
    significant digits so load(save(ds)) round-trips bit-exactly."""
    d = ds.input_dim
    header = [f"x_{j}" for j in range(d)] + ["y", "domain_id", "corrupted"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(ds)):
            row = [_fmt_float(v) for v in ds.x[i]]
            row += [str(int(ds.y[i])), str(int(ds.domain_id[i])), str(int(ds.corrupted[i]))]
            writer.writerow(row)


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Inverse of save_csv; malformed rows raise with their line number."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        d = sum(1 for col in header if col.startswith("x_"))
        expected = [f"x_{j}" for j in range(d)] + ["y", "domain_id", "corrupted"]
        if header != expected:
            raise DataFormatError(f"{path}: line 1: bad header {header!r}")
        xs, ys, doms, cors = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 3:
                raise DataFormatError(
                    f"{path}: line {lineno}: expected {d + 3} columns, got {len(row)}"
                )
            try:
                xs.append([float(v) for v in row[:d]])
                ys.append(int(row[d]))
                doms.append(int(row[d + 1]))
                cors.append(bool(int(row[d + 2])))
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
    y = np.asarray(ys, dtype=np.int64)
    k = n_classes if n_classes is not None else (int(y.max()) + 1 if len(y) else 0)
    return Dataset(
        np.asarray(xs, dtype=np.float64),
        y,
        np.asarray(doms, dtype=np.int64),
        np.asarray(cors, dtype=bool),
        k,
    )


def save_sidecar(ds: Dataset, path) -> None:
    """JSON sidecar holding the generation spec for provenance."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ds.provenance or {}, fh, indent=2, sort_keys=True)
        fh.write("\n")
