"""Named-parameter storage and the vector arithmetic behind update vectors,
flattening, magnitude trimming, and masking.

All tensors are float64 and immutable by convention: operations return new
objects and never mutate their inputs, so values are safe to share across
threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import CongruenceError, DataFormatError

CHECKPOINT_FORMAT_VERSION = 1


class ParamSet:
    """Ordered collection of uniquely named float64 tensors.

    Two ParamSets are *congruent* when they hold the same names, in the same
    order, with the same shapes; every binary operation requires congruence.
    """

    __slots__ = ("_entries",)

    def __init__(
        self,
        entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
        *,
        check_finite: bool = True,
    ):
        items = entries.items() if isinstance(entries, Mapping) else entries
        store: dict[str, np.ndarray] = {}
        for name, tensor in items:
            if name in store:
                raise ValueError(f"duplicate parameter name: {name!r}")
            arr = np.asarray(tensor, dtype=np.float64)
            if check_finite and not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in parameter {name!r}")
            store[name] = arr
        self._entries = store

    # -- access -----------------------------------------------------------

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._entries.items())

    def tensors(self) -> Iterator[np.ndarray]:
        return iter(self._entries.values())

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self._entries.values())

    def copy(self) -> "ParamSet":
        return ParamSet(
            ((n, t.copy()) for n, t in self._entries.items()), check_finite=False
        )

    def equals(self, other: "ParamSet") -> bool:
        """Bit-exact equality (names, order, shapes, values)."""
        if self.names != other.names:
            return False
        return all(
            a.shape == b.shape and np.array_equal(a, b)
            for (_, a), (_, b) in zip(self.items(), other.items())
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}:{t.shape}" for n, t in self._entries.items())
        return f"ParamSet({inner})"

    # -- congruence -------------------------------------------------------

    def congruent_with(self, other: "ParamSet") -> bool:
        return self.names == other.names and all(
            a.shape == b.shape for a, b in zip(self.tensors(), other.tensors())
        )

    def require_congruent(self, other: "ParamSet") -> None:
        a_names, b_names = self.names, other.names
        for i in range(max(len(a_names), len(b_names))):
            if i >= len(a_names) or i >= len(b_names) or a_names[i] != b_names[i]:
                got = b_names[i] if i < len(b_names) else "<missing>"
                want = a_names[i] if i < len(a_names) else "<missing>"
                raise CongruenceError(
                    f"layer {i}: expected {want!r}, got {got!r}"
                )
        for name in a_names:
            if self[name].shape != other[name].shape:
                raise CongruenceError(
                    f"layer {name!r}: shape {self[name].shape} vs {other[name].shape}"
                )

    # -- arithmetic -------------------------------------------------------

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        self.require_congruent(other)
        return ParamSet(
            ((n, a - b) for (n, a), (_, b) in zip(self.items(), other.items())),
            check_finite=False,
        )

    def __add__(self, other: "ParamSet") -> "ParamSet":
        self.require_congruent(other)
        return ParamSet(
            ((n, a + b) for (n, a), (_, b) in zip(self.items(), other.items())),
            check_finite=False,
        )

    def __mul__(self, scalar: float) -> "ParamSet":
        c = float(scalar)
        return ParamSet(((n, c * t) for n, t in self.items()), check_finite=False)

    __rmul__ = __mul__

    def map(self, fn) -> "ParamSet":
        return ParamSet(((n, fn(t)) for n, t in self.items()), check_finite=False)

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int
    length: int


@dataclass(frozen=True)
class FlatLayout:
    """Metadata needed to split a concatenated vector back losslessly."""

    segments: tuple[Segment, ...]

    @property
    def total_length(self) -> int:
        return sum(s.length for s in self.segments)

    @classmethod
    def of(cls, ps: ParamSet) -> "FlatLayout":
        segments = []
        offset = 0
        for name, tensor in ps.items():
            segments.append(Segment(name, tensor.shape, offset, tensor.size))
            offset += tensor.size
        return cls(tuple(segments))


@dataclass
class FlatVec:
    """Concatenated parameter view: one float64 vector plus its layout."""

    values: np.ndarray
    layout: FlatLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or len(self.values) != self.layout.total_length:
            raise DataFormatError(
                f"flat vector length {self.values.size} does not match layout "
                f"total {self.layout.total_length}"
            )


@dataclass
class BitMask:
    """Boolean keep-mask aligned with a FlatLayout."""

    bits: np.ndarray
    layout: FlatLayout

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 1 or len(self.bits) != self.layout.total_length:
            raise DataFormatError(
                f"mask length {self.bits.size} does not match layout "
                f"total {self.layout.total_length}"
            )

    @property
    def kept_count(self) -> int:
        return int(np.count_nonzero(self.bits))


# -- operations -------------------------------------------------------------


def update_vector(theta: ParamSet, theta0: ParamSet) -> ParamSet:
    """Per-layer difference theta - theta0 (the model update vector)."""
    return theta - theta0


def flatten(ps: ParamSet) -> FlatVec:
    """Concatenate all layers, in entry order, into one flat vector."""
    layout = FlatLayout.of(ps)
    if len(ps) == 0:
        return FlatVec(np.empty(0, dtype=np.float64), layout)
    values = np.concatenate([t.ravel() for t in ps.tensors()])
    return FlatVec(values, layout)


def split(fv: FlatVec) -> ParamSet:
    """Inverse of flatten for the same layout; bit-exact."""
    entries = []
    for seg in fv.layout.segments:
        chunk = fv.values[seg.offset : seg.offset + seg.length]
        entries.append((seg.name, chunk.reshape(seg.shape).copy()))
    return ParamSet(entries, check_finite=False)


def magnitude_percentile(
    fv: FlatVec,
    r: float,
    sample_size: int | None = None,
    rng_seed: int | None = None,
) -> float:
    """Nearest-rank r-quantile of |values|: the k-th smallest magnitude with
    k = ceil(r*N).

    r = 0 returns -1.0 so that a strict ``>`` mask keeps every entry
    (magnitudes are nonnegative).  When ``sample_size`` is given the rank is
    taken over a seeded random sample instead of the full vector (without
    replacement whenever sample_size <= N).
    """
    n = len(fv.values)
    if n == 0:
        raise ValueError("magnitude_percentile of an empty vector")
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"r must lie in [0, 1], got {r}")
    if r == 0.0:
        return -1.0
    mags = np.abs(fv.values)
    if sample_size is not None:
        if sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        rng = np.random.default_rng(rng_seed)
        replace = sample_size > n
        mags = rng.choice(mags, size=sample_size, replace=replace)
    m = len(mags)
    k = int(np.ceil(r * m))
    k = min(max(k, 1), m)
    return float(np.partition(mags, k - 1)[k - 1])


def mask_above(fv: FlatVec, sigma: float) -> BitMask:
    """Strict magnitude test |values| > sigma; ties at sigma are dropped."""
    return BitMask(np.abs(fv.values) > sigma, fv.layout)


def apply_mask(fv: FlatVec, mask: BitMask) -> FlatVec:
    """Zero masked-out entries; kept entries are copied bit-exactly."""
    if mask.layout != fv.layout:
        raise DataFormatError("mask layout does not match vector layout")
    return FlatVec(np.where(mask.bits, fv.values, 0.0), fv.layout)


def per_layer_dot(a: ParamSet, b: ParamSet) -> list[tuple[str, float]]:
    """Per-layer inner product over all elements of each layer."""
    a.require_congruent(b)
    return [
        (name, float(np.dot(ta.ravel(), tb.ravel())))
        for (name, ta), (_, tb) in zip(a.items(), b.items())
    ]


def lin_comb(coeffs: Sequence[float], sets: Sequence[ParamSet]) -> ParamSet:
    """Elementwise sum_i coeffs[i] * sets[i]."""
    if len(coeffs) != len(sets) or not sets:
        raise ValueError(
            f"need equally many coefficients and sets (>= 1), "
            f"got {len(coeffs)} and {len(sets)}"
        )
    first = sets[0]
    for other in sets[1:]:
        first.require_congruent(other)
    entries = []
    for name in first.names:
        stacked = np.stack([float(c) * ps[name] for c, ps in zip(coeffs, sets)])
        entries.append((name, np.sum(stacked, axis=0)))
    return ParamSet(entries, check_finite=False)


def mean_set(sets: Sequence[ParamSet]) -> ParamSet:
    """Plain average of congruent ParamSets (fixed-order stacked sum)."""
    if not sets:
        raise ValueError("mean of zero ParamSets")
    first = sets[0]
    for other in sets[1:]:
        first.require_congruent(other)
    n = float(len(sets))
    entries = []
    for name in first.names:
        stacked = np.stack([ps[name] for ps in sets])
        entries.append((name, np.sum(stacked, axis=0) / n))
    return ParamSet(entries, check_finite=False)


def sign_conflict_rate(v_i: ParamSet, v_bar: ParamSet) -> float:
    """Among coordinates nonzero in both vectors, the fraction whose signs
    disagree; 0.0 when no such coordinates exist."""
    v_i.require_congruent(v_bar)
    a = flatten(v_i).values
    b = flatten(v_bar).values
    both = (a != 0.0) & (b != 0.0)
    n_both = int(np.count_nonzero(both))
    if n_both == 0:
        return 0.0
    disagree = np.sign(a[both]) != np.sign(b[both])
    return float(np.count_nonzero(disagree)) / n_both


# -- checkpoint I/O ----------------------------------------------------------


def _fmt_float(x: float) -> str:
    # %.17g round-trips any IEEE double exactly.
    return format(float(x), ".17g")


def save_checkpoint(ps: ParamSet, path) -> None:
    """Write the repo-wide JSON checkpoint: format_version 1, ordered layers,
    values at 17 significant digits."""
    parts = [f'{{"format_version": {CHECKPOINT_FORMAT_VERSION}, "layers": [']
    layer_chunks = []
    for name, tensor in ps.items():
        if not np.all(np.isfinite(tensor)):
            raise ValueError(f"cannot checkpoint non-finite layer {name!r}")
        shape = ", ".join(str(d) for d in tensor.shape)
        values = ", ".join(_fmt_float(v) for v in tensor.ravel())
        layer_chunks.append(
            f'{{"name": {json.dumps(name)}, "shape": [{shape}], '
            f'"values": [{values}]}}'
        )
    parts.append(", ".join(layer_chunks))
    parts.append("]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(parts))
        fh.write("\n")


def load_checkpoint(path) -> ParamSet:
    """Read a checkpoint written by save_checkpoint; layer order preserved."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: expected format_version {CHECKPOINT_FORMAT_VERSION}"
        )
    layers = doc.get("layers")
    if not isinstance(layers, list):
        raise DataFormatError(f"{path}: missing 'layers' list")
    entries = []
    for i, layer in enumerate(layers):
        try:
            name = layer["name"]
            shape = tuple(int(d) for d in layer["shape"])
            values = np.asarray(layer["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}: malformed layer {i}: {exc}") from exc
        expected = int(np.prod(shape)) if shape else 1
        if values.size != expected:
            raise DataFormatError(
                f"{path}: layer {name!r} has {values.size} values, "
                f"shape {shape} needs {expected}"
            )
        entries.append((name, values.reshape(shape)))
    return ParamSet(entries)
