"""Merging stage: redundancy-aware merging (global magnitude trim of each
source's update vector followed by a per-coordinate disjoint mean) plus the
ablation baselines (plain averaging, layer-level trimming, best-model
selection).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .params import (
    BitMask,
    FlatLayout,
    FlatVec,
    ParamSet,
    Segment,
    apply_mask,
    flatten,
    magnitude_percentile,
    mask_above,
    split,
)

STRATEGIES = ("rhm", "avg", "layer_trim", "best_model")


@dataclass
class MergeInput:
    theta0: ParamSet
    sources: list[ParamSet]
    trim_ratio: float = 0.2
    strategy: str = "rhm"
    val_accuracies: list[float] | None = None  # used by best_model only

    def validate(self) -> None:
        if not self.sources:
            raise ConfigError("need at least one source model")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if not 0.0 <= self.trim_ratio < 1.0:
            raise ConfigError(f"trim ratio must lie in [0, 1), got {self.trim_ratio}")
        for src in self.sources:
            self.theta0.require_congruent(src)


@dataclass
class MergeReport:
    strategy: str
    r: float
    n_sources: int
    kept_fraction: list[float] = field(default_factory=list)
    per_layer_kept: list[dict[str, int]] = field(default_factory=list)
    all_zero_mask_coords: int = 0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "r": self.r,
            "n_sources": self.n_sources,
            "kept_fraction": self.kept_fraction,
            "per_layer_kept": self.per_layer_kept,
            "all_zero_mask_coords": self.all_zero_mask_coords,
        }


def _stacked_updates(theta0: ParamSet, sources: Sequence[ParamSet]) -> tuple[np.ndarray, FlatVec]:
    """Flattened update vectors as a (n_sources, n_params) matrix.

    Both the plain average and the disjoint mean reduce this stack along
    axis 0, so their r=0 outputs are bit-identical.
    """
    flats = [flatten(src - theta0) for src in sources]
    stack = np.stack([fv.values for fv in flats])
    return stack, flats[0]


def _assemble(theta0: ParamSet, v_flat: np.ndarray, layout) -> ParamSet:
    return theta0 + split(FlatVec(v_flat, layout))


def avg_merge(theta0: ParamSet, sources: Sequence[ParamSet]) -> ParamSet:
    """theta0 plus the plain mean of the update vectors (equals the plain
    parameter mean up to float rounding)."""
    if not sources:
        raise ConfigError("need at least one source model")
    for src in sources:
        theta0.require_congruent(src)
    stack, ref = _stacked_updates(theta0, sources)
    v_mean = np.sum(stack, axis=0) / float(len(sources))
    return _assemble(theta0, v_mean, ref.layout)


def trim_source(
    theta_i: ParamSet,
    theta0: ParamSet,
    r: float,
    level: str = "model",
) -> tuple[ParamSet, BitMask]:
    """Trim a source's update vector at magnitude-percentile r.

    ``model`` level computes one global threshold over the whole flattened
    update; ``layer`` level thresholds each layer segment independently.
    Kept entries retain sign and value; ties at the threshold are dropped.
    """
    if level not in ("model", "layer"):
        raise ConfigError(f"trim level must be 'model' or 'layer', got {level!r}")
    fv = flatten(theta_i - theta0)
    if level == "model":
        sigma = magnitude_percentile(fv, r)
        mask = mask_above(fv, sigma)
    else:
        bits = np.empty(len(fv.values), dtype=bool)
        for seg in fv.layout.segments:
            chunk = fv.values[seg.offset : seg.offset + seg.length]
            layout = FlatLayout((Segment(seg.name, seg.shape, 0, seg.length),))
            sigma = magnitude_percentile(FlatVec(chunk, layout), r)
            bits[seg.offset : seg.offset + seg.length] = np.abs(chunk) > sigma
        mask = BitMask(bits, fv.layout)
    trimmed = apply_mask(fv, mask)
    return split(trimmed), mask


def disjoint_mean_merge(
    theta0: ParamSet, trimmed: Sequence[tuple[ParamSet, BitMask]]
) -> ParamSet:
    """Per coordinate, average the trimmed updates over the sources whose
    masks kept it; coordinates no mask kept revert to theta0 exactly."""
    if not trimmed:
        raise ConfigError("need at least one trimmed source")
    ref_layout = trimmed[0][1].layout
    for _, m in trimmed:
        if m.layout != ref_layout:
            raise ConfigError("trimmed sources have mismatched layouts")
    vals = np.stack([flatten(v).values for v, _ in trimmed])
    masks = np.stack([m.bits for _, m in trimmed])
    counts = np.sum(masks, axis=0)
    sums = np.sum(vals, axis=0)
    v_merge = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return _assemble(theta0, v_merge, ref_layout)


def rhm(merge_input: MergeInput) -> tuple[ParamSet, MergeReport]:
    """Global trim of every source's update vector, then a disjoint mean added
    back onto theta0; returns the merged model and a trim report."""
    return _trim_and_merge(merge_input, level="model")


def layer_trim_merge(merge_input: MergeInput) -> tuple[ParamSet, MergeReport]:
    """Ablation baseline: identical pipeline but with per-layer thresholds."""
    return _trim_and_merge(merge_input, level="layer")


def _trim_and_merge(merge_input: MergeInput, level: str) -> tuple[ParamSet, MergeReport]:
    merge_input.validate()
    theta0 = merge_input.theta0
    r = merge_input.trim_ratio
    trimmed = [trim_source(src, theta0, r, level=level) for src in merge_input.sources]

    n = trimmed[0][1].layout.total_length
    report = MergeReport(
        strategy="rhm" if level == "model" else "layer_trim",
        r=r,
        n_sources=len(merge_input.sources),
    )
    for _, mask in trimmed:
        report.kept_fraction.append(mask.kept_count / n)
        per_layer = {}
        for seg in mask.layout.segments:
            kept = int(np.count_nonzero(mask.bits[seg.offset : seg.offset + seg.length]))
            per_layer[seg.name] = kept
        report.per_layer_kept.append(per_layer)
    counts = np.sum(np.stack([m.bits for _, m in trimmed]), axis=0)
    report.all_zero_mask_coords = int(np.count_nonzero(counts == 0))

    merged = disjoint_mean_merge(theta0, trimmed)
    return merged, report


def best_model_select(
    candidates: Sequence[ParamSet], val_accuracies: Sequence[float]
) -> ParamSet:
    """Candidate with the highest validation accuracy; ties pick the earliest."""
    if not candidates:
        raise ValueError("no candidates to select from")
    if len(candidates) != len(val_accuracies):
        raise ValueError(
            f"{len(candidates)} candidates but {len(val_accuracies)} accuracies"
        )
    idx = int(np.argmax(val_accuracies))
    return candidates[idx]


def merge_models(merge_input: MergeInput) -> tuple[ParamSet, MergeReport]:
    """Dispatch on strategy; best_model requires val_accuracies."""
    merge_input.validate()
    strategy = merge_input.strategy
    if strategy == "rhm":
        return rhm(merge_input)
    if strategy == "layer_trim":
        return layer_trim_merge(merge_input)
    if strategy == "avg":
        merged = avg_merge(merge_input.theta0, merge_input.sources)
        report = MergeReport(
            strategy="avg", r=0.0, n_sources=len(merge_input.sources)
        )
        return merged, report
    if strategy == "best_model":
        if merge_input.val_accuracies is None:
            raise ConfigError("best_model strategy requires validation accuracies")
        merged = best_model_select(merge_input.sources, merge_input.val_accuracies)
        report = MergeReport(
            strategy="best_model", r=0.0, n_sources=len(merge_input.sources)
        )
        return merged, report
    raise ConfigError(f"unknown strategy {strategy!r}")
