"""Post-inference analytics: occupancy histograms, prototype fields,
region-restricted transition matrices, lateral-state tables and the
pattern-count-versus-data-size curve.

All aggregations are pure; exports are plot-ready JSON/CSV, no rendering.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import bnp
from .core import FieldTensor, RoiConfig, VehicleState
from .errors import LengthMismatch
from .ingest import Region, RegionLabels


@dataclass(frozen=True)
class TransitionMatrix:
    """Counts[i, j] = transitions from patterns[i] to patterns[j] whose
    later frame lies in the selected region."""

    patterns: tuple[int, ...]
    counts: np.ndarray           # (K, K) nonnegative integers
    include_self: bool
    region: Region

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "patterns", tuple(int(p) for p in self.patterns))
        if counts.shape != (len(self.patterns),) * 2:
            raise ValueError("counts must be square over the pattern axis")
        if not self.include_self and np.any(np.diag(counts) != 0):
            raise ValueError("diagonal must be zero when include_self is false")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def relabel_by_frequency(labels: Sequence[int]) -> tuple[np.ndarray, dict[int, int]]:
    """Renumber patterns so 1 is the most frequent; ties go to the label
    occurring earlier. Returns the relabeled sequence and the old-to-new
    mapping."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("labels must be nonempty")
    uniques, first_pos, counts = np.unique(labels, return_index=True, return_counts=True)
    order = sorted(range(len(uniques)), key=lambda i: (-counts[i], first_pos[i]))
    mapping = {int(uniques[i]): rank + 1 for rank, i in enumerate(order)}
    relabeled = np.array([mapping[int(v)] for v in labels], dtype=np.int64)
    return relabeled, mapping


def occupancy_histogram(labels: Sequence[int]) -> dict[int, int]:
    """Label counts per pattern; values sum to len(labels)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("labels must be nonempty")
    uniques, counts = np.unique(labels, return_counts=True)
    return {int(u): int(c) for u, c in zip(uniques, counts)}


def prototype_fields(fields: Sequence[FieldTensor], labels: Sequence[int]
                     ) -> dict[int, FieldTensor]:
    """Elementwise mean field per pattern (patterns with no members are
    omitted); the synthetic frame index -1 marks an aggregate."""
    labels = np.asarray(labels)
    if len(fields) != labels.shape[0]:
        raise LengthMismatch(f"{len(fields)} fields vs {labels.shape[0]} labels")
    out: dict[int, FieldTensor] = {}
    for pattern in np.unique(labels):
        members = [fields[i].values for i in np.flatnonzero(labels == pattern)]
        mean = np.mean(members, axis=0)
        out[int(pattern)] = FieldTensor(values=mean, frame=-1)
    return out


def transition_counts(labels: Sequence[int], regions: RegionLabels | None = None,
                      region: Region = Region.ALL, include_self: bool = True,
                      pattern_set: Sequence[int] | None = None) -> TransitionMatrix:
    """Count consecutive-frame transitions; a transition belongs to the
    region its LATER frame is tagged with. ``pattern_set`` fixes the axis
    so matrices from different regions stay comparable."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("labels must be nonempty")
    if region is not Region.ALL:
        if regions is None:
            raise ValueError(f"region {region.value} requested without region labels")
        if len(regions.tags) != labels.shape[0]:
            raise LengthMismatch(f"{labels.shape[0]} labels vs {len(regions.tags)} region tags")
    patterns = tuple(int(p) for p in (pattern_set if pattern_set is not None
                                      else np.unique(labels)))
    index = {p: i for i, p in enumerate(patterns)}
    counts = np.zeros((len(patterns), len(patterns)), dtype=np.int64)
    for t in range(labels.shape[0] - 1):
        if region is not Region.ALL and regions.tags[t + 1] is not region:
            continue
        a, b = int(labels[t]), int(labels[t + 1])
        if not include_self and a == b:
            continue
        counts[index[a], index[b]] += 1
    return TransitionMatrix(patterns=patterns, counts=counts,
                            include_self=include_self, region=region)


def merge_transition_matrices(matrices: Sequence[TransitionMatrix]) -> TransitionMatrix:
    """Sum matrices over sequences; they must share axes, region and flag."""
    first = matrices[0]
    total = np.zeros_like(np.asarray(first.counts))
    for m in matrices:
        if m.patterns != first.patterns or m.region is not first.region \
                or m.include_self != first.include_self:
            raise ValueError("matrices are not aligned")
        total = total + m.counts
    return TransitionMatrix(patterns=first.patterns, counts=total,
                            include_self=first.include_self, region=first.region)


def lateral_state_table(labels: Sequence[int], ego_states: Sequence[VehicleState]
                        ) -> dict[int, list[tuple[float, float]]]:
    """Per-pattern list of the ego's lateral (vy, ay) pairs, ungrouped and
    unbinned."""
    labels = np.asarray(labels)
    if labels.shape[0] != len(ego_states):
        raise LengthMismatch(f"{labels.shape[0]} labels vs {len(ego_states)} ego states")
    out: dict[int, list[tuple[float, float]]] = {}
    for label, state in zip(labels, ego_states):
        out.setdefault(int(label), []).append((state.vy, state.ay))
    return out


def pattern_count_curve(features, hyper: bnp.HdpHmmHyper, fractions: Sequence[float],
                        seeds: Sequence[int], iterations: int = 500) -> dict[float, float]:
    """Median effective state count over seeds, per nested data prefix.

    Each fraction f keeps the first ceil(f * T) frames of the concatenated
    feature sequence and reruns the full segmentation stage on them.
    """
    seqs = bnp.as_sequences(features)
    stacked = np.vstack(seqs)
    total = stacked.shape[0]
    out: dict[float, float] = {}
    for fraction in fractions:
        if not 0 < fraction <= 1:
            raise ValueError(f"fractions must lie in (0, 1], got {fraction}")
        prefix = stacked[:math.ceil(fraction * total)]
        counts = []
        for seed in seeds:
            _, _, state = bnp.fit(prefix, hyper, iterations=iterations, rng=seed)
            counts.append(bnp.effective_state_count(state))
        out[float(fraction)] = float(np.median(counts))
    return out


# exports --------------------------------------------------------------------

def occupancy_to_json(hist: Mapping[int, int]) -> dict:
    patterns = sorted(hist)
    return {"patterns": [int(p) for p in patterns],
            "counts": [int(hist[p]) for p in patterns],
            "total": int(sum(hist.values()))}


def transition_matrix_to_json(matrix: TransitionMatrix) -> dict:
    return {"region": matrix.region.value,
            "include_self": matrix.include_self,
            "patterns": list(matrix.patterns),
            "counts": [[int(v) for v in row] for row in matrix.counts]}


def prototypes_to_json(prototypes: Mapping[int, FieldTensor], roi: RoiConfig) -> dict:
    return {
        "grid": {"x0": -roi.d_behind, "y0": -roi.d_side, "dx": roi.dx, "dy": roi.dy,
                 "nx": roi.n_cols, "ny": roi.n_rows},
        "patterns": [
            {"pattern": int(p),
             "dvx": prototypes[p].values[:, :, 0].ravel().tolist(),
             "dvy": prototypes[p].values[:, :, 1].ravel().tolist()}
            for p in sorted(prototypes)
        ],
    }


def write_lateral_csv(table: Mapping[int, list[tuple[float, float]]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pattern", "vy", "ay"])
        for pattern in sorted(table):
            for vy, ay in table[pattern]:
                writer.writerow([pattern, repr(float(vy)), repr(float(ay))])


def write_transition_csv(matrices: Sequence[TransitionMatrix], path) -> None:
    """Tidy rows (region, include_self, from, to, count)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "include_self", "from_pattern", "to_pattern", "count"])
        for m in matrices:
            for i, a in enumerate(m.patterns):
                for j, b in enumerate(m.patterns):
                    writer.writerow([m.region.value, int(m.include_self), a, b,
                                     int(m.counts[i, j])])


def write_json(obj: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
