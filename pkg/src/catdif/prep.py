"""Turn administration logs into per-item two-level analysis frames.

Level-1 rows are responses to the studied item; level-2 units are the
provisional-ability intervals (nearest point of an equally spaced grid)
in which the estimate preceding the item fell.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .engine import AdministrationLog


@dataclass(frozen=True)
class IntervalGrid:
    lo: float = -4.0
    hi: float = 4.0
    step: float = 0.1

    def __post_init__(self):
        if not self.lo < self.hi or not self.step > 0:
            raise ValueError("invalid interval grid")

    @property
    def n_points(self) -> int:
        return int(round((self.hi - self.lo) / self.step)) + 1

    @property
    def points(self) -> np.ndarray:
        return self.lo + self.step * np.arange(self.n_points)


def bin_provisional(theta_s, grid: IntervalGrid = IntervalGrid()):
    """1-based index of the nearest grid point; exact midpoints go upward.

    Accepts scalars or arrays.
    """
    pos = (np.asarray(theta_s, dtype=float) - grid.lo) / grid.step
    # snap values within rounding noise of a half-step so ties break upward
    j = np.floor(np.round(pos, 9) + 0.5).astype(np.int64) + 1
    j = np.clip(j, 1, grid.n_points)
    return int(j) if j.ndim == 0 else j


@dataclass
class ItemFrame:
    item_id: str
    y: np.ndarray
    g: np.ndarray
    theta_K: np.ndarray
    theta_s: np.ndarray
    j: np.ndarray

    def __len__(self):
        return len(self.y)

    @property
    def cluster_sizes(self) -> dict:
        vals, counts = np.unique(self.j, return_counts=True)
        return dict(zip(vals.tolist(), counts.tolist()))

    @property
    def n_intervals(self) -> int:
        return len(np.unique(self.j))

    @property
    def n_j(self) -> np.ndarray:
        """Size of each row's interval, aligned with the rows."""
        _, inv, counts = np.unique(self.j, return_inverse=True, return_counts=True)
        return counts[inv].astype(float)

    def subset(self, mask) -> "ItemFrame":
        return ItemFrame(self.item_id, self.y[mask], self.g[mask], self.theta_K[mask],
                         self.theta_s[mask], self.j[mask])


@dataclass
class DropReport:
    step1: list = field(default_factory=list)
    step2: list = field(default_factory=list)
    step3a: list = field(default_factory=list)
    step3b: list = field(default_factory=list)
    step3c: list = field(default_factory=list)
    total_administered: int = 0
    step2_rows: int = 0

    @property
    def n_dropped(self) -> int:
        return len(self.step1) + len(self.step2) + len(self.step3a) + len(self.step3b) + len(self.step3c)

    @property
    def dropped_fraction(self) -> float:
        return self.n_dropped / self.total_administered if self.total_administered else 0.0

    @property
    def n_retained(self) -> int:
        return self.total_administered - self.n_dropped


def _stack_logs(logs: Sequence[AdministrationLog]):
    ids = np.concatenate([np.asarray(lg.item_ids, dtype=object) for lg in logs])
    slot = np.concatenate([np.arange(1, len(lg) + 1) for lg in logs])
    y = np.concatenate([np.asarray(lg.responses, dtype=np.int8) for lg in logs])
    theta_s = np.concatenate([np.asarray(lg.theta_prev, dtype=float) for lg in logs])
    theta_K = np.concatenate([np.full(len(lg), lg.theta_final) for lg in logs])
    g = np.concatenate([np.full(len(lg), lg.group, dtype=np.int8) for lg in logs])
    return ids, slot, y, theta_s, theta_K, g


def build_frames(logs: Sequence[AdministrationLog], grid: IntervalGrid = IntervalGrid(),
                 q: int = 2, polytomous: Iterable[str] = (), per_level: bool = True):
    """Clean the logs and split them into one :class:`ItemFrame` per item.

    Cleaning, in order: (1) polytomous items are removed; (2) first-slot
    rows are discarded and items left with no rows are dropped; (3) items
    with a single interval, a single response value, or no more rows
    than random effects are dropped (checked in that order, so each item
    is counted under one condition only). The random-effect count is
    ``q`` per interval, as mixed-model software counts it; with
    ``per_level=False`` it is just ``q``.

    Returns ``(frames, DropReport)`` with frames keyed and ordered by item id.
    """
    if not logs:
        raise ValueError("no administration logs")
    ids, slot, y, theta_s, theta_K, g = _stack_logs(logs)
    report = DropReport()
    administered = sorted(set(ids.tolist()))
    report.total_administered = len(administered)

    poly = set(polytomous)
    report.step1 = [i for i in administered if i in poly]
    keep = ~np.isin(ids, list(poly)) if poly else np.ones(len(ids), dtype=bool)

    first = slot == 1
    report.step2_rows = int(np.sum(first & keep))
    keep &= ~first
    remaining = set(ids[keep].tolist())
    report.step2 = [i for i in administered if i not in poly and i not in remaining]

    ids, y, theta_s, theta_K, g = ids[keep], y[keep], theta_s[keep], theta_K[keep], g[keep]
    j = bin_provisional(theta_s, grid)
    order = np.argsort(ids, kind="stable")
    ids, y, theta_s, theta_K, g, j = (v[order] for v in (ids, y, theta_s, theta_K, g, j))
    uniq, starts = np.unique(ids, return_index=True)
    bounds = list(starts) + [len(ids)]

    frames = {}
    for n, iid in enumerate(uniq.tolist()):
        sl = slice(bounds[n], bounds[n + 1])
        fr = ItemFrame(iid, y[sl].astype(np.int8), g[sl].astype(np.int8), theta_K[sl], theta_s[sl], j[sl])
        if fr.n_intervals < 2:
            report.step3a.append(iid)
        elif len(np.unique(fr.y)) < 2:
            report.step3b.append(iid)
        elif len(fr) <= (q * fr.n_intervals if per_level else q):
            report.step3c.append(iid)
        else:
            frames[iid] = fr
    return frames, report


def apply_strict_filter(frames: Mapping[str, ItemFrame], min_intervals: int = 50, min_n: int = 1000) -> dict:
    """Keep frames with enough intervals and enough examinees."""
    return {k: f for k, f in frames.items() if f.n_intervals >= min_intervals and len(f) >= min_n}


FRAME_COLUMNS = ["item_id", "y", "g", "theta_K", "theta_s", "interval_j"]


def write_frames_csv(path, frames: Mapping[str, ItemFrame]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FRAME_COLUMNS)
        for iid in sorted(frames):
            f = frames[iid]
            for r in range(len(f)):
                w.writerow([iid, int(f.y[r]), int(f.g[r]), repr(float(f.theta_K[r])),
                            repr(float(f.theta_s[r])), int(f.j[r])])


def read_frames_csv(path) -> dict:
    cols: dict[str, dict[str, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = cols.setdefault(row["item_id"], {k: [] for k in FRAME_COLUMNS[1:]})
            for k in FRAME_COLUMNS[1:]:
                d[k].append(row[k])
    out = {}
    for iid in sorted(cols):
        d = cols[iid]
        out[iid] = ItemFrame(iid, np.array(d["y"], dtype=np.int8), np.array(d["g"], dtype=np.int8),
                             np.array(d["theta_K"], dtype=float), np.array(d["theta_s"], dtype=float),
                             np.array(d["interval_j"], dtype=np.int64))
    return out


def drop_summary(reports: Sequence[DropReport]) -> dict:
    """Across-replication summary in the layout of the dropped-items table."""
    prop = np.array([r.dropped_fraction for r in reports])
    count = np.array([r.n_dropped for r in reports], dtype=float)
    total = np.array([r.total_administered for r in reports], dtype=float)

    def sd(v):
        return float(v.std(ddof=1)) if len(v) > 1 else float("nan")

    return {
        "prop_mu": float(prop.mean()), "prop_sigma": sd(prop),
        "count_mu": float(count.mean()), "count_sigma": sd(count),
        "count_min": float(count.min()), "count_max": float(count.max()),
        "total_mu": float(total.mean()), "total_sigma": sd(total),
        "total_min": float(total.min()), "total_max": float(total.max()),
    }
