"""Synthetic item pools, focal-group DIF injection and examinee cohorts."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .irt import Item


@dataclass(frozen=True)
class TruncNormal:
    mean: float
    sd: float
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"degenerate truncation bounds [{self.lo}, {self.hi}]")
        if not self.sd > 0:
            raise ValueError("sd must be positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Rejection sampler; the configured bounds keep acceptance high."""
        out = np.empty(n)
        filled = 0
        while filled < n:
            need = n - filled
            draw = rng.normal(self.mean, self.sd, size=max(2 * need, 16))
            draw = draw[(draw >= self.lo) & (draw <= self.hi)][:need]
            out[filled:filled + len(draw)] = draw
            filled += len(draw)
        return out


# Location/scale of the untruncated normals are set so that the truncated
# draws reproduce the reported pool moments (a: 1.20/0.33, b: 0.53/0.48,
# c: 0.19/0.10) within sampling error.
DEFAULT_A = TruncNormal(1.1693, 0.3629, 0.53, 2.29)
DEFAULT_B = TruncNormal(0.5608, 0.5262, -0.84, 1.55)
DEFAULT_C = TruncNormal(0.0568, 0.1805, 0.05, 0.48)


@dataclass(frozen=True)
class PoolConfig:
    n_items: int = 800
    a_dist: TruncNormal = DEFAULT_A
    b_dist: TruncNormal = DEFAULT_B
    c_dist: TruncNormal = DEFAULT_C
    p_3pl: float = 87 / 189
    n_categories: int = 4
    category_proportions: tuple = (0.30, 0.25, 0.25, 0.20)

    def __post_init__(self):
        if self.n_items < 1:
            raise ValueError("n_items must be positive")
        if not 0.0 <= self.p_3pl <= 1.0:
            raise ValueError("p_3pl must be a fraction")
        props = np.asarray(self.category_proportions, dtype=float)
        if len(props) != self.n_categories:
            raise ValueError("category_proportions must have n_categories entries")
        if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
            raise ValueError("category_proportions must be a simplex")


@dataclass(frozen=True)
class DifConfig:
    parameter: str = "b"
    magnitude: float = 0.4
    proportion: float = 0.2
    redraw_per_replication: bool = True

    def __post_init__(self):
        if self.parameter not in ("a", "b"):
            raise ValueError("DIF parameter must be 'a' or 'b'")
        if self.magnitude < 0:
            raise ValueError("DIF magnitude must be nonnegative")
        if not 0.0 <= self.proportion <= 1.0:
            raise ValueError("DIF proportion must lie in [0, 1]")


@dataclass
class FocalMap:
    """Focal-group parameters for every pool item plus the contaminated ids."""

    items: dict = field(default_factory=dict)
    contaminated: frozenset = frozenset()

    def __getitem__(self, item_id):
        return self.items[item_id]

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class Cohort:
    ids: np.ndarray
    theta: np.ndarray
    group: np.ndarray

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return zip(self.ids.tolist(), self.theta.tolist(), self.group.tolist())


def generate_pool(cfg: PoolConfig = PoolConfig(), seed: int = 0) -> list[Item]:
    """Draw ``cfg.n_items`` items with truncated-normal a, b and c.

    Only a ``p_3pl`` share of items carries a guessing parameter; the rest
    are 2PL (c = 0). Category labels are allocated in proportion to
    ``cfg.category_proportions`` (largest-remainder rounding) and shuffled.
    """
    rng = np.random.default_rng(seed)
    n = cfg.n_items
    a = cfg.a_dist.sample(rng, n)
    b = cfg.b_dist.sample(rng, n)
    has_c = rng.random(n) < cfg.p_3pl
    c = np.where(has_c, cfg.c_dist.sample(rng, n), 0.0)

    props = np.asarray(cfg.category_proportions, dtype=float)
    counts = np.floor(props * n).astype(int)
    rem = props * n - counts
    for k in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    cats = rng.permutation(np.repeat(np.arange(cfg.n_categories), counts))

    width = len(str(n))
    return [
        Item(f"I{i + 1:0{width}d}", float(a[i]), float(b[i]), float(c[i]), int(cats[i]))
        for i in range(n)
    ]


def inject_dif(pool: Sequence[Item], cfg: DifConfig, seed: int = 0) -> FocalMap:
    """Copy the pool for the focal group, shifting one parameter on a random subset."""
    if not pool:
        raise ValueError("pool is empty")
    rng = np.random.default_rng(seed)
    n_dif = int(math.floor(cfg.proportion * len(pool) + 1e-9))
    chosen = rng.choice(len(pool), size=n_dif, replace=False) if n_dif else np.empty(0, int)
    contaminated = frozenset(pool[i].id for i in chosen)
    focal = {}
    for it in pool:
        if it.id in contaminated:
            if cfg.parameter == "a":
                focal[it.id] = Item(it.id, it.a + cfg.magnitude, it.b, it.c, it.category)
            else:
                focal[it.id] = Item(it.id, it.a, it.b + cfg.magnitude, it.c, it.category)
        else:
            focal[it.id] = it
    return FocalMap(focal, contaminated)


def no_dif(pool: Sequence[Item]) -> FocalMap:
    return FocalMap({it.id: it for it in pool}, frozenset())


def generate_cohort(n: int, seed: int = 0) -> Cohort:
    """Standard-normal true abilities with a random half/half group split."""
    if n < 2:
        raise ValueError("a cohort needs at least two examinees")
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(n)
    group = rng.permutation(np.arange(n) < n // 2).astype(int)
    width = len(str(n))
    ids = np.array([f"E{i + 1:0{width}d}" for i in range(n)])
    return Cohort(ids, theta, group)


POOL_COLUMNS = ["id", "a", "b", "c", "category", "focal_a", "focal_b", "is_dif"]


def write_pool_csv(path, pool: Sequence[Item], focal: FocalMap | None = None) -> None:
    focal = focal or no_dif(pool)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POOL_COLUMNS)
        for it in pool:
            f = focal[it.id]
            w.writerow([it.id, repr(it.a), repr(it.b), repr(it.c), it.category,
                        repr(f.a), repr(f.b), int(it.id in focal.contaminated)])


def read_pool_csv(path) -> tuple[list[Item], FocalMap]:
    pool, focal, dif = [], {}, set()
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            it = Item(row["id"], float(row["a"]), float(row["b"]), float(row["c"]), int(row["category"]))
            pool.append(it)
            focal[it.id] = Item(it.id, float(row["focal_a"]), float(row["focal_b"]), it.c, it.category)
            if int(row["is_dif"]):
                dif.add(it.id)
    return pool, FocalMap(focal, frozenset(dif))


def pool_moments(pool: Sequence[Item]) -> Mapping[str, dict]:
    """Mean/SD/min/max of a, b and of the nonzero c values."""
    a = np.array([it.a for it in pool])
    b = np.array([it.b for it in pool])
    c = np.array([it.c for it in pool if it.c > 0])
    out = {}
    for name, v in (("a", a), ("b", b), ("c", c)):
        if len(v) == 0:
            continue
        out[name] = dict(n=len(v), mean=float(v.mean()), sd=float(v.std(ddof=1)) if len(v) > 1 else 0.0,
                         min=float(v.min()), max=float(v.max()))
    return out
