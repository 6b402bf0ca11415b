import dataclasses
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from catdif.engine import PrecisionSummary
from catdif.harness import (Cell, EmptyCell, FitRecord, ReplicationResult, StudyConfig, aggregate,
                            design_cells, run_replication, run_study, stable_seed)
from catdif.pool import DifConfig
from catdif.prep import DropReport

TINY = dict(n_examinees=120, estimators=("MLE",), test_lengths=(6,), exposure_rates=(0.33,), pool_size=40,
            models=("S1", "M1"), min_item_replications=1, n_replications=2)


def rec(item, model, flagged, converged=True, is_dif=False):
    nan = math.nan
    return FitRecord(item, model, is_dif, converged, flagged, nan, nan, nan, nan, nan, nan)


def rep(i, fits, dif=(), error=""):
    return ReplicationResult("c", i, i, PrecisionSummary(0.0, 0.1, 0.9, 0.3), DropReport(total_administered=5),
                             fits, frozenset(dif), error=error)


class TestDesign:
    def test_cell_counts(self):
        assert len(design_cells(StudyConfig(study=1))) == 8
        cells = design_cells(StudyConfig(study=2))
        assert len(cells) == 32 and len({c.id for c in cells}) == 32
        assert all(c.dif is not None for c in cells)

    def test_defaults(self):
        cfg = StudyConfig(study=1)
        assert (cfg.n_replications, cfg.n_examinees, cfg.alpha) == (100, 5000, 0.05)
        assert cfg.models == ("M6", "S1", "S2", "S3") and cfg.q == 2

    @pytest.mark.parametrize("bad", [dict(study=3), dict(alpha=1.5), dict(models=("M9",)),
                                     dict(estimators=("WLE",)), dict(exposure_rates=(0,)),
                                     dict(min_item_replications=0), dict(test_lengths=(900,))])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            StudyConfig(**{"study": 1, **bad})

    def test_seed_mix(self):
        assert stable_seed(0, "x", 1) == stable_seed(0, "x", 1)
        assert len({stable_seed(0, "x", r) for r in range(100)}) == 100
        assert stable_seed(0, "x", 1) != stable_seed(1, "x", 1) != stable_seed(0, "y", 1)
        assert 0 <= stable_seed(5, "z", 3) < 2 ** 64


@pytest.fixture(scope="module")
def cfg():
    return StudyConfig(study=1, **TINY)


class TestReplication:
    def test_deterministic(self, cfg):
        cell = design_cells(cfg)[0]
        a, b = run_replication(cfg, cell, 0), run_replication(cfg, cell, 0)
        key = lambda r: [(f.item_id, f.model, f.flagged, f.converged, repr(f.p_g)) for f in r.fits]  # noqa: E731
        assert key(a) == key(b) and a.seed == b.seed and a.precision == b.precision
        assert key(run_replication(cfg, cell, 1)) != key(a)

    @pytest.mark.parametrize("alpha,expect", [(1.0, True), (0.0, False)])
    def test_alpha_extremes(self, cfg, alpha, expect):
        cell = design_cells(cfg)[0]
        out = run_replication(dataclasses.replace(cfg, alpha=alpha), cell, 0)
        conv = [f for f in out.fits if f.converged]
        assert conv and all(f.flagged is expect for f in conv)

    def test_exhausted_pool_aborts(self):
        cfg = StudyConfig(study=1, **{**TINY, "pool_size": 10, "test_lengths": (8,), "exposure_rates": (0.2,)})
        cell = design_cells(cfg)[0]
        out = run_replication(cfg, cell, 0)
        assert out.error.startswith("NoEligibleItem") and not out.fits
        with pytest.raises(ValueError):
            aggregate(cfg, cell, [out])

    def test_dif_redrawn_per_replication(self):
        cfg = StudyConfig(study=2, **{**TINY, "dif_parameters": ("b",), "dif_proportions": (0.2,)})
        cell = design_cells(cfg)[0]
        a, b = run_replication(cfg, cell, 0), run_replication(cfg, cell, 1)
        assert len(a.dif_items) == 8 and a.dif_items != b.dif_items
        fixed = dataclasses.replace(cfg, redraw_dif=False)
        cell = design_cells(fixed)[0]
        assert run_replication(fixed, cell, 0).dif_items == run_replication(fixed, cell, 1).dif_items


class TestAggregate:
    cfg = StudyConfig(study=1, models=("S1",), min_item_replications=10)
    cell = Cell("MLE", 25, 0.33)

    def test_rate(self):
        results = [rep(i, [rec("A", "S1", i < 5), rec("B", "S1", False)]) for i in range(100)]
        res = aggregate(self.cfg, self.cell, results)
        assert res.type1["S1"].mean == pytest.approx(0.025)
        assert res.kept[("A", False)] == 100
        assert res.power == {}

    def test_single_item_has_no_sd(self):
        results = [rep(i, [rec("A", "S1", i < 3)]) for i in range(10)]
        r = aggregate(self.cfg, self.cell, results).type1["S1"]
        assert r.n_items == 1 and r.mean == pytest.approx(0.3) and math.isnan(r.sd)

    def test_needs_all_models_converged(self):
        cfg = dataclasses.replace(self.cfg, models=("S1", "M6"))
        results = [rep(i, [rec("A", "S1", True), rec("A", "M6", False, converged=i % 2 == 0)]) for i in range(20)]
        res = aggregate(cfg, self.cell, results)
        assert res.kept[("A", False)] == 10 and res.type1["S1"].mean == 1.0

    def test_floor_and_empty_cell(self):
        results = [rep(i, [rec("A", "S1", False)]) for i in range(9)]
        with pytest.raises(EmptyCell):
            aggregate(self.cfg, self.cell, results)
        res = aggregate(self.cfg, self.cell, results, allow_empty=True)
        assert res.notes == ["EmptyCell"] and res.type1["S1"].pooled == 0.0

    def test_failed_replications_excluded(self):
        results = [rep(i, [rec("A", "S1", True)]) for i in range(10)] + [rep(10, [], error="NoEligibleItem")]
        res = aggregate(self.cfg, self.cell, results)
        assert res.n_replications == 10 and res.n_failed == 1

    def test_status_within_replication(self):
        cell = Cell("MLE", 25, 0.33, DifConfig("b", 0.4, 0.2))
        cfg = dataclasses.replace(self.cfg, min_item_replications=1)
        results = [rep(i, [rec("A", "S1", i % 2 == 0, is_dif=i % 2 == 0)], dif=("A",) if i % 2 == 0 else ())
                   for i in range(10)]
        res = aggregate(cfg, cell, results)
        assert res.power["S1"].mean == 1.0 and res.type1["S1"].mean == 0.0
        assert res.kept == {("A", True): 5, ("A", False): 5}

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=25)
    def test_properties(self, seed):
        rng = random.Random(seed)
        models = ("S1", "S2", "M6")
        cfg = StudyConfig(study=1, models=models, min_item_replications=2)
        results = [rep(i, [rec(it, m, rng.random() < 0.3, converged=rng.random() < 0.9)
                           for it in "ABCDE" for m in models]) for i in range(12)]
        base = aggregate(cfg, self.cell, results, allow_empty=True)
        shuffled = results[:]
        rng.shuffle(shuffled)
        again = aggregate(cfg, self.cell, shuffled, allow_empty=True)
        assert again.type1 == base.type1 and again.kept == base.kept
        for r in base.type1.values():
            assert math.isnan(r.mean) or 0 <= r.mean <= 1
        assert all(v <= 12 for v in base.kept.values())
        fewer = aggregate(dataclasses.replace(cfg, models=("S1", "S2")), self.cell, results, allow_empty=True)
        for k, v in base.kept.items():
            assert fewer.kept.get(k, 0) >= v


class TestStudy:
    def test_single_replication(self):
        cfg = StudyConfig(study=1, **{**TINY, "n_replications": 1})
        report = run_study(cfg)
        c = report.conditions[0]
        assert len(report.conditions) == 1
        assert c.n_replications == 1
        assert all(math.isnan(v) for v in c.precision_sd.values())
        assert math.isnan(c.drops["prop_sigma"])

    def test_study2_grid(self):
        cfg = StudyConfig(study=2, **{**TINY, "n_examinees": 40, "test_lengths": (4, 5), "estimators": ("MLE", "EAP"),
                                      "exposure_rates": (0.33, 0.5), "n_replications": 1, "models": ("S1",),
                                      "icc_screen": False})
        report = run_study(cfg)
        assert len(report.conditions) == 32
        assert all(c.power for c in report.conditions if c.n_replications)

    def test_parallel_matches_serial(self, cfg):
        a, b = run_study(cfg, workers=1), run_study(cfg, workers=2)
        assert a.conditions[0].type1 == b.conditions[0].type1
        assert a.seeds == b.seeds
        assert a.icc_cell == design_cells(cfg)[0].id
        first = next(r for r in a.replications if r.replication == 0)
        assert first.icc and first.interval_counts
