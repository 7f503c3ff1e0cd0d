import itertools
import math
from collections import Counter

import numpy as np
import pytest

from geomae.errors import DataError, InvalidArgumentError
from geomae.sampler import (
    PatchRecord,
    SamplerConfig,
    SceneQA,
    TileRecord,
    TileSelectionConfig,
    build_sequences,
    cap_and_dedup,
    fill_chip,
    fill_missing_nearest,
    filter_patch,
    gaps_valid,
    lulc_distribution,
    lulc_entropy,
    month_index,
    run_sampler,
    select_tiles,
    subsample_homogeneous,
    verify_dataset,
)
from geomae.sampler.io import read_catalog, read_scene_index, write_catalog, write_scene_index
from geomae.sampler.sequences import count_sequences, enumerate_sequences
from geomae.sampler.synthetic import make_catalog, make_scenes
from geomae.sampler.tiles import class_pool, merge_classes


def doy_of_month(m):
    return 15 + 30 * m


def rec(area="a", split="train", tile="t", dates=((2020, 1), (2020, 32), (2020, 61), (2020, 91)), **kw):
    T = len(dates)
    kw.setdefault("missing_frac", tuple((0.0,) * 6 for _ in range(T)))
    kw.setdefault("cloud_frac", (0.0,) * T)
    return PatchRecord(tile_id=tile, area_id=area, block=(0, 0), dates=tuple(dates), split=split, **kw)


@pytest.fixture(scope="module")
def catalog():
    return make_catalog(2000, seed=0)


class TestEntropy:
    def test_one_hot(self):
        assert lulc_entropy({"a": 1.0, "b": 0.0}) == 0.0

    @pytest.mark.parametrize("k", [2, 5, 10])
    def test_uniform(self, k):
        assert lulc_entropy([1 / k] * k) == pytest.approx(math.log(k), rel=1e-14)

    def test_half_quarter_quarter(self):
        assert lulc_entropy([0.5, 0.25, 0.25]) == pytest.approx(1.0397, abs=5e-5)
        assert lulc_entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5 * math.log(2), rel=1e-14)


class TestTileRecord:
    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            TileRecord("t", {"a": 0.5, "b": 0.4})
        with pytest.raises(InvalidArgumentError):
            TileRecord("t", {"a": 1.0}, urban_frac=1.5)

    def test_merge_forest(self):
        merged = merge_classes({"evergreen": 0.2, "deciduous": 0.3, "open_a": 0.1, "crop": 0.4},
                               {"forest_closed": ["evergreen", "deciduous"], "forest_open": ["open_a"]})
        assert merged == pytest.approx({"forest_closed": 0.5, "forest_open": 0.1, "crop": 0.4})


class TestSelectTiles:
    def test_degenerate_pool(self):
        tiles = [TileRecord(f"t{i}", {"only": 1.0}) for i in range(5)]
        sel = select_tiles(tiles, np.random.default_rng(0))
        assert sorted(sel.all) == [f"t{i}" for i in range(5)]
        assert len(sel.train) == round(5 * 0.95) and len(sel.val) == 5 - round(5 * 0.95)

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            select_tiles([], np.random.default_rng(0))

    def test_duplicate_ids(self):
        with pytest.raises(InvalidArgumentError):
            select_tiles([TileRecord("t", {"a": 1.0})] * 2, np.random.default_rng(0))

    def test_class_draws_come_from_top_pool(self, catalog):
        sel = select_tiles(catalog, np.random.default_rng(1))
        by_id = {t.tile_id: t for t in catalog}
        classes = sorted({c for t in catalog for c in t.class_props})
        for cls in classes:
            # brute-force pool: sort every tile by share of this class
            ranked = sorted((t for t in catalog if t.class_props[cls] > 0), key=lambda t: (-t.class_props[cls], t.tile_id))
            pool = {t.tile_id for t in ranked[:500]}
            drawn = [tid for tid, why in sel.sources.items() if f"class:{cls}" in why]
            assert len(drawn) == 100
            assert set(drawn) <= pool
            assert {t.tile_id for t in class_pool(catalog, cls, 500)} == pool
        assert all(by_id[t] for t in sel.all)

    def test_ecoregion_coverage(self, catalog):
        sel = select_tiles(catalog, np.random.default_rng(2))
        by_id = {t.tile_id: t for t in catalog}
        available = Counter(e for t in catalog for e in t.ecoregions)
        covered = Counter(e for tid in sel.all for e in by_id[tid].ecoregions)
        for eco, n in available.items():
            assert covered[eco] >= min(3, n)

    def test_split_disjoint(self, catalog):
        sel = select_tiles(catalog, np.random.default_rng(3))
        assert not set(sel.train) & set(sel.val)
        n = len(sel.all)
        assert len(sel.train) == round(0.95 * n)

    def test_urban_and_entropy_top_lists(self):
        tiles = [TileRecord(f"t{i}", {"a": 1 - i / 20, "b": i / 20}, urban_frac=i / 20) for i in range(11)]
        cfg = TileSelectionConfig(per_class=0, n_urban=2, n_entropy=1, min_ecoregion_tiles=0)
        sel = select_tiles(tiles, np.random.default_rng(0), cfg)
        assert {t for t, why in sel.sources.items() if "urban" in why} == {"t10", "t9"}
        assert {t for t, why in sel.sources.items() if "entropy" in why} == {"t10"}


class TestSequences:
    def test_consecutive_months_valid(self):
        dates = [(2020, doy_of_month(m)) for m in range(4)]
        assert gaps_valid(dates)
        assert build_sequences(dates, np.random.default_rng(0)).tolist() == [[0, 1, 2, 3]]

    def test_eight_month_gaps(self):
        dates = [(2016, 15), (2016, 258), (2017, 135), (2018, 15)]
        assert build_sequences(dates, np.random.default_rng(0)).shape == (0, 4)

    def test_month_index(self):
        assert month_index(2020, 31) == 2020 * 12
        assert month_index(2020, 32) == 2020 * 12 + 1
        assert month_index(2020, 366) == 2020 * 12 + 11

    def test_same_month_is_not_a_gap(self):
        assert not gaps_valid([(2020, 1), (2020, 20), (2020, 40), (2020, 70)])

    def test_two_years_monthly_brute_force(self):
        dates = [(2018 + m // 12, doy_of_month(m % 12)) for m in range(24)]
        months = np.array([month_index(y, d) for y, d in dates])
        brute = [c for c in itertools.combinations(range(24), 4) if gaps_valid([dates[i] for i in c])]
        assert count_sequences(months) == len(brute)
        assert [tuple(s) for s in enumerate_sequences(months)] == brute
        out = build_sequences(dates, np.random.default_rng(5), cap=1500)
        assert len(out) == min(1500, len(brute))
        assert len({tuple(s) for s in out}) == len(out)
        assert all(gaps_valid([dates[i] for i in s]) for s in out)

    def test_cap(self):
        dates = [(2018 + m // 12, doy_of_month(m % 12)) for m in range(24)]
        assert len(build_sequences(dates, np.random.default_rng(0), cap=250)) == 250

    def test_large_candidate_set_sampled(self, monkeypatch):
        import geomae.sampler.sequences as seqmod

        dates = [(2014 + m // 12, doy_of_month(m % 12)) for m in range(120)]
        months = np.array([month_index(y, d) for y, d in dates])
        # force the draw-without-enumeration path
        monkeypatch.setattr(seqmod, "_ENUMERATION_LIMIT", count_sequences(months) - 1)
        calls = []
        real = seqmod._sample_sequences_dp
        monkeypatch.setattr(seqmod, "_sample_sequences_dp", lambda *a: calls.append(1) or real(*a))
        out = build_sequences(dates, np.random.default_rng(0), cap=100)
        assert calls
        assert len(out) == 100 and len({tuple(s) for s in out}) == 100
        assert all(gaps_valid([dates[i] for i in s]) for s in out)

    def test_reproducible(self):
        dates = [(2018 + m // 12, doy_of_month(m % 12)) for m in range(24)]
        a = build_sequences(dates, np.random.default_rng(9), cap=50)
        b = build_sequences(dates, np.random.default_rng(9), cap=50)
        assert np.array_equal(a, b)


class TestFilter:
    def test_clean_accepted(self):
        assert filter_patch(rec()).accepted

    def test_cloud(self):
        v = filter_patch(rec(cloud_frac=(0.0, 0.25, 0.0, 0.0)))
        assert not v and v.reason == "cloud"
        assert filter_patch(rec(cloud_frac=(0.2,) * 4)).accepted

    def test_missing(self):
        miss = tuple((0.0,) * 6 for _ in range(3)) + ((0.0, 0.011, 0.0, 0.0, 0.0, 0.0),)
        v = filter_patch(rec(missing_frac=miss))
        assert v.reason == "missing"

    def test_missing_qa(self):
        with pytest.raises(InvalidArgumentError):
            filter_patch(rec(cloud_frac=(0.0,)))
        with pytest.raises(InvalidArgumentError):
            filter_patch(rec(missing_frac=((),) * 4))


class TestFill:
    def test_nearest(self):
        img = np.array([[1.0, 2.0, 3.0], [4.0, 0.0, 6.0], [7.0, 8.0, 9.0]])
        miss = np.zeros((3, 3), bool)
        miss[1, 1] = True
        assert fill_missing_nearest(img, miss)[1, 1] == 1.0  # first in row-major order at distance 1
        miss[:, :2] = True
        out = fill_missing_nearest(img, miss)
        # (2, 0) reaches column 2 at radius 2, where the window starts at row 0
        assert out[1, 0] == 3.0 and out[2, 0] == 3.0 and out[2, 1] == 6.0

    def test_chip(self):
        chip = np.ones((2, 1, 3, 3))
        chip[1, 0, 0, 0] = np.nan
        assert np.isfinite(fill_chip(chip)).all()

    def test_all_missing(self):
        with pytest.raises(InvalidArgumentError):
            fill_missing_nearest(np.zeros((2, 2)), np.ones((2, 2), bool))


class TestCapAndDedup:
    def test_ten_per_area(self):
        recs = [rec(dates=((2020, 1 + i), (2020, 40), (2020, 70), (2020, 100))) for i in range(15)]
        out = cap_and_dedup(recs, np.random.default_rng(0))
        assert len(out) == 10
        assert all(r in recs for r in out)

    def test_val_cap_two(self):
        recs = [rec(split="val", dates=((2020, 1 + i), (2020, 40), (2020, 70), (2020, 100))) for i in range(5)]
        assert len(cap_and_dedup(recs, np.random.default_rng(0))) == 2

    def test_overlap_drops_train(self):
        out = cap_and_dedup([rec(area="x", split="train"), rec(area="x", split="val")], np.random.default_rng(0))
        assert [r.split for r in out] == ["val"]

    def test_deterministic(self):
        recs = [rec(area=f"a{i % 3}", dates=((2020, 1 + i), (2020, 40), (2020, 70), (2020, 100))) for i in range(40)]
        a = cap_and_dedup(recs, np.random.default_rng(4))
        b = cap_and_dedup(recs, np.random.default_rng(4))
        assert a == b and len(a) == 30


class TestSubsample:
    def test_rate_one_identity(self):
        recs = [rec(area=str(i)) for i in range(20)]
        assert subsample_homogeneous(recs, [True] * 20, [], 1.0, np.random.default_rng(0)) == recs

    def test_binomial(self):
        recs = [rec(area=str(i)) for i in range(10_000)]
        out = subsample_homogeneous(recs, [True] * 10_000, [], 0.1, np.random.default_rng(0))
        assert 940 <= len(out) <= 1060

    def test_desert_and_unflagged(self):
        recs = [rec(tile="desert", area=str(i)) for i in range(1000)] + [rec(tile="ok", area=f"k{i}") for i in range(50)]
        out = subsample_homogeneous(recs, [False] * 1050, ["desert"], 0.1, np.random.default_rng(1))
        assert sum(r.tile_id == "ok" for r in out) == 50
        assert 60 <= sum(r.tile_id == "desert" for r in out) <= 140

    def test_bad_rate(self):
        with pytest.raises(InvalidArgumentError):
            subsample_homogeneous([], [], [], 0.0)


@pytest.fixture(scope="module")
def small_run():
    cat = make_catalog(200, n_ecoregions=40, seed=3)
    scenes = make_scenes(cat, seed=3)
    by_tile = {}
    for s in scenes:
        by_tile.setdefault(s.tile_id, []).append(s)
    cfg = SamplerConfig(tiles=TileSelectionConfig(per_class=10, pool_size=50, n_urban=20, n_entropy=20))
    return cat, by_tile, cfg, run_sampler(cat, by_tile, seed=11, cfg=cfg)


class TestPipeline:
    def test_verifier_passes(self, small_run):
        _, _, cfg, result = small_run
        checks = verify_dataset(result, cfg)
        assert len(checks) == 9
        assert all(c.passed for c in checks), [c for c in checks if not c.passed]
        assert result.stats["records"] == len(result.records) > 0

    def test_verifier_catches_violations(self, small_run):
        _, _, cfg, result = small_run
        from dataclasses import replace

        bad = replace(result, records=list(result.records) + [replace(result.records[0], cloud_frac=(0.5,) * 4)])
        failed = {c.name for c in verify_dataset(bad, cfg) if not c.passed}
        assert "cloud_le_20pct" in failed and "no_duplicate_samples" in failed

    def test_deterministic(self, small_run):
        cat, by_tile, cfg, result = small_run
        again = run_sampler(cat, by_tile, seed=11, cfg=cfg)
        assert again.records == result.records

    def test_lulc_distribution(self, small_run):
        cat, _, _, result = small_run
        rows = lulc_distribution(cat, result.records)
        assert sum(float(r["all_tiles"]) for r in rows) == pytest.approx(1.0)
        assert sum(float(r["training_samples"]) for r in rows) == pytest.approx(1.0)


class TestIO:
    def test_catalog_round_trip(self, tmp_path):
        cat = make_catalog(20, seed=1)
        write_catalog(tmp_path / "c.csv", cat)
        assert read_catalog(tmp_path / "c.csv") == cat

    def test_scene_round_trip(self, tmp_path):
        cat = make_catalog(3, seed=1)
        scenes = make_scenes(cat, n_scenes=5, seed=1)
        write_scene_index(tmp_path / "s.csv", scenes)
        back = read_scene_index(tmp_path / "s.csv")
        assert sum(len(v) for v in back.values()) == len(scenes)
        s0 = back[scenes[0].tile_id][0]
        assert isinstance(s0, SceneQA) and s0.missing.shape == (4, 6)

    def test_malformed_row_reported(self, tmp_path):
        write_catalog(tmp_path / "c.csv", make_catalog(3, seed=1))
        lines = (tmp_path / "c.csv").read_text().splitlines()
        lines[2] = lines[2].replace(lines[2].split(",")[1], "north", 1)
        (tmp_path / "c.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="row 3"):
            read_catalog(tmp_path / "c.csv")

    def test_bad_fraction_in_scene_index(self, tmp_path):
        (tmp_path / "s.csv").write_text("tile_id,year,doy,block_row,block_col,cloud_frac\nT,2020,5,0,0,0.1\nT,2020,6,0,0,1.5\n")
        with pytest.raises(DataError, match="row 3"):
            read_scene_index(tmp_path / "s.csv")
