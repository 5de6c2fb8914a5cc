"""Channel composition, band splits, synthetic regions, on-disk formats."""

import itertools

import numpy as np
import pytest
from scipy import stats

from sardino.errors import ConfigError, DataError, DimensionError
from sardino.reference import REFERENCE_RECIPES
from sardino.tiles import (
    SEASONS,
    ManifestEntry,
    RegionRecipe,
    SeasonalStack,
    Tile,
    assign_splits,
    coherence_clamp_count,
    compose_gssic_channels,
    compose_s1grd_channels,
    compute_label,
    read_manifest,
    read_tile,
    reset_coherence_clamp_count,
    synth_region,
    write_manifest,
    write_tile,
)


def full_stack(h=2, w=2, seed=0):
    rng = np.random.default_rng(seed)
    stack = SeasonalStack()
    for s in SEASONS:
        stack.vv_db[s] = rng.normal(-10, 2, (h, w)).astype(np.float32)
        stack.vh_db[s] = rng.normal(-16, 2, (h, w)).astype(np.float32)
        stack.coh_12d[s] = rng.uniform(0, 1, (h, w)).astype(np.float32)
        stack.coh_24d[s] = rng.uniform(0, 1, (h, w)).astype(np.float32)
    return stack


class TestAmplitudeComposite:
    def test_exactly_twelve_channels(self):
        assert compose_s1grd_channels(full_stack()).shape[0] == 12

    def test_db_difference_channel(self):
        stack = full_stack()
        stack.vv_db["spring"] = np.full((2, 2), -7.0, dtype=np.float32)
        stack.vh_db["spring"] = np.full((2, 2), -13.0, dtype=np.float32)
        out = compose_s1grd_channels(stack)
        assert np.allclose(out[2], 6.0)

    def test_equal_polarizations_zero_difference(self):
        stack = full_stack()
        for s in SEASONS:
            stack.vh_db[s] = stack.vv_db[s].copy()
        out = compose_s1grd_channels(stack)
        for season_idx in range(4):
            assert np.allclose(out[season_idx * 3 + 2], 0.0)

    def test_channel_order_season_major(self):
        stack = full_stack()
        out = compose_s1grd_channels(stack)
        for i, season in enumerate(SEASONS):
            assert np.array_equal(out[3 * i], stack.vv_db[season])
            assert np.array_equal(out[3 * i + 1], stack.vh_db[season])

    def test_missing_season_named(self):
        stack = full_stack()
        del stack.vv_db["autumn"]
        with pytest.raises(DataError, match="autumn"):
            compose_s1grd_channels(stack)

    def test_pointwise_identity_on_random_stack(self):
        stack = full_stack(h=5, w=7, seed=3)
        out = compose_s1grd_channels(stack)
        for i, season in enumerate(SEASONS):
            assert np.array_equal(out[3 * i + 2], stack.vv_db[season] - stack.vh_db[season])


class TestCoherenceComposite:
    def test_exactly_eight_channels(self):
        assert compose_gssic_channels(full_stack()).shape[0] == 8

    def test_clamp_increments_counter(self):
        reset_coherence_clamp_count()
        stack = full_stack()
        stack.coh_12d["spring"] = np.array([[1.3, 0.5], [0.2, -0.1]], dtype=np.float32)
        out = compose_gssic_channels(stack)
        assert coherence_clamp_count() == 2
        assert out[0].max() <= 1.0 and out[0].min() >= 0.0

    def test_layout_matches_hand_interleaving(self):
        stack = full_stack(seed=9)
        out = compose_gssic_channels(stack)
        expect = []
        for season in SEASONS:
            expect.append(stack.coh_12d[season])
            expect.append(stack.coh_24d[season])
        assert np.array_equal(out, np.stack(expect))

    def test_missing_raster_is_data_error(self):
        stack = full_stack()
        del stack.coh_24d["winter"]
        with pytest.raises(DataError, match="winter"):
            compose_gssic_channels(stack)

    def test_values_within_unit_interval(self):
        out = compose_gssic_channels(full_stack(seed=4))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestSplits:
    def test_ten_bands_exact_622(self):
        for seed in range(5):
            splits = assign_splits(range(10), seed=seed)
            counts = [list(splits.values()).count(s) for s in ("train", "val", "test")]
            assert counts == [6, 2, 2]

    def test_band_is_split_unit(self):
        splits = assign_splits(range(10), seed=1)
        tile_bands = [3] * 50
        assigned = {splits[b] for b in tile_bands}
        assert len(assigned) == 1

    def test_seven_bands_enumerated_offsets(self):
        seen = set()
        for seed in range(40):
            splits = assign_splits(range(7), seed=seed)
            counts = tuple(list(splits.values()).count(s) for s in ("train", "val", "test"))
            seen.add(counts)
        assert seen <= {(5, 1, 1), (4, 2, 1), (4, 1, 2)}

    def test_fewer_than_five_bands_rejected(self):
        with pytest.raises(ConfigError):
            assign_splits(range(4))

    def test_no_band_in_two_splits_and_convergence(self):
        for n in (5, 7, 10, 100):
            splits = assign_splits(range(n), seed=2)
            assert len(splits) == n
            fracs = np.array(
                [list(splits.values()).count(s) / n for s in ("train", "val", "test")]
            )
            assert np.all(np.abs(fracs - [0.6, 0.2, 0.2]) <= 1.0 / n + 1e-9)

    def test_nonstandard_fractions_rejected(self):
        with pytest.raises(ConfigError):
            assign_splits(range(10), fractions=(0.5, 0.25, 0.25))


class TestComputeLabel:
    def test_constant(self):
        assert compute_label(np.full((4, 4), 40.0)) == pytest.approx(40.0)

    def test_half_and_half(self):
        raster = np.concatenate([np.zeros(8), np.full(8, 100.0)])
        assert compute_label(raster) == pytest.approx(50.0)

    def test_matches_hand_sum(self):
        rng = np.random.default_rng(0)
        raster = rng.uniform(0, 100, (3, 3))
        assert compute_label(raster) == pytest.approx(raster.sum() / 9, abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            compute_label(np.empty(0))


class TestSynthRegion:
    RECIPE = REFERENCE_RECIPES["regA"]

    def test_determinism(self):
        a = synth_region(self.RECIPE, 6, 32, 32, 3, seed=7)
        b = synth_region(self.RECIPE, 6, 32, 32, 3, seed=7)
        for ta, tb in zip(a, b):
            assert ta.id == tb.id
            assert np.array_equal(ta.data, tb.data)
            assert ta.label == tb.label

    def test_labels_in_range(self):
        for tile in synth_region(self.RECIPE, 40, 16, 16, 3, seed=1):
            assert 0.0 <= tile.label <= 100.0

    def test_band_index_by_row(self):
        region = synth_region(self.RECIPE, 30, 16, 16, 3, seed=0)
        bands = [t.band_index for t in region]
        assert bands == sorted(bands)
        assert len(set(bands)) == self.RECIPE.n_bands

    def test_label_distributions_separate_across_recipes(self):
        a = [t.label for t in synth_region(REFERENCE_RECIPES["regA"], 500, 16, 16, 3, seed=0)]
        c = [t.label for t in synth_region(REFERENCE_RECIPES["regC"], 500, 16, 16, 3, seed=1)]
        ks = stats.ks_2samp(a, c).statistic
        assert ks > 0.5

    def test_amplitude_channels_rise_with_vegetation(self):
        region = synth_region(self.RECIPE, 200, 16, 16, 3, seed=3)
        labels = np.array([t.label for t in region])
        ch0 = np.array([t.data[0].mean() for t in region])
        assert np.corrcoef(labels, ch0)[0, 1] > 0.3

    def test_coherence_channels_fall_with_vegetation(self):
        recipe = REFERENCE_RECIPES["regA_coh"]
        region = synth_region(recipe, 200, 16, 16, 3, seed=3)
        labels = np.array([t.label for t in region])
        ch0 = np.array([t.data[0].mean() for t in region])
        assert np.corrcoef(labels, ch0)[0, 1] < -0.3
        for t in region[:20]:
            assert t.data.min() >= 0.0 and t.data.max() <= 1.0

    def test_channel_count_must_match_recipe(self):
        with pytest.raises(ConfigError):
            synth_region(self.RECIPE, 4, 16, 16, 5, seed=0)


class TestTileIO:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        tile = Tile(
            id="regA-00042",
            region="regA",
            band_index=3,
            data=rng.standard_normal((3, 8, 8)).astype(np.float32),
            label=37.25,
        )
        path = tmp_path / "tile.sart"
        write_tile(tile, path)
        back = read_tile(path)
        assert back.id == tile.id
        assert back.region == tile.region
        assert back.band_index == tile.band_index
        assert back.label == tile.label
        assert np.array_equal(back.data.view(np.uint32), tile.data.view(np.uint32))

    def test_absent_label_round_trips_as_none(self, tmp_path):
        tile = Tile("x", "r", 0, np.zeros((1, 2, 2), dtype=np.float32), label=None)
        write_tile(tile, tmp_path / "t.sart")
        assert read_tile(tmp_path / "t.sart").label is None

    def test_magic_checked(self, tmp_path):
        p = tmp_path / "bad.sart"
        p.write_bytes(b"WHAT" + b"\x00" * 30)
        with pytest.raises(DataError):
            read_tile(p)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(DataError):
            Tile("x", "r", 0, np.zeros((1, 2, 2)), label=130.0)


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [
            ManifestEntry("a-0", "regA", 0, "train", "tiles/regA/a-0.sart"),
            ManifestEntry("a-1", "regA", 1, "val", "tiles/regA/a-1.sart"),
            ManifestEntry("b-0", "regB", 0, "test", "tiles/regB/b-0.sart"),
        ]
        path = tmp_path / "manifest.csv"
        write_manifest(entries, path)
        assert path.read_text().splitlines()[0] == "tile_id,region,band_index,split,path"
        back = read_manifest(path)
        assert back == entries

    def test_duplicate_ids_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        write_manifest(
            [
                ManifestEntry("a-0", "regA", 0, "train", "x"),
                ManifestEntry("a-0", "regA", 1, "val", "y"),
            ],
            path,
        )
        with pytest.raises(DataError):
            read_manifest(path)

    def test_bad_split_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("tile_id,region,band_index,split,path\na,regA,0,training,x\n")
        with pytest.raises(DataError):
            read_manifest(path)
