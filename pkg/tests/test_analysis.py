"""Embedding extraction, eval matrices, correlation, report emission."""

import numpy as np
import pytest

from sardino.analysis import (
    CorrelationReport,
    EvalMatrix,
    FittedModel,
    distance_error_correlation,
    eval_matrix,
    prediction_errors,
    read_eval_matrix_csv,
)
from sardino.embeddings import (
    EmbeddingSet,
    extract_embeddings,
    read_embeddings_csv,
    write_embeddings_csv,
)
from sardino.errors import DataError, DimensionError
from sardino.finetune import DecoderParams
from sardino.report import ScatterSpec, colormap_256, emit_report
from sardino.tiles import Tile
from sardino.tsne import TsneLayout
from sardino.vit import VitConfig, forward, init_vit_params

TINY = VitConfig(
    image_size=16, patch_size=8, channels=2, embed_dim=16, depth=1, heads=2, head_output_dim=16
)


def make_tiles(n, region="regA", seed=0, label_fn=lambda i: float(i % 90) + 5):
    rng = np.random.default_rng(seed)
    return [
        Tile(
            f"{region}-{i:04d}", region, 0,
            rng.standard_normal((2, 16, 16)).astype(np.float32), label=label_fn(i),
        )
        for i in range(n)
    ]


def make_embedding_set(n=20, d=4, region="regA", seed=0, labels=None):
    rng = np.random.default_rng(seed)
    return EmbeddingSet(
        ids=[f"{region}-{i}" for i in range(n)],
        regions=[region] * n,
        labels=np.arange(n, dtype=np.float64) if labels is None else np.asarray(labels, float),
        vectors=rng.standard_normal((n, d)).astype(np.float32),
    )


class TestExtract:
    def test_duplicate_tile_identical_vectors(self):
        store = init_vit_params(TINY, seed=0)
        tile = make_tiles(1)[0]
        twin = Tile("copy", tile.region, 0, tile.data.copy(), label=tile.label)
        es = extract_embeddings([tile, twin], store, TINY)
        assert np.array_equal(es.vectors[0], es.vectors[1])

    def test_dimension_matches_config(self):
        store = init_vit_params(TINY, seed=1)
        es = extract_embeddings(make_tiles(3), store, TINY)
        assert es.dim == TINY.embed_dim

    def test_matches_direct_forward(self):
        store = init_vit_params(TINY, seed=2)
        tiles = make_tiles(2, seed=5)
        es = extract_embeddings(tiles, store, TINY)
        outs = forward(tiles, store, TINY)
        assert np.allclose(es.vectors[0], outs[0].class_token, atol=1e-6)

    def test_cap_per_region(self):
        store = init_vit_params(TINY, seed=3)
        es = extract_embeddings(make_tiles(30), store, TINY, cap_per_region=10, seed=1)
        assert len(es) == 10

    def test_channel_mismatch_rejected(self):
        store = init_vit_params(TINY, seed=4)
        bad = Tile("b", "r", 0, np.zeros((3, 16, 16), dtype=np.float32))
        with pytest.raises(DimensionError):
            extract_embeddings([bad], store, TINY)

    def test_csv_round_trip(self, tmp_path):
        es = make_embedding_set(n=7, d=5)
        path = tmp_path / "emb.csv"
        write_embeddings_csv(es, path)
        back = read_embeddings_csv(path)
        assert back.ids == es.ids
        assert back.regions == es.regions
        assert np.allclose(back.labels, es.labels)
        assert np.allclose(back.vectors, es.vectors)


class TestEvalMatrix:
    def make_model(self, bias):
        store = init_vit_params(TINY, seed=0)
        return FittedModel(store, DecoderParams(np.zeros(TINY.feature_dim), bias), "attention")

    def test_shape_and_diagonal_finite(self):
        tiles = {
            "regA": make_tiles(6, "regA", label_fn=lambda i: 20.0),
            "regB": make_tiles(6, "regB", label_fn=lambda i: 60.0),
        }
        models = {"regA": self.make_model(20.0), "regB": self.make_model(60.0)}
        m = eval_matrix(models, tiles, TINY)
        assert m.values.shape == (2, 2)
        assert m.cell("regA", "regA") == pytest.approx(0.0)
        assert m.cell("regB", "regB") == pytest.approx(0.0)
        assert m.cell("regB", "regA") == pytest.approx(40.0)

    def test_mean_predictor_matches_std_oracle(self):
        rng = np.random.default_rng(0)
        labels = rng.uniform(10, 90, 40)
        tiles = {
            "regA": make_tiles(40, "regA", label_fn=lambda i: float(labels[i])),
        }
        mean = float(labels.mean())
        m = eval_matrix({"global": self.make_model(mean)}, tiles, TINY)
        want = float(np.sqrt(((labels - mean) ** 2).mean()))
        assert m.cell("regA", "global") == pytest.approx(want, abs=1e-6)

    def test_missing_checkpoint_is_absent_cell(self):
        tiles = {"regA": make_tiles(4, "regA")}
        m = eval_matrix({"regA": None, "regB": self.make_model(50.0)}, tiles, TINY)
        assert np.isnan(m.cell("regA", "regA"))
        assert np.isfinite(m.cell("regA", "regB"))

    def test_csv_round_trip_with_absent_cells(self, tmp_path):
        m = EvalMatrix(["a", "b"], ["a", "b"], np.array([[1.5, np.nan], [2.5, 3.5]]))
        path = tmp_path / "matrix.csv"
        m.write_csv(path)
        back = read_eval_matrix_csv(path)
        assert back.finetune_regions == ["a", "b"]
        assert np.isnan(back.values[0, 1])
        assert back.values[1, 1] == 3.5


class TestCorrelation:
    def test_identical_errors_tie_flag(self):
        infer = make_embedding_set(n=12).with_errors(np.full(12, 3.0))
        ft = make_embedding_set(n=8, seed=1)
        report = distance_error_correlation(infer, ft)
        assert report.rho == 0.0 and report.tied

    def test_monotone_errors_give_rho_one(self):
        ft = make_embedding_set(n=10, d=3, seed=2)
        centroid = ft.vectors.mean(axis=0)
        infer = make_embedding_set(n=15, d=3, seed=3)
        dist = np.linalg.norm(infer.vectors - centroid, axis=1)
        report = distance_error_correlation(infer.with_errors(dist.copy()), ft)
        assert report.rho == pytest.approx(1.0)

    def test_too_few_tiles_rejected(self):
        infer = make_embedding_set(n=5).with_errors(np.ones(5))
        with pytest.raises(DataError):
            distance_error_correlation(infer, make_embedding_set(n=5, seed=1))

    def test_missing_errors_rejected(self):
        with pytest.raises(DataError):
            distance_error_correlation(make_embedding_set(n=12), make_embedding_set(n=12, seed=1))

    def test_prediction_errors_oracle(self):
        tiles = make_tiles(5, label_fn=lambda i: 50.0)
        model = FittedModel(
            init_vit_params(TINY, seed=0), DecoderParams(np.zeros(TINY.feature_dim), 80.0),
            "attention",
        )
        errs = prediction_errors(model, tiles, TINY)
        assert np.allclose(errs, 30.0)


class TestReport:
    def layout_for(self, es, seed=0):
        rng = np.random.default_rng(seed)
        return TsneLayout(rng.standard_normal((len(es), 2)), 0.5, 1.0, 30.0, 100)

    def test_svg_circle_count_equals_rows(self, tmp_path):
        es = make_embedding_set(n=23)
        spec = ScatterSpec("t", self.layout_for(es), es, "label")
        written = emit_report([spec], [], [], tmp_path)
        svg = (tmp_path / "tsne_t.svg").read_text()
        assert svg.count("<circle") == 23
        assert "tsne_t.svg" in written

    def test_empty_report_has_empty_index(self, tmp_path):
        written = emit_report([], [], [], tmp_path)
        assert written == []
        index = (tmp_path / "index.csv").read_text().strip().splitlines()
        assert index == ["file"]

    def test_emission_deterministic(self, tmp_path):
        es = make_embedding_set(n=9)
        spec = ScatterSpec("d", self.layout_for(es), es, "label")
        emit_report([spec], [], [], tmp_path / "a")
        emit_report([spec], [], [], tmp_path / "b")
        assert (tmp_path / "a" / "tsne_d.svg").read_bytes() == (
            tmp_path / "b" / "tsne_d.svg"
        ).read_bytes()

    def test_error_colored_scatter_requires_errors(self, tmp_path):
        es = make_embedding_set(n=11)
        spec = ScatterSpec("e", self.layout_for(es), es, "error")
        with pytest.raises(DataError):
            emit_report([spec], [], [], tmp_path)

    def test_csv_layout_matches_matrix(self, tmp_path):
        m = EvalMatrix(["a"], ["a", "b"], np.array([[1.0], [2.0]]))
        emit_report([], [], [("demo", m)], tmp_path)
        back = read_eval_matrix_csv(tmp_path / "eval_matrix_demo.csv")
        assert np.allclose(back.values, m.values)

    def test_colormap_shape_and_endpoints(self):
        lut = colormap_256()
        assert lut.shape == (256, 3)
        assert lut.dtype == np.uint8
        assert not np.array_equal(lut[0], lut[255])
