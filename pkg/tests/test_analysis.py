"""
Unit tests for attention-locality analysis.

Tests cover:
- Mean attention distance and offset on closed-form attention patterns
- Brute-force agreement on 8×8 and 16×16 grids
- Layer bands
- Query attention maps from a checkpoint
- CSV/SVG export and the full analyze pass
"""

import csv

import numpy as np
import pytest

from analysis import (
    AttentionStats,
    analyze,
    attention_map_for_query,
    attention_stats,
    band_means,
    cls_mass,
    collect_attention,
    export_figure_data,
    grid_attention,
    layer_bands,
    mean_attention_distance,
    mean_attention_offset,
    model_from_checkpoint,
    table_series,
)
from checkpoint import checkpoint_from_model, write_checkpoint
from config import MAEConfig
from errors import QueryOutOfRangeError, ShapeError
from experiments import PEAblationRow
from model import AttentionRecord, MaskedAutoencoder, build_model
from tokenization import token_coords


def _record(weights: np.ndarray, side: int, has_cls: bool = False, scale: float = 1.0, layer: int = 0):
    coords = token_coords(side, side, 1) * scale
    return AttentionRecord(layer, weights, coords, coords, has_cls, int(side * scale))


def _uniform(side: int, heads: int = 1, has_cls: bool = False) -> np.ndarray:
    n = side * side + int(has_cls)
    return np.full((1, heads, n, n), 1.0 / n)


@pytest.mark.unit
@pytest.mark.analysis
class TestMetrics:
    """Distance and offset on known patterns."""

    def test_uniform_two_by_two(self):
        record = _record(_uniform(2), 2)
        assert mean_attention_distance(record)[0] == pytest.approx(0.42678, abs=1e-5)
        assert mean_attention_offset(record)[0] == pytest.approx(0.35355, abs=1e-5)

    def test_cls_is_dropped_and_rows_renormalized(self):
        record = _record(_uniform(2, has_cls=True), 2, has_cls=True)
        np.testing.assert_allclose(grid_attention(record, 0), 0.25)
        np.testing.assert_allclose(cls_mass(record, 0), 0.2)
        assert mean_attention_distance(record)[0] == pytest.approx(0.42678, abs=1e-5)

    def test_no_cls_mass_without_cls(self):
        np.testing.assert_array_equal(cls_mass(_record(_uniform(2), 2), 0), np.zeros((1, 4)))

    def test_self_attention_is_zero(self):
        weights = np.eye(9)[None, None]
        record = _record(weights, 3)
        assert mean_attention_distance(record)[0] == 0.0
        assert mean_attention_offset(record)[0] == 0.0

    def test_scale_invariance(self):
        weights = np.random.default_rng(0).dirichlet(np.ones(9), size=(1, 2, 9))
        small = _record(weights, 3)
        large = _record(weights, 3, scale=2.0)
        np.testing.assert_allclose(mean_attention_distance(small), mean_attention_distance(large))
        np.testing.assert_allclose(mean_attention_offset(small), mean_attention_offset(large))

    @pytest.mark.parametrize("side,batch,heads", [(8, 2, 3), (16, 1, 1)])
    def test_matches_brute_force(self, side, batch, heads):
        weights = np.random.default_rng(4).dirichlet(np.ones(side * side), size=(batch, heads, side * side))
        record = _record(weights, side)
        coords = token_coords(side, side, 1)
        for h in range(heads):
            dist_total, offset_total = 0.0, 0.0
            for b in range(batch):
                for q in range(side * side):
                    centre = np.zeros(2)
                    for k in range(side * side):
                        a = weights[b, h, q, k]
                        dist_total += a * np.hypot(*(coords[q] - coords[k]))
                        centre += a * coords[k]
                    offset_total += np.hypot(*(centre - coords[q]))
            count = batch * side * side
            assert mean_attention_distance(record)[h] == pytest.approx(dist_total / count / side, rel=1e-9)
            assert mean_attention_offset(record)[h] == pytest.approx(offset_total / count / side, rel=1e-9)

    def test_stats_sort_heads_within_layer(self):
        local = np.eye(4)[None]
        weights = np.concatenate([_uniform(2), local[None]], axis=1)
        stats = attention_stats([_record(weights, 2, layer=1), _record(_uniform(2, heads=2), 2, layer=0)])
        assert stats.num_layers == 2
        assert stats.values[1, 0] == 0.0
        assert stats.values[1, 1] == pytest.approx(0.42678, abs=1e-5)
        assert stats.rows()[0] == (0, 0, "distance", pytest.approx(0.42678, abs=1e-5))

    def test_no_records(self):
        with pytest.raises(ValueError):
            attention_stats([])


@pytest.mark.unit
@pytest.mark.analysis
class TestBands:
    """Early, middle and late layer groups."""

    def test_twelve_layers(self):
        assert layer_bands(12) == {
            "early": [0, 1, 2, 3],
            "middle": [4, 5, 6, 7],
            "late": [8, 9, 10, 11],
        }

    def test_small_depths(self):
        assert layer_bands(4) == {"early": [0], "middle": [1], "late": [3]}
        assert layer_bands(1) == {"early": [0], "middle": [0], "late": [0]}

    def test_band_means(self):
        stats = AttentionStats("distance", np.array([[0.1, 0.3], [0.5, 0.5], [0.8, 1.0]]))
        means = band_means(stats)
        assert means["early"] == pytest.approx(0.2)
        assert means["middle"] == pytest.approx(0.5)
        assert means["late"] == pytest.approx(0.9)

    def test_zero_layers_rejected(self):
        with pytest.raises(ValueError):
            layer_bands(0)


@pytest.mark.unit
@pytest.mark.analysis
class TestQueryMaps:
    """Per-query heat maps from models and checkpoints."""

    def test_map_and_cls_sum_to_one(self, tiny_model_config, rng, tmp_path):
        model = build_model(tiny_model_config, seed=2)
        path = write_checkpoint(tmp_path / "m.ckpt", checkpoint_from_model(model, "classifier"))
        images = rng.normal(size=(3, 4, 4, 3)).astype(np.float32)
        qmap = attention_map_for_query(path, images, layer=1, query=(1, 2))
        assert qmap.maps.shape == (2, 4, 4)
        np.testing.assert_allclose(qmap.maps.sum(axis=(1, 2)) + qmap.cls_mass, 1.0, atol=1e-5)

    def test_default_query_is_centre(self, tiny_model_config, rng):
        model = build_model(tiny_model_config)
        qmap = attention_map_for_query(model, rng.normal(size=(1, 4, 4, 3)), layer=0)
        assert qmap.query == (2, 2)

    @pytest.mark.parametrize("layer,query", [(0, (4, 0)), (0, (-1, 1)), (2, (0, 0))])
    def test_out_of_range(self, tiny_model_config, rng, layer, query):
        model = build_model(tiny_model_config)
        with pytest.raises(QueryOutOfRangeError):
            attention_map_for_query(model, rng.normal(size=(1, 4, 4, 3)), layer=layer, query=query)

    def test_mae_checkpoint_yields_encoder(self, tiny_model_config, rng):
        mae = MaskedAutoencoder(tiny_model_config, MAEConfig(decoder_layers=1, decoder_dim=8, decoder_heads=2), rng)
        model = model_from_checkpoint(checkpoint_from_model(mae, "mae"))
        assert model.head is None
        np.testing.assert_array_equal(model.patch_embed.weight.data, mae.encoder.patch_embed.weight.data)
        records = collect_attention(model, rng.normal(size=(2, 4, 4, 3)))
        assert len(records) == tiny_model_config.layers


@pytest.mark.unit
@pytest.mark.analysis
class TestExport:
    """CSV and SVG output."""

    def test_csv_and_svg(self, tmp_path):
        series = {"learned": ([0, 1, 2], [0.1, 0.2, 0.3]), "none": ([0, 1, 2], [0.5, 0.5, 0.5])}
        csv_path, svg_path = export_figure_data(series, tmp_path / "fig", "layer", "distance", title="t")
        with open(csv_path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["series", "x", "y"]
        assert len(rows) == 7
        assert rows[1] == ["learned", "0.0", "0.1"]
        svg = svg_path.read_text()
        assert 'id="series-learned"' in svg
        assert 'id="series-none"' in svg

    def test_svg_is_reproducible(self, tmp_path):
        series = {"a": ([1, 2], [3, 4])}
        _, first = export_figure_data(series, tmp_path / "one", "x", "y")
        _, second = export_figure_data(series, tmp_path / "two", "x", "y")
        assert first.read_bytes() == second.read_bytes()

    def test_length_mismatch(self, tmp_path):
        with pytest.raises(ShapeError):
            export_figure_data({"a": ([1, 2], [3])}, tmp_path / "bad", "x", "y")

    def test_table_series_groups_rows(self):
        rows = [PEAblationRow("learned", 0.5, 0.9, 1.2), PEAblationRow("none", 0.4, 0.8, 1.4)]
        series = table_series(rows, "acc1", "loss", group="pe")
        assert series == {"learned": ([0.5], [1.2]), "none": ([0.4], [1.4])}


@pytest.mark.integration
@pytest.mark.analysis
class TestAnalyze:
    """End-to-end analysis of a checkpoint."""

    def test_writes_outputs(self, tiny_model_config, rng, tmp_path):
        model = build_model(tiny_model_config, seed=1)
        path = write_checkpoint(tmp_path / "best.ckpt", checkpoint_from_model(model, "classifier"))
        result = analyze(path, rng.normal(size=(2, 4, 4, 3)).astype(np.float32), tmp_path / "analysis")
        out = tmp_path / "analysis"
        with open(out / "attention_stats.csv", newline="") as f:
            assert len(list(csv.reader(f))) == 1 + 2 * 2 * 2
        for metric in ("distance", "offset"):
            assert (out / f"attention_{metric}.csv").exists()
            assert "series-head0" in (out / f"attention_{metric}.svg").read_text()
        assert (out / "query_map.csv").exists()
        assert result["layer"] == 1
        assert set(result["bands"]) == {"distance", "offset"}
        assert set(result["bands"]["distance"]) == {"early", "middle", "late"}
