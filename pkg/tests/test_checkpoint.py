"""
Unit tests for the checkpoint container.

Tests cover:
- Deterministic encoding and file round trips
- Corrupt input (bad magic, truncation, malformed header)
- Architecture compatibility checks
- Optimizer/EMA state partitioning and the best/last store
- Component summaries for inspection
"""

import numpy as np
import pytest

from checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointStore,
    check_compatible,
    checkpoint_from_model,
    decode_checkpoint,
    describe_checkpoint,
    encode_checkpoint,
    load_model_state,
    read_checkpoint,
    write_checkpoint,
)
from config import MAEConfig, OptimizerConfig
from errors import CheckpointError
from model import MaskedAutoencoder, build_model, param_count
from optim import AdamW, EMAState


@pytest.fixture
def classifier_checkpoint(tiny_model_config):
    model = build_model(tiny_model_config, seed=5)
    return checkpoint_from_model(model, "classifier", metadata={"epoch": 3, "seed": 5})


@pytest.mark.unit
@pytest.mark.checkpoint
class TestEncoding:
    """Binary layout and file IO."""

    def test_starts_with_magic(self, classifier_checkpoint):
        assert encode_checkpoint(classifier_checkpoint).startswith(MAGIC)

    def test_write_read_write_is_byte_identical(self, tmp_path, classifier_checkpoint):
        first = write_checkpoint(tmp_path / "a.ckpt", classifier_checkpoint)
        second = write_checkpoint(tmp_path / "b.ckpt", read_checkpoint(first))
        assert first.read_bytes() == second.read_bytes()

    def test_round_trip_values(self, classifier_checkpoint):
        decoded = decode_checkpoint(encode_checkpoint(classifier_checkpoint))
        assert decoded.kind == "classifier"
        assert decoded.metadata == {"epoch": 3, "seed": 5}
        assert list(decoded.tensors) == list(classifier_checkpoint.tensors)
        for name, array in classifier_checkpoint.tensors.items():
            np.testing.assert_array_equal(decoded.tensors[name], array)
            assert decoded.tensors[name].dtype == np.float32

    def test_scalar_tensor(self):
        ckpt = Checkpoint("classifier", {}, tensors={"s": np.array(2.5, dtype=np.float32)})
        assert decode_checkpoint(encode_checkpoint(ckpt)).tensors["s"].shape == ()

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="bad magic"):
            decode_checkpoint(b"NOTACKPT" + b"\x00" * 8)

    @pytest.mark.parametrize("keep", [10, 30])
    def test_truncated_header(self, classifier_checkpoint, keep):
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(encode_checkpoint(classifier_checkpoint)[:keep])

    @pytest.mark.parametrize("cut", [1, 3, 12])
    def test_truncated_payload(self, classifier_checkpoint, cut):
        blob = encode_checkpoint(classifier_checkpoint)
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(blob[: len(blob) - cut])

    def test_malformed_header(self):
        header = b"{not json"
        blob = MAGIC + len(header).to_bytes(4, "little") + header
        with pytest.raises(CheckpointError, match="malformed header"):
            decode_checkpoint(blob)

    def test_header_missing_kind(self):
        header = b'{"model":{}}'
        with pytest.raises(CheckpointError, match="missing"):
            decode_checkpoint(MAGIC + len(header).to_bytes(4, "little") + header)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            read_checkpoint(tmp_path / "absent.ckpt")


@pytest.mark.unit
@pytest.mark.checkpoint
class TestCompatibility:
    """Loading into models."""

    def test_loads_into_fresh_model(self, tiny_model_config, classifier_checkpoint):
        model = build_model(tiny_model_config, seed=99)
        loaded = load_model_state(model, classifier_checkpoint)
        assert len(loaded) == len(model.parameters())
        for name, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, classifier_checkpoint.tensors[name])

    def test_architecture_mismatch_names_field(self, tiny_model_config, classifier_checkpoint):
        other = tiny_model_config.model_copy(update={"pe": "sincos"})
        with pytest.raises(CheckpointError, match="config mismatch: pe"):
            check_compatible(other, classifier_checkpoint)

    def test_head_size_not_an_architecture_field(self, tiny_model_config, classifier_checkpoint):
        check_compatible(tiny_model_config.model_copy(update={"num_classes": 10}), classifier_checkpoint)

    def test_config_property(self, tiny_model_config, classifier_checkpoint):
        assert classifier_checkpoint.config == tiny_model_config


@pytest.mark.unit
@pytest.mark.checkpoint
class TestState:
    """Optimizer, EMA and MAE checkpoints."""

    def test_state_partitions(self, tiny_model_config, rng):
        model = build_model(tiny_model_config)
        opt = AdamW(model.named_parameters(), OptimizerConfig(), tiny_model_config.layers)
        for p in model.parameters():
            p.grad = rng.normal(size=p.shape).astype(np.float32)
        opt.step(1e-3)
        ema = EMAState.from_params(model.named_parameters(), decay=0.9)
        ckpt = checkpoint_from_model(model, "classifier", optimizer=opt, ema=ema)
        n = len(model.parameters())
        assert len(ckpt.params) == n
        assert len(ckpt.optimizer_tensors) == 2 * n
        assert len(ckpt.ema_tensors) == n
        assert ckpt.metadata["optimizer_step"] == 1

    def test_mae_checkpoint_carries_mae_config(self, tiny_model_config, rng):
        mae = MAEConfig(decoder_layers=1, decoder_dim=8, decoder_heads=2)
        model = MaskedAutoencoder(tiny_model_config, mae, rng)
        ckpt = decode_checkpoint(encode_checkpoint(checkpoint_from_model(model, "mae")))
        assert ckpt.kind == "mae"
        assert ckpt.mae == mae
        assert any(name.startswith("decoder.") for name in ckpt.params)

    def test_store_best_and_last(self, tmp_path, classifier_checkpoint):
        store = CheckpointStore(tmp_path / "run")
        assert not store.has_last()
        store.save_last(classifier_checkpoint)
        store.save_best(classifier_checkpoint)
        assert store.has_last()
        assert store.best_path.name == "best.ckpt"
        assert store.load_last().metadata["epoch"] == 3
        assert not list((tmp_path / "run").glob("*.tmp"))


@pytest.mark.unit
@pytest.mark.checkpoint
class TestDescribe:
    """Inspection summaries."""

    def test_components_match_param_count(self, tiny_model_config, classifier_checkpoint):
        summary = describe_checkpoint(classifier_checkpoint)
        assert summary["components"] == param_count(tiny_model_config).breakdown
        assert ("head.bias", [4]) in summary["tensors"]

    def test_mae_has_no_components(self, tiny_model_config, rng):
        mae = MAEConfig(decoder_layers=1, decoder_dim=8, decoder_heads=2)
        summary = describe_checkpoint(checkpoint_from_model(MaskedAutoencoder(tiny_model_config, mae, rng), "mae"))
        assert summary["components"] == {}
        assert summary["mae"]["decoder_dim"] == 8
