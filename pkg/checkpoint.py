"""Checkpoint container for model, optimizer and EMA tensors.

Layout (little-endian throughout)::

    b"PITCKPT1"
    u32 header length, UTF-8 JSON header (sorted keys, compact separators)
    repeated until EOF:
        u32 name length, UTF-8 name
        u8 rank, rank × u64 dims
        float32 payload, row-major

Writing the same checkpoint twice produces identical bytes.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from config import MAEConfig, ModelConfig
from errors import CheckpointError
from model import component_of
from optim import EMA_PREFIX, OPT_M_PREFIX, OPT_V_PREFIX

logger = logging.getLogger(__name__)

MAGIC = b"PITCKPT1"
ARCHITECTURE_FIELDS = (
    "layers",
    "dim",
    "mlp_dim",
    "heads",
    "image_size",
    "tokenizer",
    "patch_size",
    "pe",
    "use_cls",
    "qkv_bias",
)
STATE_PREFIXES = (OPT_M_PREFIX, OPT_V_PREFIX, EMA_PREFIX)


@dataclass
class Checkpoint:
    """Decoded checkpoint.

    Attributes:
        kind: ``classifier`` or ``mae``.
        model_config: ``ModelConfig`` as a JSON-ready dict.
        tensors: Named arrays in file order; optimizer and EMA state use
            the ``opt.m.`` / ``opt.v.`` / ``ema.`` prefixes.
        metadata: Training metadata (epoch, step, seed, ...).
        mae_config: ``MAEConfig`` dict for MAE checkpoints.
    """

    kind: str
    model_config: dict[str, Any]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)
    mae_config: Optional[dict[str, Any]] = None

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.model_validate(self.model_config)

    @property
    def mae(self) -> Optional[MAEConfig]:
        return None if self.mae_config is None else MAEConfig.model_validate(self.mae_config)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(STATE_PREFIXES)}

    @property
    def optimizer_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith((OPT_M_PREFIX, OPT_V_PREFIX))}

    @property
    def ema_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(EMA_PREFIX)}

    def header(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "model": self.model_config,
            "mae": self.mae_config,
            "metadata": self.metadata,
        }


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    for name, array in ckpt.tensors.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(array, dtype="<f4")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    """Parse checkpoint bytes.

    Raises:
        CheckpointError: Wrong magic, truncated section or malformed header.
    """
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{source}: truncated {what} at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (header_len,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: malformed header: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of {name}"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * count, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)

    try:
        return Checkpoint(
            kind=header["kind"],
            model_config=header["model"],
            tensors=tensors,
            metadata=header.get("metadata") or {},
            mae_config=header.get("mae"),
        )
    except KeyError as exc:
        raise CheckpointError(f"{source}: header missing {exc}") from exc


def write_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)
    logger.debug("wrote %s checkpoint %s (%d tensors)", ckpt.kind, path, len(ckpt.tensors))
    return path


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))


def check_compatible(expected: ModelConfig, ckpt: Checkpoint, fields: tuple[str, ...] = ARCHITECTURE_FIELDS) -> None:
    """Compare architecture fields of a model config and a checkpoint header.

    Raises:
        CheckpointError: Naming the first differing fields.
    """
    stored = ckpt.model_config
    wanted = expected.model_dump(mode="json")
    diffs = [f"{k}: checkpoint {stored.get(k)!r} vs model {wanted[k]!r}" for k in fields if stored.get(k) != wanted[k]]
    if diffs:
        raise CheckpointError("config mismatch: " + "; ".join(diffs))


def checkpoint_from_model(
    model: Any,
    kind: str,
    metadata: Optional[dict[str, Any]] = None,
    optimizer: Any = None,
    ema: Any = None,
) -> Checkpoint:
    """Snapshot a ``VisionTransformer`` or ``MaskedAutoencoder`` with optional state."""
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    if ema is not None:
        tensors.update(ema.state_tensors())
    mae = getattr(model, "mae", None)
    meta = dict(metadata or {})
    if optimizer is not None:
        meta.setdefault("optimizer_step", optimizer.state.step)
    return Checkpoint(
        kind=kind,
        model_config=model.cfg.model_dump(mode="json"),
        tensors=tensors,
        metadata=meta,
        mae_config=None if mae is None else mae.model_dump(mode="json"),
    )


def load_model_state(model: Any, ckpt: Checkpoint, strict: bool = True) -> list[str]:
    """Check compatibility, then copy parameters into ``model``."""
    check_compatible(model.cfg, ckpt)
    return model.load_state_dict(ckpt.params, strict=strict)


class CheckpointStore:
    """``best.ckpt`` / ``last.ckpt`` pair inside a run directory."""

    BEST = "best.ckpt"
    LAST = "last.ckpt"

    def __init__(self, run_dir: Union[str, Path]):
        """Initialize the store.

        Args:
            run_dir: Directory that receives the checkpoint files.
        """
        self.run_dir = Path(run_dir)

    @property
    def best_path(self) -> Path:
        return self.run_dir / self.BEST

    @property
    def last_path(self) -> Path:
        return self.run_dir / self.LAST

    def save_last(self, ckpt: Checkpoint) -> Path:
        return write_checkpoint(self.last_path, ckpt)

    def save_best(self, ckpt: Checkpoint) -> Path:
        return write_checkpoint(self.best_path, ckpt)

    def has_last(self) -> bool:
        return self.last_path.exists()

    def load_last(self) -> Checkpoint:
        return read_checkpoint(self.last_path)

    def load_best(self) -> Checkpoint:
        return read_checkpoint(self.best_path)


def describe_checkpoint(ckpt: Checkpoint) -> dict[str, Any]:
    """Config, per-tensor shapes and per-component parameter totals."""
    components: dict[str, int] = {}
    if ckpt.kind == "classifier":
        for name, array in ckpt.params.items():
            key = component_of(name)
            components[key] = components.get(key, 0) + int(array.size)
    return {
        "kind": ckpt.kind,
        "config": ckpt.model_config,
        "mae": ckpt.mae_config,
        "metadata": ckpt.metadata,
        "tensors": [(name, list(array.shape)) for name, array in ckpt.tensors.items()],
        "components": components,
    }
