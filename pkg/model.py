"""Pre-norm Transformer encoder with classification and masked-autoencoding heads."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional, Union

import numpy as np

from config import MAEConfig, ModelConfig, PermutationSpec
from errors import CheckpointError, ShapeError
from numerics import (
    Parameter,
    Tensor,
    broadcast_to,
    concat,
    gather,
    gelu,
    index,
    layernorm,
    linear,
    matmul,
    mean,
    mse_masked,
    mul,
    reshape,
    softmax,
    transpose,
)
from tokenization import (
    ImageTensor,
    PermutationMap,
    PositionEmbedding,
    PositionEmbeddingSpec,
    TokenSequence,
    apply_permutation,
    generate_permutation,
    patch_tokens,
    patchify,
    pixel_tokenize,
    unpatchify,
)

logger = logging.getLogger(__name__)

Images = Union[ImageTensor, np.ndarray]


class Module:
    """Parameter container with dotted names, in the spirit of ``nn.Module``."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, Any]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield f"{name}.{i}", child
            elif isinstance(value, (Module, Parameter, PositionEmbedding)):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, PositionEmbedding):
                if value.trainable:
                    yield full, value.table  # type: ignore[misc]
            else:
                yield from value.named_parameters(prefix=f"{full}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into parameters by name.

        Returns:
            Names in ``state`` that matched a parameter.

        Raises:
            CheckpointError: On shape mismatch, or missing/unexpected names when strict.
        """
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise CheckpointError(f"state mismatch: missing={missing} unexpected={unexpected}")
        loaded = []
        for name, array in state.items():
            if name not in own:
                continue
            if own[name].shape != tuple(array.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {tuple(array.shape)} vs model {own[name].shape}"
                )
            own[name].data[...] = array
            loaded.append(name)
        return loaded


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(
        self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, std: Optional[float] = None
    ):
        init = _xavier(rng, in_dim, out_dim) if std is None else rng.normal(0.0, std, size=(in_dim, out_dim))
        self.weight = Parameter(init)
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head scaled dot-product self-attention, scale 1/√(d/heads)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, qkv_bias: bool = True):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = Linear(dim, 3 * dim, rng, bias=qkv_bias)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        b, n, d = x.shape
        qkv = transpose(reshape(self.qkv(x), (b, n, 3, self.heads, self.head_dim)), (2, 0, 3, 1, 4))
        q, k, v = index(qkv, 0), index(qkv, 1), index(qkv, 2)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), self.scale)
        weights = softmax(scores, axis=-1)
        out = transpose(matmul(weights, v), (0, 2, 1, 3))
        return self.proj(reshape(out, (b, n, d))), weights


def drop_path(
    x: Tensor,
    rate: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Stochastic depth: zero whole samples of a residual branch.

    Survivors are scaled by 1/(1 − rate); outside training, or at rate 0,
    the input is returned unchanged.
    """
    if rate == 0.0 or not training:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.data.dtype) / keep
    return mul(x, mask)


class Block(Module):
    """Ẑ = Attn(norm(Z)) + Z;  Z' = MLP(norm(Ẑ)) + Ẑ."""

    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_dim: int,
        rng: np.random.Generator,
        drop_path_rate: float = 0.0,
        qkv_bias: bool = True,
        eps: float = 1e-6,
    ):
        self.norm1 = LayerNorm(dim, eps)
        self.attn = Attention(dim, heads, rng, qkv_bias)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = MLP(dim, mlp_dim, rng)
        self.drop_path_rate = drop_path_rate

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
        attended, weights = self.attn(self.norm1(x))
        x = x + drop_path(attended, self.drop_path_rate, self.training, rng)
        x = x + drop_path(self.mlp(self.norm2(x)), self.drop_path_rate, self.training, rng)
        return x, weights


@dataclass
class AttentionRecord:
    """Post-softmax attention of one layer.

    Attributes:
        layer: Layer index, 0-based.
        weights: (B, heads, L', L') rows sum to 1; L' includes cls when present.
        query_coords: (L, 2) grid coordinates of non-cls queries.
        key_coords: (L, 2) grid coordinates of non-cls keys.
        has_cls: Whether index 0 of both token axes is the cls token.
        image_size: Side length of the square input, in pixels.
    """

    layer: int
    weights: np.ndarray
    query_coords: np.ndarray
    key_coords: np.ndarray
    has_cls: bool
    image_size: int

    @property
    def num_heads(self) -> int:
        return int(self.weights.shape[1])

    def head(self, h: int) -> np.ndarray:
        """(B, L', L') weights of one head."""
        return self.weights[:, h]


class Encoder(Module):
    """Stack of pre-norm blocks followed by a final norm."""

    def __init__(
        self,
        layers: int,
        dim: int,
        heads: int,
        mlp_dim: int,
        rng: np.random.Generator,
        drop_path_rate: float = 0.0,
        qkv_bias: bool = True,
        eps: float = 1e-6,
    ):
        rates = np.linspace(0.0, drop_path_rate, layers) if layers else []
        self.blocks = [Block(dim, heads, mlp_dim, rng, float(r), qkv_bias, eps) for r in rates]
        self.norm = LayerNorm(dim, eps)

    def __call__(
        self, x: Tensor, rng: Optional[np.random.Generator] = None, record: bool = False
    ) -> tuple[Tensor, list[np.ndarray]]:
        weights = []
        for block in self.blocks:
            x, w = block(x, rng)
            if record:
                weights.append(np.array(w.data))
        return self.norm(x), weights


def _build_permutation(spec: Optional[PermutationSpec], image_size: int) -> Optional[PermutationMap]:
    if spec is None:
        return None
    if spec.path:
        perm = PermutationMap.load(spec.path)
        if (perm.height, perm.width) != (image_size, image_size):
            raise ShapeError(f"permutation {spec.path} is {perm.height}×{perm.width}, images are {image_size}")
        return perm
    return generate_permutation(image_size, image_size, spec.swaps, spec.delta, spec.seed)


class VisionTransformer(Module):
    """Pixel-, patch- or permuted-patch-token Transformer.

    Parameter names: ``patch_embed``, ``cls_token``, ``pos_embed``,
    ``encoder.blocks.{i}``, ``encoder.norm``, ``head``.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        rng: Optional[np.random.Generator] = None,
        with_head: bool = True,
        permutation: Optional[PermutationMap] = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.patch_embed = Linear(cfg.token_dim, cfg.dim, rng)
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=cfg.dim)) if cfg.use_cls else None
        self.pos_embed = PositionEmbedding(
            PositionEmbeddingSpec(cfg.pe, cfg.dim, (cfg.grid_side, cfg.grid_side), cfg.use_cls), rng
        )
        self.encoder = Encoder(
            cfg.layers, cfg.dim, cfg.heads, cfg.mlp_dim, rng, cfg.drop_path_rate, cfg.qkv_bias, cfg.ln_eps
        )
        self.head = Linear(cfg.dim, cfg.num_classes, rng, std=0.02) if with_head else None
        if cfg.tokenizer == "permuted-patch":
            self._permutation = permutation or _build_permutation(cfg.permutation, cfg.image_size)
        else:
            self._permutation = None
        self._rng = np.random.default_rng(0)
        logger.debug("built %s encoder, %d parameters", cfg.tokenizer, self.num_parameters())

    @property
    def permutation(self) -> Optional[PermutationMap]:
        return self._permutation

    def set_rng(self, rng: np.random.Generator) -> None:
        """Generator for drop path during training."""
        self._rng = rng

    def prepare(self, images: Images) -> np.ndarray:
        """Apply the shared permutation (permuted-patch mode only)."""
        values = images.values if isinstance(images, ImageTensor) else np.asarray(images)
        if values.ndim == 3:
            values = values[None]
        if values.shape[1:3] != (self.cfg.image_size, self.cfg.image_size):
            raise ShapeError(f"model expects {self.cfg.image_size}² images, got {values.shape[1:3]}")
        if self._permutation is not None:
            values = apply_permutation(values, self._permutation)
        return values

    def raw_tokens(self, images: Images) -> np.ndarray:
        return patch_tokens(self.prepare(images), self.cfg.effective_patch)

    def tokenize(self, images: Images) -> TokenSequence:
        values = self.prepare(images)
        if self.cfg.tokenizer == "pixel":
            return pixel_tokenize(values, self.patch_embed, self.pos_embed, self.cls_token)
        return patchify(values, self.cfg.patch_size, self.patch_embed, self.pos_embed, self.cls_token)

    def encode(self, x: Tensor, record: bool = False) -> tuple[Tensor, list[np.ndarray]]:
        return self.encoder(x, self._rng, record)


def forward_encoder(
    seq: TokenSequence, model: VisionTransformer, record_attention: bool = False
) -> tuple[TokenSequence, list[AttentionRecord]]:
    """Run N pre-norm blocks and the final norm over a token sequence.

    Raises:
        ShapeError: If the token dim differs from the model width.
    """
    if seq.tokens.shape[-1] != model.cfg.dim:
        raise ShapeError(f"token dim {seq.tokens.shape[-1]} != model dim {model.cfg.dim}")
    out, weights = model.encode(seq.tokens, record_attention)
    records = [
        AttentionRecord(i, w, seq.coords, seq.coords, seq.has_cls, model.cfg.image_size)
        for i, w in enumerate(weights)
    ]
    return seq.with_tokens(out), records


def pool(seq: TokenSequence, head: str) -> Tensor:
    """GAP over non-cls tokens, or the cls output token."""
    start = 1 if seq.has_cls else 0
    if head == "cls":
        if not seq.has_cls:
            raise ShapeError("cls head needs a cls token")
        return index(seq.tokens, (slice(None), 0))
    return mean(index(seq.tokens, (slice(None), slice(start, None))), axis=1)


def forward_classifier(
    images: Images, model: VisionTransformer, record_attention: bool = False
) -> Union[Tensor, tuple[Tensor, list[AttentionRecord]]]:
    """Logits (B, C) for a batch of normalized images."""
    if model.head is None:
        raise ShapeError("model was built without a classification head")
    seq, records = forward_encoder(model.tokenize(images), model, record_attention)
    logits = model.head(pool(seq, model.cfg.head))
    return (logits, records) if record_attention else logits


# ---------------------------------------------------------------------------
# Masked autoencoding
# ---------------------------------------------------------------------------


def num_masked(length: int, ratio: float) -> int:
    """Masked token count: L − ⌈(1 − ratio)·L⌉, kept within [1, L − 1]."""
    if length < 2:
        raise ShapeError("masking needs at least two tokens")
    visible = int(np.ceil((1.0 - ratio) * length - 1e-9))
    return int(min(max(length - visible, 1), length - 1))


def encoder_sequence_length(length: int, mae: MAEConfig, with_cls: bool = True) -> int:
    return length - num_masked(length, mae.mask_ratio) + int(with_cls)


def mae_mask(
    length: int, mae: MAEConfig, rng: Optional[np.random.Generator] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly random (visible, masked) split of ``range(length)``, both sorted."""
    rng = rng if rng is not None else np.random.default_rng(mae.seed)
    order = rng.permutation(length)
    masked_count = num_masked(length, mae.mask_ratio)
    visible = np.sort(order[: length - masked_count])
    masked = np.sort(order[length - masked_count :])
    return visible, masked


@dataclass
class MAEOutput:
    """Loss and reconstruction of one masked-autoencoding pass.

    Attributes:
        loss: Scalar masked-pixel MSE.
        pred: (B, L, token_dim) predicted tokens.
        target: (B, L, token_dim) normalized pixel targets.
        mask: (B, L) true where the token was hidden from the encoder.
        reconstruction: (B, H, W, 3) prediction in (permuted) pixel space.
        encoder_length: Sequence length seen by the encoder, cls included.
    """

    loss: Tensor
    pred: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    reconstruction: np.ndarray
    encoder_length: int = 0


class MaskedAutoencoder(Module):
    """Encoder on visible tokens, light decoder over the full sequence."""

    def __init__(self, cfg: ModelConfig, mae: MAEConfig, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.mae = mae
        self.encoder = VisionTransformer(cfg, rng, with_head=False)
        dd = mae.decoder_dim
        self.decoder_embed = Linear(cfg.dim, dd, rng)
        self.mask_token = Parameter(rng.normal(0.0, 0.02, size=dd))
        self.decoder_pos_embed = PositionEmbedding(
            PositionEmbeddingSpec("learned", dd, (cfg.grid_side, cfg.grid_side), cfg.use_cls), rng
        )
        self.decoder = Encoder(mae.decoder_layers, dd, mae.decoder_heads, 4 * dd, rng, 0.0, cfg.qkv_bias, cfg.ln_eps)
        self.decoder_pred = Linear(dd, cfg.token_dim, rng)

    def set_rng(self, rng: np.random.Generator) -> None:
        self.encoder.set_rng(rng)

    def encoder_state(self) -> dict[str, np.ndarray]:
        return self.encoder.state_dict()


def forward_mae(
    images: Images, model: MaskedAutoencoder, rng: Optional[np.random.Generator] = None
) -> MAEOutput:
    """Mask, encode visible tokens, decode all tokens, score masked pixels."""
    rng = rng if rng is not None else np.random.default_rng(model.mae.seed)
    cfg = model.cfg
    seq = model.encoder.tokenize(images)
    batch, length = seq.tokens.shape[0], seq.length
    start = 1 if seq.has_cls else 0

    splits = [mae_mask(length, model.mae, rng) for _ in range(batch)]
    keep = np.stack([v for v, _ in splits])
    hidden = np.stack([m for _, m in splits])
    restore = np.argsort(np.concatenate([keep, hidden], axis=1), axis=1)
    mask = np.zeros((batch, length), dtype=bool)
    np.put_along_axis(mask, hidden, True, axis=1)

    tokens = index(seq.tokens, (slice(None), slice(start, None)))
    x = gather(tokens, keep)
    if seq.has_cls:
        x = concat([index(seq.tokens, (slice(None), slice(0, 1))), x], axis=1)
    encoder_length = x.shape[1]
    latent, _ = model.encoder.encode(x)

    y = model.decoder_embed(latent)
    visible = index(y, (slice(None), slice(start, None)))
    dd = model.mae.decoder_dim
    fill = broadcast_to(reshape(model.mask_token, (1, 1, dd)), (batch, hidden.shape[1], dd))
    full = gather(concat([visible, fill], axis=1), restore)
    if seq.has_cls:
        full = concat([index(y, (slice(None), slice(0, 1))), full], axis=1)
    decoded, _ = model.decoder(model.decoder_pos_embed(full))
    pred = index(model.decoder_pred(decoded), (slice(None), slice(start, None)))

    target = model.encoder.raw_tokens(images).astype(pred.data.dtype)
    loss = mse_masked(pred, target, mask)
    recon = unpatchify(pred.data, cfg.image_size, cfg.image_size, cfg.effective_patch)
    return MAEOutput(loss, np.array(pred.data), target, mask, recon, encoder_length)


# ---------------------------------------------------------------------------
# Parameter counting
# ---------------------------------------------------------------------------


@dataclass
class ParamCount:
    """Exact parameter counts by component.

    ``table_total`` follows the size-variant table convention: everything
    except position embeddings (PE size depends on resolution).
    """

    breakdown: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.breakdown.values())

    @property
    def table_total(self) -> int:
        return self.total - self.breakdown["pe"]

    @property
    def total_without_head(self) -> int:
        return self.table_total - self.breakdown["head"]


def param_count(cfg: ModelConfig, with_head: bool = True) -> ParamCount:
    """Count parameters from the config alone."""
    d, m = cfg.dim, cfg.mlp_dim
    qkv = d * 3 * d + (3 * d if cfg.qkv_bias else 0)
    per_block = 2 * (2 * d) + qkv + (d * d + d) + (d * m + m) + (m * d + d)
    rows = cfg.num_tokens + int(cfg.use_cls)
    return ParamCount(
        breakdown={
            "embedding": cfg.token_dim * d + d + (d if cfg.use_cls else 0),
            "pe": rows * d if cfg.pe == "learned" else 0,
            "blocks": cfg.layers * per_block + 2 * d,
            "head": (d * cfg.num_classes + cfg.num_classes) if with_head else 0,
        }
    )


def component_of(name: str) -> str:
    """Which ``param_count`` component a classifier parameter belongs to."""
    root = name.split(".", 1)[0]
    if root in ("patch_embed", "cls_token"):
        return "embedding"
    if root == "pos_embed":
        return "pe"
    if root == "head":
        return "head"
    return "blocks"


_EMBEDDING_ROOTS = ("patch_embed", "cls_token", "pos_embed")


def layer_id_for(name: str, num_layers: int) -> int:
    """Depth index for layer-wise lr decay.

    Embeddings map to 0, ``encoder.blocks.{i}`` to i + 1, everything else
    (final norm, head, MAE decoder) to N + 1. Names from a
    ``MaskedAutoencoder`` carry one extra ``encoder.`` prefix.
    """
    parts = name.split(".")
    if parts[0] == "encoder" and len(parts) > 1 and parts[1] in _EMBEDDING_ROOTS + ("encoder", "head"):
        parts = parts[1:]
    if parts[0] in _EMBEDDING_ROOTS:
        return 0
    if parts[0] == "encoder" and len(parts) > 2 and parts[1] == "blocks":
        return int(parts[2]) + 1
    return num_layers + 1


def build_model(cfg: ModelConfig, seed: int = 0, with_head: bool = True) -> VisionTransformer:
    return VisionTransformer(cfg, np.random.default_rng(seed), with_head=with_head)
