"""Image → token sequence under pixel, patch, and permuted-patch regimes.

Also owns position embeddings (learned, 2D sin-cos, none) and the shared
pixel permutations used to corrupt locality before patchification.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Literal, Optional, Union

import numpy as np

from errors import PermutationError, ShapeError
from numerics import Parameter, Tensor, add, broadcast_to, concat, reshape

logger = logging.getLogger(__name__)

PEMode = Literal["learned", "sincos", "none"]
PERM_MAGIC = "PERM"
PERM_VERSION = "v1"


@dataclass(frozen=True)
class Normalization:
    """Per-channel statistics applied after scaling bytes to [0, 1]."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]


CIFAR100_NORMALIZATION = Normalization(
    mean=(0.5071, 0.4865, 0.4409),
    std=(0.2673, 0.2564, 0.2762),
)


def normalize(raw: np.ndarray, norm: Normalization) -> np.ndarray:
    """Scale uint8 pixels (..., H, W, 3) to [0, 1] and standardize per channel."""
    mean = np.asarray(norm.mean, dtype=np.float32)
    std = np.asarray(norm.std, dtype=np.float32)
    return ((np.asarray(raw, dtype=np.float32) / 255.0 - mean) / std).astype(np.float32)


def denormalize(values: np.ndarray, norm: Normalization) -> np.ndarray:
    """Invert ``normalize`` back to uint8 pixels."""
    mean = np.asarray(norm.mean, dtype=np.float64)
    std = np.asarray(norm.std, dtype=np.float64)
    scaled = (np.asarray(values, dtype=np.float64) * std + mean) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


@dataclass
class ImageTensor:
    """H×W×3 image, raw bytes or normalized floats.

    Attributes:
        values: (H, W, 3) array; uint8 when raw.
        normalization: Statistics used to produce ``values``; ``None`` for raw.
    """

    values: np.ndarray
    normalization: Optional[Normalization] = None

    def __post_init__(self) -> None:
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ShapeError(f"image must be H×W×3, got {self.values.shape}")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ShapeError("image must be at least 1×1")
        if self.normalization is None and self.values.dtype != np.uint8:
            raise ShapeError("raw images must be uint8 in [0, 255]")

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def is_normalized(self) -> bool:
        return self.normalization is not None

    def normalized(self, norm: Normalization = CIFAR100_NORMALIZATION) -> "ImageTensor":
        if self.is_normalized:
            return self
        return ImageTensor(normalize(self.values, norm), norm)

    def raw(self) -> "ImageTensor":
        if self.normalization is None:
            return self
        return ImageTensor(denormalize(self.values, self.normalization))


@dataclass
class TokenSequence:
    """Projected tokens plus the grid coordinates of their source pixels.

    Attributes:
        tokens: (B, L(+1), D) activations; cls, when present, is row 0.
        coords: (L, 2) (row, col) source centres in pixels, cls excluded.
        grid: Token grid shape (rows, cols).
        has_cls: Whether row 0 of ``tokens`` is the cls token.
    """

    tokens: Tensor
    coords: np.ndarray
    grid: tuple[int, int]
    has_cls: bool

    @property
    def length(self) -> int:
        """Number of grid tokens (cls excluded)."""
        return int(self.coords.shape[0])

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.coords, self.grid, self.has_cls)


def _as_batch(images: Union[ImageTensor, np.ndarray]) -> np.ndarray:
    values = images.values if isinstance(images, ImageTensor) else np.asarray(images)
    if values.ndim == 3:
        values = values[None]
    if values.ndim != 4 or values.shape[-1] != 3:
        raise ShapeError(f"expected (B,) H×W×3 images, got {values.shape}")
    return values


def token_coords(height: int, width: int, patch_size: int = 1) -> np.ndarray:
    """Centres of the (H/p)×(W/p) token grid in pixel units, raster order."""
    rows, cols = height // patch_size, width // patch_size
    offset = (patch_size - 1) / 2.0
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([r * patch_size + offset, c * patch_size + offset], axis=-1).reshape(-1, 2).astype(
        np.float64
    )


def pixel_tokens(images: Union[ImageTensor, np.ndarray]) -> np.ndarray:
    """Raw pixel tokens (B, H·W, 3) in raster order."""
    values = _as_batch(images)
    b, h, w, ch = values.shape
    return values.reshape(b, h * w, ch)


def patch_tokens(images: Union[ImageTensor, np.ndarray], patch_size: int) -> np.ndarray:
    """Raw patch tokens (B, (H/p)(W/p), p·p·3).

    Patches are read in raster order; inside a patch, pixels are raster
    ordered with channels interleaved last.

    Raises:
        ShapeError: If ``patch_size`` does not divide H and W.
    """
    values = _as_batch(images)
    b, h, w, ch = values.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide image {h}×{w}")
    grid = values.reshape(b, h // p, p, w // p, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return grid.reshape(b, (h // p) * (w // p), p * p * ch)


def unpatchify(tokens: np.ndarray, height: int, width: int, patch_size: int) -> np.ndarray:
    """Inverse of ``patch_tokens``: (B, L, p·p·3) → (B, H, W, 3)."""
    p = patch_size
    b = tokens.shape[0]
    grid = tokens.reshape(b, height // p, width // p, p, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return grid.reshape(b, height, width, 3)


# ---------------------------------------------------------------------------
# Position embeddings
# ---------------------------------------------------------------------------


def sincos1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """1D sin/cos table: first half sines, second half cosines, base 10000."""
    if dim % 2:
        raise ShapeError(f"1D sin-cos embedding needs an even dim, got {dim}")
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    angles = np.outer(np.asarray(positions, dtype=np.float64).reshape(-1), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos2d(grid_height: int, grid_width: int, dim: int) -> np.ndarray:
    """2D sin-cos table of shape (H'·W', d): row half first, column half second.

    Raises:
        ShapeError: If ``dim`` is not divisible by 4.
    """
    if dim % 4:
        raise ShapeError(f"2D sin-cos embedding needs dim divisible by 4, got {dim}")
    rows, cols = np.meshgrid(np.arange(grid_height), np.arange(grid_width), indexing="ij")
    return np.concatenate(
        [sincos1d(rows.reshape(-1), dim // 2), sincos1d(cols.reshape(-1), dim // 2)], axis=1
    )


@dataclass(frozen=True)
class PositionEmbeddingSpec:
    """How positions are encoded for one token grid."""

    mode: PEMode
    dim: int
    grid: tuple[int, int]
    includes_cls_slot: bool = True

    @property
    def rows(self) -> int:
        return self.grid[0] * self.grid[1] + int(self.includes_cls_slot)


class PositionEmbedding:
    """Adds a (L(+1))×d table to token sequences.

    Learned tables are trainable ``Parameter``s; sin-cos tables are constants
    whose cls slot is zero; ``none`` adds nothing.
    """

    def __init__(self, spec: PositionEmbeddingSpec, rng: Optional[np.random.Generator] = None):
        self.spec = spec
        self.table: Optional[Tensor] = None
        if spec.mode == "learned":
            rng = rng if rng is not None else np.random.default_rng(0)
            init = np.clip(rng.normal(0.0, 0.02, size=(spec.rows, spec.dim)), -0.04, 0.04)
            self.table = Parameter(init)
        elif spec.mode == "sincos":
            table = sincos2d(spec.grid[0], spec.grid[1], spec.dim)
            if spec.includes_cls_slot:
                table = np.concatenate([np.zeros((1, spec.dim)), table], axis=0)
            self.table = Tensor(table)
        elif spec.mode != "none":
            raise ValueError(f"unknown position embedding mode {spec.mode!r}")

    @property
    def trainable(self) -> bool:
        return isinstance(self.table, Parameter)

    def __call__(self, tokens: Tensor) -> Tensor:
        if self.table is None:
            return tokens
        if tokens.shape[-2] != self.table.shape[0]:
            raise ShapeError(f"{tokens.shape[-2]} tokens but {self.table.shape[0]} PE rows")
        return add(tokens, self.table)


def embed(
    raw: np.ndarray,
    proj: Callable[[Tensor], Tensor],
    pe: PositionEmbedding,
    cls: Optional[Tensor],
    coords: np.ndarray,
    grid: tuple[int, int],
) -> TokenSequence:
    """Project raw tokens, prepend cls, add position embeddings."""
    x = proj(Tensor(raw))
    if cls is not None:
        cls_rows = broadcast_to(reshape(cls, (1, 1, cls.shape[-1])), (x.shape[0], 1, x.shape[2]))
        x = concat([cls_rows, x], axis=1)
    return TokenSequence(pe(x), coords, grid, cls is not None)


def pixel_tokenize(
    img: Union[ImageTensor, np.ndarray],
    proj: Callable[[Tensor], Tensor],
    pe: PositionEmbedding,
    cls: Optional[Tensor] = None,
) -> TokenSequence:
    """One token per pixel: X = [cls, f(p1) … f(pL)] + PE, with L = H·W."""
    values = _as_batch(img)
    h, w = values.shape[1:3]
    return embed(pixel_tokens(values), proj, pe, cls, token_coords(h, w, 1), (h, w))


def patchify(
    img: Union[ImageTensor, np.ndarray],
    patch_size: int,
    proj: Callable[[Tensor], Tensor],
    pe: PositionEmbedding,
    cls: Optional[Tensor] = None,
) -> TokenSequence:
    """One token per non-overlapping p×p patch: L = (H/p)·(W/p)."""
    values = _as_batch(img)
    h, w = values.shape[1:3]
    raw = patch_tokens(values, patch_size)
    grid = (h // patch_size, w // patch_size)
    return embed(raw, proj, pe, cls, token_coords(h, w, patch_size), grid)


# ---------------------------------------------------------------------------
# Pixel permutations
# ---------------------------------------------------------------------------


def max_disjoint_swaps(height: int, width: int) -> int:
    """Largest number of disjoint pixel pairs on an H×W grid."""
    return (height * width) // 2


def within_distance(i: int, j: int, width: int, delta: Optional[int]) -> bool:
    """Chebyshev bound ``max(|Δrow|, |Δcol|) < delta``; ``None`` is unbounded."""
    if delta is None:
        return True
    ri, ci = divmod(i, width)
    rj, cj = divmod(j, width)
    return max(abs(ri - rj), abs(ci - cj)) < delta


@dataclass(frozen=True)
class PermutationMap:
    """Bijection on H·W flat pixel indices built from disjoint transpositions.

    Attributes:
        height: Image height.
        width: Image width.
        swaps: Requested swap count T.
        delta: Distance threshold δ, ``None`` for unbounded.
        seed: Generator seed.
        pairs: The transpositions, in generation order.
    """

    height: int
    width: int
    swaps: int
    delta: Optional[int]
    seed: int
    pairs: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    @property
    def size(self) -> int:
        return self.height * self.width

    @cached_property
    def mapping(self) -> np.ndarray:
        mapping = np.arange(self.size, dtype=np.int64)
        for i, j in self.pairs:
            mapping[i], mapping[j] = j, i
        mapping.setflags(write=False)
        return mapping

    @property
    def moved_pixels(self) -> int:
        return int((self.mapping != np.arange(self.size)).sum())

    @property
    def is_identity(self) -> bool:
        return self.moved_pixels == 0

    def inverse(self) -> "PermutationMap":
        """Inverse map; disjoint transpositions make it the same set of pairs."""
        return PermutationMap(self.height, self.width, self.swaps, self.delta, self.seed, self.pairs)

    def header(self) -> str:
        delta = "inf" if self.delta is None else str(self.delta)
        return f"{PERM_MAGIC} {PERM_VERSION} {self.height} {self.width} {self.swaps} {delta} {self.seed}"

    def to_text(self) -> str:
        lines = [self.header()] + [f"{i} {j}" for i, j in self.pairs]
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_text(cls, text: str) -> "PermutationMap":
        """Parse and validate the ``PERM v1`` text format.

        Raises:
            PermutationError: On a malformed file or a failed validation.
        """
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise PermutationError("empty permutation file")
        head = lines[0].split()
        if len(head) != 7 or head[0] != PERM_MAGIC or head[1] != PERM_VERSION:
            raise PermutationError(f"bad permutation header: {lines[0]!r}")
        try:
            height, width, swaps, seed = int(head[2]), int(head[3]), int(head[4]), int(head[6])
            delta = None if head[5] == "inf" else int(head[5])
            pairs = tuple(tuple(int(v) for v in line.split()) for line in lines[1:])
        except ValueError as exc:
            raise PermutationError(f"non-integer field in permutation file: {exc}") from exc
        if any(len(p) != 2 for p in pairs):
            raise PermutationError("every transposition line needs exactly two indices")
        perm = cls(height, width, swaps, delta, seed, pairs)  # type: ignore[arg-type]
        validate_permutation(perm)
        return perm

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PermutationMap":
        return cls.from_text(Path(path).read_text())


def validate_permutation(perm: PermutationMap) -> None:
    """Check bijection, disjointness, swap budget and distance bound.

    Raises:
        PermutationError: On the first violated property.
    """
    if perm.height < 1 or perm.width < 1:
        raise PermutationError("permutation grid must be at least 1×1")
    if perm.delta is not None and perm.delta < 2:
        raise PermutationError(f"delta must be ≥ 2 or unbounded, got {perm.delta}")
    if len(perm.pairs) > perm.swaps:
        raise PermutationError(f"{len(perm.pairs)} transpositions exceed T={perm.swaps}")
    touched: set[int] = set()
    for i, j in perm.pairs:
        if not (0 <= i < perm.size and 0 <= j < perm.size) or i == j:
            raise PermutationError(f"invalid transposition ({i}, {j})")
        if i in touched or j in touched:
            raise PermutationError(f"transposition ({i}, {j}) reuses a moved pixel")
        if not within_distance(i, j, perm.width, perm.delta):
            raise PermutationError(f"transposition ({i}, {j}) exceeds delta={perm.delta}")
        touched.update((i, j))
    mapping = perm.mapping
    if not np.array_equal(np.sort(mapping), np.arange(perm.size)):
        raise PermutationError("mapping is not a bijection")
    if not np.array_equal(mapping[mapping], np.arange(perm.size)):
        raise PermutationError("mapping is not an involution")


def generate_permutation(
    height: int,
    width: int,
    swaps: int,
    delta: Optional[int] = None,
    seed: int = 0,
    attempts_per_swap: int = 1000,
) -> PermutationMap:
    """Sample T disjoint pixel swaps, each within the distance bound.

    Rejection sampling: pick a free pixel uniformly, then a free partner
    within the Chebyshev window; give up after ``attempts_per_swap · T``
    attempts.

    Raises:
        PermutationError: If T or delta is out of range, or the attempt budget runs out.
    """
    if swaps < 0 or swaps > max_disjoint_swaps(height, width):
        raise PermutationError(
            f"T={swaps} outside [0, {max_disjoint_swaps(height, width)}] for a {height}×{width} grid"
        )
    if delta is not None and delta < 2:
        raise PermutationError(f"delta must be ≥ 2 or unbounded, got {delta}")

    rng = np.random.default_rng(seed)
    size = height * width
    free = list(range(size))
    slot = list(range(size))
    is_free = np.ones(size, dtype=bool)

    def take(pixel: int) -> None:
        k = slot[pixel]
        last = free[-1]
        free[k] = last
        slot[last] = k
        free.pop()
        is_free[pixel] = False

    pairs: list[tuple[int, int]] = []
    budget = attempts_per_swap * swaps
    attempts = 0
    while len(pairs) < swaps:
        if attempts >= budget:
            raise PermutationError(
                f"placed {len(pairs)} of {swaps} swaps before exhausting {budget} attempts (delta={delta})"
            )
        attempts += 1
        k = int(rng.integers(len(free)))
        i = free[k]
        if delta is None:
            other = int(rng.integers(len(free) - 1))
            j = free[other if other < k else other + 1]
        else:
            r, c = divmod(i, width)
            r0, r1 = max(0, r - delta + 1), min(height, r + delta)
            c0, c1 = max(0, c - delta + 1), min(width, c + delta)
            window = (np.arange(r0, r1)[:, None] * width + np.arange(c0, c1)[None, :]).reshape(-1)
            candidates = window[is_free[window] & (window != i)]
            if candidates.size == 0:
                continue
            j = int(candidates[rng.integers(candidates.size)])
        take(i)
        take(j)
        pairs.append((i, j))

    logger.debug("generated %d swaps on %dx%d (delta=%s) in %d attempts", swaps, height, width, delta, attempts)
    return PermutationMap(height, width, swaps, delta, seed, tuple(pairs))


def apply_permutation(
    img: Union[ImageTensor, np.ndarray], perm: PermutationMap
) -> Union[ImageTensor, np.ndarray]:
    """Move the pixel at flat index i to ``perm.mapping[i]``.

    Accepts an ``ImageTensor`` or an array shaped (..., H, W, C).
    """
    values = img.values if isinstance(img, ImageTensor) else np.asarray(img)
    if values.shape[-3:-1] != (perm.height, perm.width):
        raise ShapeError(f"permutation is {perm.height}×{perm.width}, image is {values.shape}")
    lead = values.shape[:-3]
    flat = values.reshape(lead + (perm.size, values.shape[-1]))
    source = np.argsort(perm.mapping)
    out = flat[..., source, :].reshape(values.shape)
    if isinstance(img, ImageTensor):
        return ImageTensor(out, img.normalization)
    return out
