"""Attention-locality statistics and figure export.

Metrics ignore the cls token: it has no grid position, so its column is
dropped and each query row renormalized over grid keys. Distances are
Euclidean on pixel-centre coordinates, divided by the image side.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from checkpoint import Checkpoint, load_model_state, read_checkpoint  # noqa: E402
from errors import QueryOutOfRangeError, ShapeError  # noqa: E402
from model import AttentionRecord, VisionTransformer, forward_encoder  # noqa: E402
from numerics import no_grad  # noqa: E402
from tokenization import ImageTensor  # noqa: E402

logger = logging.getLogger(__name__)

Metric = Literal["distance", "offset"]
METRICS: tuple[Metric, ...] = ("distance", "offset")
STATS_HEADER = ("layer", "head", "metric", "value")

plt.rcParams["svg.hashsalt"] = "pixtok"


def grid_attention(record: AttentionRecord, head: int) -> np.ndarray:
    """(B, L, L) weights between grid tokens, rows renormalized after dropping cls."""
    w = np.asarray(record.head(head), dtype=np.float64)
    if record.has_cls:
        w = w[:, 1:, 1:]
    return w / np.maximum(w.sum(axis=-1, keepdims=True), 1e-12)


def cls_mass(record: AttentionRecord, head: int) -> np.ndarray:
    """(B, L) attention each grid query places on cls; zeros without cls."""
    w = record.head(head)
    if not record.has_cls:
        return np.zeros(w.shape[:2])
    return np.asarray(w[:, 1:, 0], dtype=np.float64)


def _normalizer(record: AttentionRecord, image_size: Optional[float]) -> float:
    size = float(image_size if image_size is not None else record.image_size)
    if size <= 0:
        raise ValueError("image size must be positive")
    return size


def mean_attention_distance(record: AttentionRecord, image_size: Optional[float] = None) -> np.ndarray:
    """Per head: Σ_k a(q,k)·|coord(q) − coord(k)|, averaged over queries and batch, over image side."""
    coords = np.asarray(record.key_coords, dtype=np.float64)
    queries = np.asarray(record.query_coords, dtype=np.float64)
    dist = np.linalg.norm(queries[:, None, :] - coords[None, :, :], axis=-1)
    size = _normalizer(record, image_size)
    return np.array(
        [float((grid_attention(record, h) * dist).sum(axis=-1).mean()) / size for h in range(record.num_heads)]
    )


def mean_attention_offset(record: AttentionRecord, image_size: Optional[float] = None) -> np.ndarray:
    """Per head: distance from each query to its attention centre of mass, averaged, over image side."""
    coords = np.asarray(record.key_coords, dtype=np.float64)
    queries = np.asarray(record.query_coords, dtype=np.float64)
    size = _normalizer(record, image_size)
    values = []
    for h in range(record.num_heads):
        centres = grid_attention(record, h) @ coords
        values.append(float(np.linalg.norm(centres - queries[None], axis=-1).mean()) / size)
    return np.array(values)


METRIC_FUNCTIONS = {"distance": mean_attention_distance, "offset": mean_attention_offset}


@dataclass
class AttentionStats:
    """One metric for every layer and head.

    Attributes:
        metric: ``distance`` or ``offset``.
        values: (layers, heads); each row sorted ascending, so column j is
            the j-th most local head of that layer.
    """

    metric: str
    values: np.ndarray

    @property
    def num_layers(self) -> int:
        return int(self.values.shape[0])

    def layer_means(self) -> np.ndarray:
        return self.values.mean(axis=1)

    def rows(self) -> list[tuple[int, int, str, float]]:
        return [
            (layer, head, self.metric, float(self.values[layer, head]))
            for layer in range(self.values.shape[0])
            for head in range(self.values.shape[1])
        ]


def attention_stats(records: Sequence[AttentionRecord], metric: Metric = "distance") -> AttentionStats:
    if not records:
        raise ValueError("no attention records")
    fn = METRIC_FUNCTIONS[metric]
    ordered = sorted(records, key=lambda r: r.layer)
    return AttentionStats(metric, np.stack([np.sort(fn(r)) for r in ordered]))


def layer_bands(num_layers: int, k: Optional[int] = None) -> dict[str, list[int]]:
    """First, middle and last ``k`` layers (k defaults to N // 3, at least 1)."""
    if num_layers < 1:
        raise ValueError("need at least one layer")
    k = max(1, num_layers // 3) if k is None else k
    k = min(k, num_layers)
    start = (num_layers - k) // 2
    return {
        "early": list(range(k)),
        "middle": list(range(start, start + k)),
        "late": list(range(num_layers - k, num_layers)),
    }


def band_means(stats: AttentionStats, k: Optional[int] = None) -> dict[str, float]:
    return {band: float(stats.values[idx].mean()) for band, idx in layer_bands(stats.num_layers, k).items()}


# ---------------------------------------------------------------------------
# Recording
# ---------------------------------------------------------------------------


def model_from_checkpoint(ckpt: Union[str, Path, Checkpoint]) -> VisionTransformer:
    """Classifier, or the encoder of an MAE checkpoint, with weights loaded."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = read_checkpoint(ckpt)
    cfg = ckpt.config
    if ckpt.kind == "mae":
        model = VisionTransformer(cfg, with_head=False)
        prefix = "encoder."
        model.load_state_dict({k[len(prefix) :]: v for k, v in ckpt.params.items() if k.startswith(prefix)})
    else:
        model = VisionTransformer(cfg)
        load_model_state(model, ckpt)
    return model.eval()  # type: ignore[return-value]


def _as_normalized(image: Union[ImageTensor, np.ndarray]) -> np.ndarray:
    if isinstance(image, ImageTensor):
        return image.normalized().values
    return np.asarray(image, dtype=np.float32)


def collect_attention(model: VisionTransformer, images: Union[ImageTensor, np.ndarray]) -> list[AttentionRecord]:
    """Forward without gradients, recording every layer's attention."""
    model.eval()
    with no_grad():
        _, records = forward_encoder(model.tokenize(_as_normalized(images)), model, record_attention=True)
    return records


@dataclass
class QueryAttentionMap:
    """Attention of one query over the token grid.

    Attributes:
        layer: Layer index.
        query: (row, col) on the token grid.
        maps: (heads, rows, cols), batch-averaged; sums to 1 − cls mass.
        cls_mass: (heads,) attention on the cls token.
    """

    layer: int
    query: tuple[int, int]
    maps: np.ndarray
    cls_mass: np.ndarray


def attention_map_for_query(
    checkpoint: Union[str, Path, Checkpoint, VisionTransformer],
    image: Union[ImageTensor, np.ndarray],
    layer: int,
    query: Optional[tuple[int, int]] = None,
) -> QueryAttentionMap:
    """Heat map of one query's attention per head; the grid centre by default.

    Raises:
        QueryOutOfRangeError: If the layer or query lies outside the model's grid.
    """
    model = checkpoint if isinstance(checkpoint, VisionTransformer) else model_from_checkpoint(checkpoint)
    side = model.cfg.grid_side
    if query is None:
        query = (side // 2, side // 2)
    row, col = query
    if not (0 <= row < side and 0 <= col < side):
        raise QueryOutOfRangeError(f"query {query} outside the {side}×{side} token grid")
    if not 0 <= layer < model.cfg.layers:
        raise QueryOutOfRangeError(f"layer {layer} outside [0, {model.cfg.layers})")
    records = collect_attention(model, image)
    record = records[layer]
    offset = 1 if record.has_cls else 0
    q = offset + row * side + col
    weights = record.weights[:, :, q, :].mean(axis=0)
    cls = weights[:, 0] if record.has_cls else np.zeros(weights.shape[0])
    maps = weights[:, offset:].reshape(-1, side, side)
    return QueryAttentionMap(layer, (row, col), maps, np.asarray(cls))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def write_stats_csv(stats: Sequence[AttentionStats], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(STATS_HEADER)
        for s in stats:
            for layer, head, metric, value in s.rows():
                writer.writerow([layer, head, metric, repr(value)])
    return path


Series = Mapping[str, tuple[Sequence[float], Sequence[float]]]


def export_figure_data(
    series: Series,
    path: Union[str, Path],
    xlabel: str,
    ylabel: str,
    title: str = "",
    style: Literal["line", "scatter"] = "line",
) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (series,x,y) and ``<path>.svg`` with one element group per series.

    Each plotted series carries the SVG id ``series-<name>``.
    """
    stem = Path(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = stem.with_suffix(".csv")
    svg_path = stem.with_suffix(".svg")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("series", "x", "y"))
        for name, (xs, ys) in series.items():
            if len(xs) != len(ys):
                raise ShapeError(f"series {name!r} has {len(xs)} x values and {len(ys)} y values")
            for x, y in zip(xs, ys):
                writer.writerow([name, repr(float(x)), repr(float(y))])

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (xs, ys) in series.items():
        if style == "scatter":
            artist: Any = ax.scatter(xs, ys, label=name, s=16)
        else:
            (artist,) = ax.plot(xs, ys, label=name, marker="o", markersize=3)
        artist.set_gid(f"series-{name}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if series:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return csv_path, svg_path


def stats_series(stats: AttentionStats) -> dict[str, tuple[list[float], list[float]]]:
    """One scatter series per sorted head rank, x = layer."""
    layers = list(range(stats.num_layers))
    return {
        f"head{j}": ([float(x) for x in layers], [float(v) for v in stats.values[:, j]])
        for j in range(stats.values.shape[1])
    }


def table_series(
    rows: Sequence[Any], x: str, y: str, group: Optional[str] = None
) -> dict[str, tuple[list[float], list[float]]]:
    """Series from sweep-table rows (dataclasses), optionally split by ``group``."""
    out: dict[str, tuple[list[float], list[float]]] = {}
    for row in rows:
        key = "all" if group is None else str(getattr(row, group))
        xs, ys = out.setdefault(key, ([], []))
        xs.append(float(getattr(row, x)))
        ys.append(float(getattr(row, y)))
    return out


def analyze(
    checkpoint: Union[str, Path, Checkpoint],
    images: np.ndarray,
    out_dir: Union[str, Path],
    query: Optional[tuple[int, int]] = None,
    query_layer: Optional[int] = None,
) -> dict[str, Any]:
    """Compute both locality metrics, band means and a query map; write CSV + SVG."""
    out = Path(out_dir)
    model = model_from_checkpoint(checkpoint)
    records = collect_attention(model, images)
    stats = [attention_stats(records, m) for m in METRICS]
    write_stats_csv(stats, out / "attention_stats.csv")
    for s in stats:
        export_figure_data(
            stats_series(s), out / f"attention_{s.metric}", "layer", f"mean attention {s.metric}", style="scatter"
        )
    layer = model.cfg.layers - 1 if query_layer is None else query_layer
    qmap = attention_map_for_query(model, images, layer, query)
    with open(out / "query_map.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("head", "row", "col", "weight"))
        for h, grid in enumerate(qmap.maps):
            for (r, c), value in np.ndenumerate(grid):
                writer.writerow([h, r, c, repr(float(value))])
    bands = {s.metric: band_means(s) for s in stats}
    logger.info("attention bands: %s", bands)
    return {"bands": bands, "query": list(qmap.query), "layer": layer, "cls_mass": qmap.cls_mass.tolist()}
