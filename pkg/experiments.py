"""Training harnesses and study drivers.

A run directory always holds ``manifest.json`` (written before training),
``metrics.csv``, ``summary.json`` and ``last.ckpt``/``best.ckpt``. Sweep
drivers give every grid point its own subdirectory and add a table CSV.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Iterator, Optional, Sequence, Union

import numpy as np

from checkpoint import (
    Checkpoint,
    CheckpointStore,
    check_compatible,
    checkpoint_from_model,
    load_model_state,
    read_checkpoint,
)
from config import (
    ExperimentConfig,
    ModelConfig,
    PermutationSpec,
    RunManifest,
    TrendConfig,
    thread_limit,
)
from data import Dataset, DataLoader, load_dataset, one_hot, topk_accuracy
from errors import CheckpointError, ConfigError, NonFiniteError
from model import MaskedAutoencoder, Module, VisionTransformer, forward_classifier, forward_mae
from numerics import backward, clip_grad_norm, cross_entropy, no_grad
from optim import AdamW, EMAState, ema_update, lr_at
from tokenization import PermutationMap, generate_permutation

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "loss", "acc1", "acc5", "lr", "seconds")
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
MANIFEST_FILE = "manifest.json"
PE_MODES = ("sincos", "learned", "none")


def code_version() -> str:
    try:
        return metadata.version("pixtok")
    except metadata.PackageNotFoundError:
        return "unknown"


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _parse(value: str) -> Optional[float]:
    return None if value == "" else float(value)


def delta_label(delta: Optional[int]) -> str:
    return "inf" if delta is None else str(delta)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRow:
    """One CSV row; accuracies are ``None`` for reconstruction runs."""

    epoch: int
    split: str
    loss: float
    acc1: Optional[float] = None
    acc5: Optional[float] = None
    lr: float = 0.0
    seconds: float = 0.0

    def as_csv(self) -> list[str]:
        return [
            str(self.epoch),
            self.split,
            _fmt(self.loss),
            _fmt(self.acc1),
            _fmt(self.acc5),
            _fmt(self.lr),
            f"{self.seconds:.3f}",
        ]


class MetricsLog:
    """Per-epoch metrics, mirrored to CSV when a path is given."""

    def __init__(self, path: Optional[Union[str, Path]] = None, rows: Optional[list[MetricsRow]] = None):
        self.path = Path(path) if path else None
        self.rows: list[MetricsRow] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_HEADER)
        for row in rows or []:
            self.append(row)

    def append(self, row: MetricsRow) -> None:
        if row.acc1 is not None and row.acc5 is not None and row.acc1 > row.acc5 + 1e-12:
            raise ValueError(f"acc1 {row.acc1} exceeds acc5 {row.acc5} at epoch {row.epoch}")
        if self.rows and row.epoch < self.rows[-1].epoch:
            raise ValueError(f"epoch {row.epoch} logged after epoch {self.rows[-1].epoch}")
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(row.as_csv())

    def split(self, name: str) -> list[MetricsRow]:
        return [r for r in self.rows if r.split == name]

    def last(self, name: str) -> Optional[MetricsRow]:
        rows = self.split(name)
        return rows[-1] if rows else None

    @classmethod
    def read(cls, path: Union[str, Path]) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = tuple(next(reader, ()))
            if header != METRICS_HEADER:
                raise ValueError(f"{path}: unexpected metrics header {header}")
            for rec in reader:
                epoch, split, loss, acc1, acc5, lr, seconds = rec
                log.rows.append(
                    MetricsRow(int(epoch), split, float(loss), _parse(acc1), _parse(acc5), float(lr), float(seconds))
                )
        return log


@dataclass
class RunResult:
    """Outputs of one training run."""

    out_dir: Path
    metrics: MetricsLog
    summary: dict[str, Any] = field(default_factory=dict)
    model: Optional[Module] = None

    @property
    def last_checkpoint(self) -> Path:
        return self.out_dir / CheckpointStore.LAST

    @property
    def best_checkpoint(self) -> Path:
        return self.out_dir / CheckpointStore.BEST


def write_manifest(cfg: ExperimentConfig, out_dir: Path, keep_existing: bool = False) -> RunManifest:
    """Write ``manifest.json``; resumed runs keep the original."""
    path = out_dir / MANIFEST_FILE
    if keep_existing and path.exists():
        return RunManifest.model_validate_json(path.read_text())
    manifest = RunManifest(
        config=cfg.model_dump(mode="json"),
        seed=cfg.seed,
        code_version=code_version(),
        started_at=datetime.now(timezone.utc),
        output_paths={
            "manifest": MANIFEST_FILE,
            "metrics": METRICS_FILE,
            "summary": SUMMARY_FILE,
            "last": CheckpointStore.LAST,
            "best": CheckpointStore.BEST,
        },
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n")
    return manifest


def write_summary(out_dir: Path, summary: dict[str, Any]) -> Path:
    path = out_dir / SUMMARY_FILE
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return path


def write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    return path


@contextmanager
def swapped_weights(model: Module, shadow: dict[str, np.ndarray]) -> Iterator[None]:
    """Temporarily load EMA weights into ``model``."""
    params = dict(model.named_parameters())
    saved = {name: p.data.copy() for name, p in params.items() if name in shadow}
    try:
        for name in saved:
            params[name].data[...] = shadow[name]
        yield
    finally:
        for name, value in saved.items():
            params[name].data[...] = value


# ---------------------------------------------------------------------------
# Harnesses
# ---------------------------------------------------------------------------

StepHook = Callable[[int, float, float], None]


def load_splits(
    cfg: ExperimentConfig, train_set: Optional[Dataset] = None, val_set: Optional[Dataset] = None
) -> tuple[Dataset, Dataset]:
    """Train and val splits for ``cfg``, keeping any passed in; both use the model's label space."""
    classes = cfg.model.num_classes
    train = train_set if train_set is not None else load_dataset(cfg.dataset, "train", classes)
    val = val_set if val_set is not None else load_dataset(cfg.dataset, "val", classes)
    return train, val


class Harness(ABC):
    """Shared epoch loop: train, evaluate on interval, checkpoint best and last."""

    kind = "classifier"

    def __init__(
        self,
        cfg: ExperimentConfig,
        out_dir: Optional[Union[str, Path]] = None,
        train_set: Optional[Dataset] = None,
        val_set: Optional[Dataset] = None,
    ):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else cfg.out_path
        self.train_set, self.val_set = load_splits(cfg, train_set, val_set)
        self.model = self.build_model()
        self.loader = DataLoader(
            self.train_set,
            cfg.batch_size,
            self.train_augmentation(),
            shuffle=True,
            seed=cfg.seed,
            prefetch=thread_limit() - 1,
        )
        self.schedule = cfg.schedule.model_copy(update={"steps_per_epoch": len(self.loader)})
        self.optimizer = AdamW(self.model.named_parameters(), cfg.optimizer, cfg.model.layers)
        self.ema = (
            EMAState.from_params(self.model.named_parameters(), cfg.optimizer.ema_decay)
            if cfg.optimizer.ema_decay is not None
            else None
        )
        self.store = CheckpointStore(self.out_dir)
        self.epoch = 0
        self.step = 0
        self.best: Optional[float] = None
        self.step_hooks: list[StepHook] = []

    @abstractmethod
    def build_model(self) -> Module:
        ...

    def train_augmentation(self) -> Any:
        return self.cfg.augmentation

    @abstractmethod
    def batch_loss(self, batch: Any, epoch: int, index: int) -> tuple[Any, Optional[np.ndarray]]:
        ...

    @abstractmethod
    def evaluate(self, dataset: Dataset, split: str, epoch: int, lr: float) -> MetricsRow:
        ...

    @abstractmethod
    def score(self, row: MetricsRow) -> float:
        """Higher is better."""

    def train_epoch(self, epoch: int) -> MetricsRow:
        self.model.train()
        start = time.perf_counter()
        losses, hits1, hits5, count = [], 0.0, 0.0, 0
        lr = 0.0
        clip = self.cfg.optimizer.clip_grad
        for index, batch in enumerate(self.loader.epoch(epoch)):
            lr = lr_at(self.step, self.schedule, self.cfg.optimizer.lr)
            self.model.set_rng(np.random.default_rng([self.cfg.seed, epoch, index, 2]))
            self.optimizer.zero_grad()
            loss, logits = self.batch_loss(batch, epoch, index)
            backward(loss)
            if clip is not None:
                clip_grad_norm(self.model.parameters(), clip)
            self.optimizer.step(lr)
            if self.ema is not None:
                ema_update(self.ema, self.model.named_parameters())
            value = loss.item()
            for hook in self.step_hooks:
                hook(self.step, value, lr)
            self.step += 1
            losses.append(value * len(batch))
            count += len(batch)
            if logits is not None:
                acc = topk_accuracy(logits, batch.targets)
                hits1 += acc[1] * len(batch)
                hits5 += acc[5] * len(batch)
        acc1 = hits1 / count if self.kind == "classifier" else None
        acc5 = hits5 / count if self.kind == "classifier" else None
        return MetricsRow(epoch + 1, "train", sum(losses) / count, acc1, acc5, lr, time.perf_counter() - start)

    def eval_rows(self, epoch: int, lr: float) -> list[MetricsRow]:
        rows = [self.evaluate(self.val_set, "val", epoch, lr)]
        if self.cfg.eval_train:
            rows.append(self.evaluate(self.train_set, "train_eval", epoch, lr))
        return rows

    def checkpoint(self) -> Checkpoint:
        return checkpoint_from_model(
            self.model,
            self.kind,
            metadata={
                "epoch": self.epoch,
                "step": self.step,
                "seed": self.cfg.seed,
                "best": self.best,
                "study": self.cfg.study,
            },
            optimizer=self.optimizer,
            ema=self.ema,
        )

    def restore(self, ckpt: Checkpoint) -> None:
        """Resume model, optimizer, EMA and counters from a checkpoint."""
        if ckpt.kind != self.kind:
            raise CheckpointError(f"cannot resume a {self.kind} run from a {ckpt.kind} checkpoint")
        load_model_state(self.model, ckpt)
        meta = ckpt.metadata
        self.optimizer.load_state_tensors(ckpt.optimizer_tensors, int(meta.get("optimizer_step", meta.get("step", 0))))
        if self.ema is not None and ckpt.ema_tensors:
            self.ema = EMAState.from_tensors(ckpt.ema_tensors, self.ema.decay)
        self.epoch = int(meta.get("epoch", 0))
        self.step = int(meta.get("step", 0))
        self.best = meta.get("best")

    def fit(self, max_epochs: Optional[int] = None, resume: bool = False) -> RunResult:
        """Train until ``schedule.total_epochs`` (or ``max_epochs`` more epochs).

        Args:
            max_epochs: Stop after this many epochs in this call.
            resume: Continue from ``last.ckpt`` in the run directory, if present.
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(self.cfg, self.out_dir, keep_existing=resume)
        previous: list[MetricsRow] = []
        if resume and self.store.has_last():
            self.restore(self.store.load_last())
            metrics_path = self.out_dir / METRICS_FILE
            if metrics_path.exists():
                previous = [r for r in MetricsLog.read(metrics_path).rows if r.epoch <= self.epoch]
            logger.info("resuming %s at epoch %d (step %d)", self.out_dir, self.epoch, self.step)
        log = MetricsLog(self.out_dir / METRICS_FILE, previous)

        total = self.schedule.total_epochs
        stop = total if max_epochs is None else min(total, self.epoch + max_epochs)
        while self.epoch < stop:
            epoch = self.epoch
            train_row = self.train_epoch(epoch)
            log.append(train_row)
            self.epoch = epoch + 1
            message = f"epoch {self.epoch}/{total} loss {train_row.loss:.4f} lr {train_row.lr:.3g}"
            if self.epoch % self.cfg.eval_interval == 0 or self.epoch == total:
                rows = self.eval_rows(epoch, train_row.lr)
                for row in rows:
                    log.append(row)
                current = self.score(rows[0])
                message += f" val loss {rows[0].loss:.4f}"
                if rows[0].acc1 is not None:
                    message += f" acc1 {rows[0].acc1:.3f}"
                if self.best is None or current > self.best:
                    self.best = current
                    self.store.save_best(self.checkpoint())
            self.store.save_last(self.checkpoint())
            logger.info(message)

        summary = self.summary(log)
        write_summary(self.out_dir, summary)
        return RunResult(self.out_dir, log, summary, self.model)

    def summary(self, log: MetricsLog) -> dict[str, Any]:
        final = {r.split: {"loss": r.loss, "acc1": r.acc1, "acc5": r.acc5} for r in log.rows if r.epoch == self.epoch}
        return {
            "study": self.cfg.study,
            "kind": self.kind,
            "epochs": self.epoch,
            "steps": self.step,
            "best": self.best,
            "final": final,
            "parameters": self.model.num_parameters(),
            "finished_at": datetime.now(timezone.utc).isoformat(),
        }


class Trainer(Harness):
    """Supervised classification with soft-label cross entropy."""

    kind = "classifier"

    def __init__(self, *args: Any, init_model: Optional[VisionTransformer] = None, **kwargs: Any):
        self._init_model = init_model
        super().__init__(*args, **kwargs)

    def build_model(self) -> VisionTransformer:
        if self.train_set.num_classes != self.cfg.model.num_classes:
            raise ConfigError(
                f"dataset has {self.train_set.num_classes} classes, model.num_classes is {self.cfg.model.num_classes}"
            )
        if self._init_model is not None:
            return self._init_model
        return VisionTransformer(self.cfg.model, np.random.default_rng([self.cfg.seed, 1]))

    def batch_loss(self, batch: Any, epoch: int, index: int) -> tuple[Any, Optional[np.ndarray]]:
        logits = forward_classifier(batch.images, self.model)
        return cross_entropy(logits, batch.labels), logits.data

    def evaluate(self, dataset: Dataset, split: str, epoch: int, lr: float) -> MetricsRow:
        start = time.perf_counter()
        self.model.eval()
        loader = DataLoader(dataset, self.cfg.batch_size, shuffle=False, seed=self.cfg.seed)
        total_loss, hits1, hits5 = 0.0, 0.0, 0.0
        weights = self.ema.shadow if self.ema is not None else {}
        with no_grad(), swapped_weights(self.model, weights):
            for batch in loader.epoch(0):
                logits = forward_classifier(batch.images, self.model)
                targets = one_hot(batch.targets, self.cfg.model.num_classes)
                total_loss += cross_entropy(logits, targets).item() * len(batch)
                acc = topk_accuracy(logits.data, batch.targets)
                hits1 += acc[1] * len(batch)
                hits5 += acc[5] * len(batch)
        n = len(dataset)
        return MetricsRow(epoch + 1, split, total_loss / n, hits1 / n, hits5 / n, lr, time.perf_counter() - start)

    def score(self, row: MetricsRow) -> float:
        return float(row.acc1 or 0.0)


class MAETrainer(Harness):
    """Masked-pixel regression pretraining."""

    kind = "mae"

    def build_model(self) -> MaskedAutoencoder:
        if self.cfg.mae is None:
            raise ConfigError("MAE pretraining requires an mae section")
        return MaskedAutoencoder(self.cfg.model, self.cfg.mae, np.random.default_rng([self.cfg.seed, 1]))

    def train_augmentation(self) -> Any:
        return self.cfg.augmentation.model_copy(update={"mixup_alpha": 0.0, "cutmix_alpha": 0.0, "randaug": False})

    def _mask_rng(self, epoch: int, index: int) -> np.random.Generator:
        assert self.cfg.mae is not None
        return np.random.default_rng([self.cfg.mae.seed, self.cfg.seed, epoch, index])

    def batch_loss(self, batch: Any, epoch: int, index: int) -> tuple[Any, Optional[np.ndarray]]:
        return forward_mae(batch.images, self.model, self._mask_rng(epoch, index)).loss, None  # type: ignore[arg-type]

    def evaluate(self, dataset: Dataset, split: str, epoch: int, lr: float) -> MetricsRow:
        start = time.perf_counter()
        self.model.eval()
        loader = DataLoader(dataset, self.cfg.batch_size, shuffle=False, seed=self.cfg.seed)
        total = 0.0
        with no_grad():
            for index, batch in enumerate(loader.epoch(0)):
                # fixed masks so evaluations are comparable across epochs
                out = forward_mae(batch.images, self.model, self._mask_rng(-1, index))  # type: ignore[arg-type]
                total += out.loss.item() * len(batch)
        return MetricsRow(epoch + 1, split, total / len(dataset), None, None, lr, time.perf_counter() - start)

    def score(self, row: MetricsRow) -> float:
        return -row.loss


# ---------------------------------------------------------------------------
# Study drivers
# ---------------------------------------------------------------------------


def run_supervised(
    cfg: ExperimentConfig,
    resume: bool = False,
    max_epochs: Optional[int] = None,
    train_set: Optional[Dataset] = None,
    val_set: Optional[Dataset] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> RunResult:
    """Train a classifier from scratch, evaluating top-1/top-5 every ``eval_interval`` epochs."""
    trainer = Trainer(cfg, out_dir, train_set, val_set)
    return trainer.fit(max_epochs=max_epochs, resume=resume)


def run_mae_pretrain(
    cfg: ExperimentConfig,
    resume: bool = False,
    max_epochs: Optional[int] = None,
    train_set: Optional[Dataset] = None,
    val_set: Optional[Dataset] = None,
) -> RunResult:
    """Masked-autoencoder pretraining; the run's ``last.ckpt`` seeds fine-tuning."""
    trainer = MAETrainer(cfg, None, train_set, val_set)
    return trainer.fit(max_epochs=max_epochs, resume=resume)


def encoder_from_mae(ckpt: Checkpoint, cfg: ModelConfig, seed: int) -> VisionTransformer:
    """Classifier whose encoder comes from an MAE checkpoint; the head stays freshly initialized.

    Raises:
        CheckpointError: Wrong checkpoint kind, architecture mismatch or missing encoder tensors.
    """
    if ckpt.kind != "mae":
        raise CheckpointError(f"expected an mae checkpoint, got {ckpt.kind!r}")
    check_compatible(cfg, ckpt)
    model = VisionTransformer(cfg, np.random.default_rng([seed, 1]))
    prefix = "encoder."
    encoder_state = {k[len(prefix) :]: v for k, v in ckpt.params.items() if k.startswith(prefix)}
    loaded = set(model.load_state_dict(encoder_state, strict=False))
    missing = [name for name, _ in model.named_parameters() if name not in loaded and not name.startswith("head.")]
    if missing:
        raise CheckpointError(f"mae checkpoint lacks encoder tensors: {missing[:5]}")
    return model


def run_mae_finetune(
    cfg: ExperimentConfig,
    init_checkpoint: Optional[Union[str, Path]] = None,
    compare: bool = False,
    max_epochs: Optional[int] = None,
    train_set: Optional[Dataset] = None,
    val_set: Optional[Dataset] = None,
) -> dict[str, RunResult]:
    """Fine-tune from an MAE checkpoint; with ``compare`` also train from random init.

    Both runs share the seed, so they see identical batches. Returns results
    keyed by ``pretrained`` / ``random``; ``comparison.csv`` holds both curves.
    """
    path = init_checkpoint or cfg.init_checkpoint
    if path is None:
        raise ConfigError("mae_finetune needs init_checkpoint")
    ckpt = read_checkpoint(path)
    train_set, val_set = load_splits(cfg, train_set, val_set)
    results: dict[str, RunResult] = {}
    inits: list[tuple[str, Optional[VisionTransformer]]] = [("pretrained", encoder_from_mae(ckpt, cfg.model, cfg.seed))]
    if compare:
        inits.append(("random", None))
    for label, model in inits:
        out = cfg.out_path / label if compare else cfg.out_path
        trainer = Trainer(cfg, out, train_set, val_set, init_model=model)
        results[label] = trainer.fit(max_epochs=max_epochs)
    if compare:
        rows = [
            [label, r.epoch, r.split, r.loss, r.acc1, r.acc5, r.lr]
            for label, result in results.items()
            for r in result.metrics.rows
        ]
        write_table(cfg.out_path / "comparison.csv", ("init", "epoch", "split", "loss", "acc1", "acc5", "lr"), rows)
    return results


def _model_variant(base: ModelConfig, **changes: Any) -> ModelConfig:
    """Re-validated copy of ``base``; ``model_copy`` alone skips validators."""
    try:
        return ModelConfig.model_validate({**base.model_dump(), **changes})
    except ValueError as exc:
        raise ConfigError(f"invalid model variant {changes}: {exc}") from exc


def _run_grid(jobs: Sequence[Callable[[], Any]]) -> list[Any]:
    """Run independent grid points, at most ``PIXTOK_THREADS`` at a time, keeping order."""
    workers = min(thread_limit(), max(1, len(jobs)))
    if workers == 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: job(), jobs))


def _final_val(result: RunResult) -> MetricsRow:
    row = result.metrics.last("val")
    if row is None:
        raise RuntimeError(f"run {result.out_dir} produced no validation row")
    return row


@dataclass
class PEAblationRow:
    pe: str
    acc1: float
    acc5: float
    loss: float


def run_pe_ablation(
    cfg: ExperimentConfig,
    train_set: Optional[Dataset] = None,
    val_set: Optional[Dataset] = None,
) -> list[PEAblationRow]:
    """Train the same model with sin-cos, learned and no position embedding."""
    train_set, val_set = load_splits(cfg, train_set, val_set)

    def job(mode: str) -> Callable[[], RunResult]:
        variant = cfg.model_copy(update={"model": _model_variant(cfg.model, pe=mode)})
        out = cfg.out_path / f"pe-{mode}"
        return lambda: run_supervised(variant, train_set=train_set, val_set=val_set, out_dir=out)

    results = _run_grid([job(mode) for mode in PE_MODES])
    table = []
    for mode, result in zip(PE_MODES, results):
        row = _final_val(result)
        table.append(PEAblationRow(mode, float(row.acc1 or 0.0), float(row.acc5 or 0.0), row.loss))
    write_table(
        cfg.out_path / "pe_ablation.csv",
        ("pe", "acc1", "acc5", "loss"),
        [(r.pe, r.acc1, r.acc5, r.loss) for r in table],
    )
    return table


@dataclass
class PermutationRow:
    swaps: int
    delta: Optional[int]
    acc1: float
    acc5: float
    delta_acc1: float
    permutation_file: Optional[str] = None


def run_permutation_study(
    cfg: ExperimentConfig,
    T_list: Optional[Sequence[int]] = None,
    delta_list: Optional[Sequence[Optional[int]]] = None,
    train_set: Optional[Dataset] = None,
    val_set: Optional[Dataset] = None,
) -> list[PermutationRow]:
    """Train on images corrupted by one shared permutation per (T, δ).

    The baseline (T = 0) is trained once and reported for every δ. Each
    permutation is written to disk, re-read and validated before training;
    the model applies it to training and evaluation images alike.
    """
    swaps_list = list(T_list if T_list is not None else cfg.T_list or [])
    deltas = list(delta_list if delta_list is not None else cfg.delta_list or [None])
    train_set, val_set = load_splits(cfg, train_set, val_set)
    size = cfg.model.image_size
    perm_seed = cfg.model.permutation.seed if cfg.model.permutation is not None else cfg.seed
    patch = cfg.model.patch_size

    points: list[tuple[int, Optional[int]]] = [(0, None)]
    points += [(t, d) for t in swaps_list if t > 0 for d in deltas]

    perm_dir = cfg.out_path / "permutations"
    perm_files: dict[tuple[int, Optional[int]], Path] = {}
    for swaps, delta in points:
        perm = generate_permutation(size, size, swaps, delta, perm_seed)
        path = perm.save(perm_dir / f"perm_T{swaps}_d{delta_label(delta)}.txt")
        PermutationMap.load(path)
        perm_files[(swaps, delta)] = path

    def job(swaps: int, delta: Optional[int]) -> Callable[[], RunResult]:
        spec = PermutationSpec(swaps=swaps, delta=delta, seed=perm_seed, path=str(perm_files[(swaps, delta)]))
        model_cfg = _model_variant(
            cfg.model, tokenizer="permuted-patch", patch_size=patch, permutation=spec.model_dump()
        )
        variant = cfg.model_copy(update={"model": model_cfg})
        out = cfg.out_path / f"T{swaps}_d{delta_label(delta)}"
        return lambda: run_supervised(variant, train_set=train_set, val_set=val_set, out_dir=out)

    results = dict(zip(points, _run_grid([job(t, d) for t, d in points])))
    base = _final_val(results[(0, None)])
    base_acc1 = float(base.acc1 or 0.0)
    table: list[PermutationRow] = []
    for swaps in sorted(set([0] + swaps_list)):
        for delta in deltas:
            key = (0, None) if swaps == 0 else (swaps, delta)
            row = _final_val(results[key])
            acc1 = float(row.acc1 or 0.0)
            table.append(
                PermutationRow(swaps, delta, acc1, float(row.acc5 or 0.0), acc1 - base_acc1, str(perm_files[key]))
            )
    write_table(
        cfg.out_path / "permutation_study.csv",
        ("T", "delta", "acc1", "acc5", "delta_acc1"),
        [(r.swaps, delta_label(r.delta), r.acc1, r.acc5, r.delta_acc1) for r in table],
    )
    return table


@dataclass
class TrendRow:
    patch_size: int
    input_size: int
    seq_len: int
    acc1: float
    acc5: float


def trend_grid(trend: TrendConfig) -> list[tuple[int, int]]:
    """(input size, patch size) pairs; always ends with the p = 1 point."""
    patches = list(trend.patch_sizes)
    if 1 not in patches:
        patches.append(1)
    if trend.mode == "fixed_sequence_length":
        return [(trend.sequence_side * p, p) for p in patches]
    bad = [p for p in patches if trend.input_size % p]
    if bad:
        raise ConfigError(f"patch sizes {bad} do not divide input size {trend.input_size}")
    return [(trend.input_size, p) for p in patches]


def run_trend_sweep(
    cfg: ExperimentConfig,
    mode: Optional[str] = None,
    grid: Optional[Sequence[tuple[int, int]]] = None,
) -> list[TrendRow]:
    """Accuracy as patch size shrinks, at fixed sequence length or fixed input size."""
    if cfg.trend is None and grid is None:
        raise ConfigError("trend_sweep requires a trend section")
    trend = cfg.trend or TrendConfig()
    if mode is not None:
        trend = trend.model_copy(update={"mode": mode})
    points = list(grid) if grid is not None else trend_grid(trend)

    def job(input_size: int, patch: int) -> Callable[[], RunResult]:
        model_cfg = _model_variant(
            cfg.model, image_size=input_size, patch_size=patch, tokenizer="pixel" if patch == 1 else "patch"
        )
        variant = cfg.model_copy(
            update={"model": model_cfg, "dataset": cfg.dataset.model_copy(update={"image_size": input_size})}
        )
        return lambda: run_supervised(variant, out_dir=cfg.out_path / f"in{input_size}_p{patch}")

    results = _run_grid([job(s, p) for s, p in points])
    table = []
    for (input_size, patch), result in zip(points, results):
        row = _final_val(result)
        seq_len = (input_size // patch) ** 2
        table.append(TrendRow(patch, input_size, seq_len, float(row.acc1 or 0.0), float(row.acc5 or 0.0)))
    write_table(
        cfg.out_path / "trend_sweep.csv",
        ("patch_size", "input_size", "seq_len", "acc1", "acc5"),
        [(r.patch_size, r.input_size, r.seq_len, r.acc1, r.acc5) for r in table],
    )
    return table


class _Diverged(Exception):
    pass


@dataclass
class LRCurve:
    lr: float
    losses: list[float]
    diverged: bool
    path: Path

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def lr_label(lr: float) -> str:
    return f"{lr:.0e}" if lr else "0"


def run_lr_sweep(
    cfg: ExperimentConfig,
    lr_list: Optional[Sequence[float]] = None,
    max_epochs: Optional[int] = None,
    train_set: Optional[Dataset] = None,
    val_set: Optional[Dataset] = None,
) -> list[LRCurve]:
    """Per-step loss curves for each peak learning rate, flagging divergence.

    A run diverges when a forward op produces a non-finite value or the loss
    exceeds ``divergence_factor`` times the first step's loss; training
    stops there and the curve is written up to that step.
    """
    lrs = list(lr_list if lr_list is not None else cfg.lr_list or [])
    train_set, val_set = load_splits(cfg, train_set, val_set)

    def job(lr: float) -> Callable[[], LRCurve]:
        def run() -> LRCurve:
            variant = cfg.model_copy(update={"optimizer": cfg.optimizer.model_copy(update={"lr": lr})})
            out = cfg.out_path / f"lr-{lr_label(lr)}"
            trainer = Trainer(variant, out, train_set, val_set)
            curve: list[tuple[int, float, float]] = []

            def track(step: int, loss: float, step_lr: float) -> None:
                curve.append((step, loss, step_lr))
                if not math.isfinite(loss) or loss > cfg.divergence_factor * curve[0][1]:
                    raise _Diverged()

            trainer.step_hooks.append(track)
            diverged = False
            try:
                trainer.fit(max_epochs=max_epochs)
            except (_Diverged, NonFiniteError):
                diverged = True
                logger.warning("lr %s diverged after %d steps", lr, len(curve))
            path = write_table(cfg.out_path / f"lr_{lr_label(lr)}.csv", ("step", "loss", "lr"), curve)
            return LRCurve(lr, [loss for _, loss, _ in curve], diverged, path)

        return run

    curves = _run_grid([job(lr) for lr in lrs])
    write_table(
        cfg.out_path / "lr_sweep.csv",
        ("lr", "diverged", "steps", "final_loss"),
        [(c.lr, int(c.diverged), len(c.losses), c.final_loss) for c in curves],
    )
    return curves


def run_study(cfg: ExperimentConfig, resume: bool = False) -> Any:
    """Dispatch on ``cfg.study``."""
    if cfg.study == "supervised":
        return run_supervised(cfg, resume=resume)
    if cfg.study == "mae_pretrain":
        return run_mae_pretrain(cfg, resume=resume)
    if cfg.study == "mae_finetune":
        return run_mae_finetune(cfg)
    if cfg.study == "pe_ablation":
        return run_pe_ablation(cfg)
    if cfg.study == "permutation_study":
        return run_permutation_study(cfg)
    if cfg.study == "trend_sweep":
        return run_trend_sweep(cfg)
    if cfg.study == "lr_sweep":
        return run_lr_sweep(cfg)
    raise ConfigError(f"unknown study {cfg.study!r}")
