"""Optimisers, the joint training loop, cross-validation and the ablation study."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, Sample, dihedral, make_folds, sample_key, stack_samples
from .errors import ConfigError, DivergenceError, LesionMTError
from .inference import evaluate_models
from .metrics import EvalReport, aggregate_reports
from .model import ModelConfig, MultiTaskModel, build_model, forward, joint_loss
from .rng import RngState

log = logging.getLogger(__name__)

# stream tags keep the rng streams used for different purposes disjoint
_SHUFFLE = 1
_AUGMENT = 2

ABLATION_METHODS = (
    ("multi-task", (1.0, 1.0, 1.0)),
    ("seg-only", (1.0, 0.0, 0.0)),
    ("cls-only", (0.0, 1.0, 1.0)),
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss_weights: tuple[float, float, float] | None = None  # None: use the model config's
    class_weights: tuple[float, float] = (1.0, 1.0)  # positive-class weights, melanoma / SK
    augment_enabled: bool = True
    checkpoint_dir: str | None = None
    lr_schedule: str = "constant"  # or "cosine"
    early_stopping_patience: int | None = None  # on training loss; None disables
    eval_batch_size: int = 16

    def __post_init__(self):
        if self.loss_weights is not None:
            object.__setattr__(self, "loss_weights", tuple(float(v) for v in self.loss_weights))
        object.__setattr__(self, "class_weights", tuple(float(v) for v in self.class_weights))
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be a non-negative real, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.loss_weights is not None:
            if len(self.loss_weights) != 3 or min(self.loss_weights) < 0 or max(self.loss_weights) <= 0:
                raise ConfigError(f"loss_weights must be three non-negative reals, one positive; got {self.loss_weights}")
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ConfigError(f"class_weights must be two positive reals, got {self.class_weights}")
        if self.early_stopping_patience is not None and self.early_stopping_patience < 1:
            raise ConfigError("early_stopping_patience must be positive or null")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("loss_weights", "class_weights"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, p in params.items():
            p -= self.lr * grads[k]


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


@dataclass
class Batch:
    images: np.ndarray  # normalized [n, 3, H, W]
    masks: np.ndarray  # [n, 1, H, W]
    mel: np.ndarray  # [n]
    sk: np.ndarray  # [n]
    ids: list[str] = field(default_factory=list)


def effective_loss_weights(model_cfg: ModelConfig, train_cfg: TrainConfig) -> tuple[float, float, float]:
    return train_cfg.loss_weights if train_cfg.loss_weights is not None else model_cfg.loss_weights


def train_step(m: MultiTaskModel, batch: Batch, opt, cfg: TrainConfig, epoch: int | None = None, step: int | None = None):
    """forward -> joint loss -> backward -> update -> zero gradients.

    Returns ``(opt, loss)``.
    """
    weights = effective_loss_weights(m.config, cfg)
    needed = [t for t, w in zip(("seg", "mel", "sk"), weights) if w > 0]
    out = forward(m, batch.images, outputs=needed)
    try:
        loss_node = joint_loss(out, batch.masks, batch.mel, batch.sk, weights, cfg.class_weights)
        loss = float(loss_node.value[0])
        if not math.isfinite(loss):
            m.zero_grad()
            raise DivergenceError(f"non-finite training loss {loss}", epoch=epoch, step=step)
        loss_node.backward()
    finally:
        out.graph.release()
    for task, w in zip(("seg", "mel", "sk"), weights):
        if w == 0:
            for name in m.exclusive_params(task):
                if np.any(m.grads[name]):
                    raise RuntimeError(f"parameter {name} of zero-weight task {task!r} received a gradient")
    opt.step(m.params, m.grads)
    m.zero_grad()
    return opt, loss


def _augment_arrays(image: np.ndarray, mask: np.ndarray, seed: int, epoch: int, sample_id: str):
    rng = RngState(seed, _AUGMENT, epoch, sample_key(sample_id))
    # non-square inputs only get the shape-preserving half of the group
    k = int(rng.integers(0, 8)) if image.shape[-1] == image.shape[-2] else 2 * int(rng.integers(0, 4))
    return dihedral(image, k), dihedral(mask, k)


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    return cfg.learning_rate


@dataclass
class TrainResult:
    model: MultiTaskModel
    loss_curve: list[float]
    trained_ids: list[str]  # every id that appeared in a training batch


def train_model(
    samples: Sequence[Sample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train a fresh model on ``samples``.

    Samples are ordered by id before the seeded per-epoch shuffle, so the
    result does not depend on the order they are passed in.
    """
    weights = effective_loss_weights(model_cfg, train_cfg)
    model_cfg = model_cfg.replace(loss_weights=weights)
    samples = sorted(samples, key=lambda s: s.id)
    if not samples:
        raise ConfigError("no training samples")
    if train_cfg.batch_size > len(samples):
        raise ConfigError(f"batch_size {train_cfg.batch_size} exceeds training-set size {len(samples)}")
    ids = [s.id for s in samples]
    images, masks, mel, sk = stack_samples(samples, model_cfg.input_size)
    model = build_model(model_cfg, train_cfg.seed)
    opt = make_optimizer(train_cfg)
    curve: list[float] = []
    seen: set[str] = set()
    best, stale = math.inf, 0
    step = 0
    for epoch in range(train_cfg.epochs):
        opt.lr = _lr_at(train_cfg, epoch)
        order = RngState(train_cfg.seed, _SHUFFLE, epoch).permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            bi, bm = images[idx], masks[idx]
            if train_cfg.augment_enabled:
                pairs = [_augment_arrays(images[i], masks[i], train_cfg.seed, epoch, ids[i]) for i in idx]
                bi = np.stack([p[0] for p in pairs])
                bm = np.stack([p[1] for p in pairs])
            batch = Batch(bi, bm, mel[idx], sk[idx], [ids[i] for i in idx])
            seen.update(batch.ids)
            _, loss = train_step(model, batch, opt, train_cfg, epoch=epoch, step=step)
            total += loss * len(idx)
            step += 1
        epoch_loss = total / len(samples)
        curve.append(epoch_loss)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        if train_cfg.early_stopping_patience is not None:
            if epoch_loss < best - 1e-12:
                best, stale = epoch_loss, 0
            else:
                stale += 1
                if stale >= train_cfg.early_stopping_patience:
                    break
    return TrainResult(model, curve, sorted(seen))


def evaluate_model(model: MultiTaskModel, ds: Dataset, batch_size: int = 16) -> EvalReport:
    return evaluate_models([model], ds, batch_size)


@dataclass
class FoldResult:
    fold_index: int
    val_report: EvalReport
    train_loss_curve: list[float]
    checkpoint_path: str | None
    train_ids: list[str]
    val_ids: list[str]
    model: MultiTaskModel | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "fold_index": self.fold_index,
            "val_report": self.val_report.to_dict(),
            "train_loss_curve": list(self.train_loss_curve),
            "checkpoint_path": self.checkpoint_path,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
        }


def train_fold(
    ds: Dataset,
    fold_index: int,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> FoldResult:
    """Train on every fold except ``fold_index`` and evaluate on it."""
    if ds.folds is None:
        raise ConfigError("dataset has no fold assignment; run make_folds first")
    val_ids = ds.fold_ids(fold_index)
    if not val_ids:
        raise ConfigError(f"fold {fold_index} is empty")
    lookup = ds.by_id()
    train_ids = sorted(i for i in ds.ids if ds.folds[i] != fold_index)
    overlap = set(train_ids) & set(val_ids)
    if overlap:
        raise RuntimeError(f"fold {fold_index}: ids in both training and validation: {sorted(overlap)[:5]}")
    try:
        res = train_model([lookup[i] for i in train_ids], model_cfg, train_cfg, on_epoch)
    except DivergenceError as exc:
        raise DivergenceError("training diverged", epoch=exc.epoch, step=exc.step, fold=fold_index) from exc
    if set(res.trained_ids) & set(val_ids):
        raise RuntimeError(f"fold {fold_index}: validation samples reached the training loop")
    report = evaluate_model(res.model, ds.subset(val_ids), train_cfg.eval_batch_size)
    ckpt = None
    if train_cfg.checkpoint_dir:
        out = Path(train_cfg.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = str(out / f"fold{fold_index}.lmtk")
        res.model.save(ckpt)
    result = FoldResult(fold_index, report, res.loss_curve, ckpt, res.trained_ids, val_ids, res.model)
    if train_cfg.checkpoint_dir:
        (Path(train_cfg.checkpoint_dir) / f"fold{fold_index}.json").write_text(
            json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    return result


class CrossValidationError(LesionMTError):
    def __init__(self, errors: dict[int, BaseException]):
        self.errors = errors
        detail = "; ".join(f"fold {k}: {type(e).__name__}: {e}" for k, e in sorted(errors.items()))
        super().__init__(f"{len(errors)} fold(s) failed: {detail}")


@dataclass
class CVResult:
    folds: list[FoldResult]
    aggregate: EvalReport

    def to_dict(self) -> dict:
        return {"folds": [f.to_dict() for f in self.folds], "aggregate": self.aggregate.to_dict()}


def _fold_job(args):
    ds, k, model_cfg, train_cfg = args
    res = train_fold(ds, k, model_cfg, train_cfg)
    res.model = None
    return res


def cross_validate(
    ds: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    folds: Sequence[int] | None = None,
    n_jobs: int = 1,
    k: int = 5,
) -> CVResult:
    """Train and evaluate every fold; the aggregate is the unweighted fold mean.

    Folds are assigned with :func:`make_folds` (seeded by ``train_cfg.seed``)
    when ``ds`` carries no assignment. ``folds`` restricts the run to a
    subset of fold indices. All fold errors are collected before raising.
    """
    if ds.folds is None:
        ds = make_folds(ds, k, train_cfg.seed)
    indices = list(range(k)) if folds is None else list(folds)
    results: dict[int, FoldResult] = {}
    errors: dict[int, BaseException] = {}
    if n_jobs > 1 and len(indices) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = {i: pool.submit(_fold_job, (ds, i, model_cfg, train_cfg)) for i in indices}
            for i, fut in futures.items():
                try:
                    results[i] = fut.result()
                except Exception as exc:  # collected, reported together below
                    errors[i] = exc
    else:
        for i in indices:
            try:
                results[i] = train_fold(ds, i, model_cfg, train_cfg)
            except Exception as exc:
                errors[i] = exc
    if errors:
        raise CrossValidationError(errors)
    ordered = [results[i] for i in indices]
    agg = aggregate_reports([r.val_report for r in ordered])
    if train_cfg.checkpoint_dir:
        agg.to_json(Path(train_cfg.checkpoint_dir) / "aggregate.json")
    return CVResult(ordered, agg)


@dataclass
class AblationRow:
    method: str
    loss_weights: tuple[float, float, float]
    jaccard: float | None
    auc_melanoma: float | None
    auc_sk: float | None
    mean_auc: float | None


@dataclass
class AblationTable:
    rows: list[AblationRow]
    fold_assignment: dict[str, int]
    results: dict[str, CVResult] = field(default_factory=dict, repr=False)

    COLUMNS = ("jaccard", "auc_melanoma", "auc_sk", "mean_auc")

    def row(self, method: str) -> AblationRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_dict(self) -> dict:
        return {
            "columns": list(self.COLUMNS),
            "rows": [
                {"method": r.method, "loss_weights": list(r.loss_weights), **{c: getattr(r, c) for c in self.COLUMNS}}
                for r in self.rows
            ],
        }

    def format(self) -> str:
        def cell(v):
            return "n/a" if v is None else f"{v:.4f}"

        head = f"{'method':<12} {'Jaccard':>8} {'AUC mel':>8} {'AUC SK':>8} {'mean AUC':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.method:<12} {cell(r.jaccard):>8} {cell(r.auc_melanoma):>8} {cell(r.auc_sk):>8} {cell(r.mean_auc):>9}"
            )
        return "\n".join(lines)


def run_ablation(
    ds: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    folds: Sequence[int] | None = None,
    n_jobs: int = 1,
) -> AblationTable:
    """Multi-task vs segmentation-only vs classification-only on identical folds and seeds.

    Metrics of a task that was not trained are reported as ``None``.
    """
    if ds.folds is None:
        ds = make_folds(ds, 5, train_cfg.seed)
    rows, results = [], {}
    for method, weights in ABLATION_METHODS:
        cfg = train_cfg.replace(loss_weights=weights)
        if train_cfg.checkpoint_dir:
            cfg = cfg.replace(checkpoint_dir=os.path.join(train_cfg.checkpoint_dir, method))
        cv = cross_validate(ds, model_cfg, cfg, folds=folds, n_jobs=n_jobs)
        results[method] = cv
        agg = cv.aggregate
        seg_on, cls_on = weights[0] > 0, weights[1] > 0 and weights[2] > 0
        rows.append(
            AblationRow(
                method,
                weights,
                agg.mean_jaccard if seg_on else None,
                agg.auc_melanoma if weights[1] > 0 else None,
                agg.auc_sk if weights[2] > 0 else None,
                agg.mean_auc if cls_on else None,
            )
        )
    table = AblationTable(rows, dict(ds.folds), results)
    if train_cfg.checkpoint_dir:
        Path(train_cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        (Path(train_cfg.checkpoint_dir) / "ablation.json").write_text(json.dumps(table.to_dict(), indent=2) + "\n")
    return table
