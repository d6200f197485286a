"""Jaccard index, ROC AUC and the evaluation report.

AUC is the Mann-Whitney pair statistic: the fraction of (positive, negative)
pairs in which the positive scores higher, ties counting one half. It is
kept as an exact :class:`fractions.Fraction` internally, so averaged AUCs
are rounded to float64 once rather than accumulating rounding error.
"""
from __future__ import annotations

import csv
import json
import math
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import EvaluationError, MetricInputError, UndefinedAUCError


def _binary(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise MetricInputError(f"{name} must contain only 0 and 1")
    return m.astype(bool)


def jaccard(pred_mask, gt_mask) -> float:
    """|pred & gt| / |pred | gt|; two empty masks score 1.0."""
    p = _binary(pred_mask, "pred_mask")
    g = _binary(gt_mask, "gt_mask")
    if p.shape != g.shape:
        raise MetricInputError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def auc_fraction(scores: Sequence[float], labels: Sequence[int]) -> Fraction:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricInputError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricInputError("labels must be 0 or 1")
    if np.isnan(s).any():
        raise MetricInputError("scores contain NaN")
    pos = s[y == 1]
    neg = np.sort(s[y == 0])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUCError(f"AUC undefined with {pos.size} positive and {neg.size} negative labels")
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    # twice the Mann-Whitney U, as an exact integer
    twice_u = int(2 * below.sum() + (at_or_below - below).sum())
    return Fraction(twice_u, 2 * pos.size * neg.size)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via pair counting (ties count 0.5)."""
    return float(auc_fraction(scores, labels))


@dataclass
class Prediction:
    id: str
    mask: np.ndarray | None  # binary {0,1}
    p_melanoma: float
    p_sk: float


@dataclass
class EvalReport:
    mean_jaccard: float
    auc_melanoma: float
    auc_sk: float
    mean_auc: float
    per_sample_jaccard: list[float]
    n_samples: int
    # exact (melanoma, sk) AUCs when known; not serialized
    exact_auc: tuple[Fraction, Fraction] | None = field(default=None, repr=False, compare=False)

    def exact(self) -> tuple[Fraction, Fraction]:
        """Exact AUCs, or the shortest decimals that round-trip the stored floats."""
        if self.exact_auc is not None:
            return self.exact_auc
        return Fraction(repr(self.auc_melanoma)), Fraction(repr(self.auc_sk))

    def to_dict(self) -> dict:
        return {
            "mean_jaccard": self.mean_jaccard,
            "auc_melanoma": self.auc_melanoma,
            "auc_sk": self.auc_sk,
            "mean_auc": self.mean_auc,
            "per_sample_jaccard": list(self.per_sample_jaccard),
            "n_samples": self.n_samples,
        }

    def to_json(self, path: str | os.PathLike | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(**{k: d[k] for k in ("mean_jaccard", "auc_melanoma", "auc_sk", "mean_auc", "per_sample_jaccard", "n_samples")})


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def _index_predictions(preds) -> dict[str, Prediction]:
    if isinstance(preds, Mapping):
        return dict(preds)
    return {p.id: p for p in preds}


def evaluate(preds, ds) -> EvalReport:
    """Score predictions (sequence or id-keyed mapping of :class:`Prediction`) against ``ds``."""
    lookup = _index_predictions(preds)
    per_sample, mel_scores, sk_scores, mel_labels, sk_labels = [], [], [], [], []
    for s in ds:
        p = lookup.get(s.id)
        if p is None:
            raise EvaluationError(f"no prediction for sample {s.id!r}")
        if s.mask is None:
            raise EvaluationError(f"sample {s.id!r} has no ground-truth mask")
        if p.mask is None:
            raise EvaluationError(f"prediction for {s.id!r} has no mask")
        per_sample.append(jaccard(np.asarray(p.mask).reshape(s.mask.shape), s.mask))
        mel_scores.append(p.p_melanoma)
        sk_scores.append(p.p_sk)
        mel_labels.append(s.label_melanoma)
        sk_labels.append(s.label_sk)
    if not per_sample:
        raise EvaluationError("cannot evaluate an empty dataset")
    mel = auc_fraction(mel_scores, mel_labels)
    sk = auc_fraction(sk_scores, sk_labels)
    return EvalReport(
        mean_jaccard=_mean(per_sample),
        auc_melanoma=float(mel),
        auc_sk=float(sk),
        mean_auc=float((mel + sk) / 2),
        per_sample_jaccard=per_sample,
        n_samples=len(per_sample),
        exact_auc=(mel, sk),
    )


def aggregate_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Unweighted mean over folds; per-sample Jaccards are concatenated."""
    if not reports:
        raise EvaluationError("no reports to aggregate")
    k = len(reports)
    exact = [r.exact() for r in reports]
    mel = sum((e[0] for e in exact), Fraction(0)) / k
    sk = sum((e[1] for e in exact), Fraction(0)) / k
    per_sample = [j for r in reports for j in r.per_sample_jaccard]
    return EvalReport(
        mean_jaccard=_mean([r.mean_jaccard for r in reports]),
        auc_melanoma=float(mel),
        auc_sk=float(sk),
        mean_auc=float((mel + sk) / 2),
        per_sample_jaccard=per_sample,
        n_samples=len(per_sample),
        exact_auc=(mel, sk),
    )


SUBMISSION_HEADER = ("image_id", "melanoma", "seborrheic_keratosis")


def write_submission(preds, path: str | os.PathLike, mask_dir: str | os.PathLike | None = None) -> None:
    """Challenge-format CSV (6 decimals) plus one P5 mask per id.

    Masks go to ``mask_dir`` (default: a ``masks`` directory beside ``path``)
    as ``<id>.pgm`` with values {0, 255}. Rows keep the order of ``preds``.
    """
    from .data import write_mask

    preds = list(preds.values()) if isinstance(preds, Mapping) else list(preds)
    path = Path(path)
    mask_dir = path.parent / "masks" if mask_dir is None else Path(mask_dir)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(SUBMISSION_HEADER)
            for p in preds:
                w.writerow([p.id, f"{p.p_melanoma:.6f}", f"{p.p_sk:.6f}"])
        if any(p.mask is not None for p in preds):
            mask_dir.mkdir(parents=True, exist_ok=True)
            for p in preds:
                if p.mask is not None:
                    write_mask(mask_dir / f"{p.id}.pgm", np.asarray(p.mask).reshape((1,) + np.asarray(p.mask).shape[-2:]))
    except OSError as exc:
        raise OSError(f"failed to write submission to {path}: {exc}") from exc


def read_submission(path: str | os.PathLike) -> dict[str, tuple[float, float]]:
    """Parse a submission CSV back into {image_id: (p_melanoma, p_sk)}."""
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(h.strip() for h in header) != SUBMISSION_HEADER:
            raise EvaluationError(f"{path}: unexpected header {header}")
        return {row[0]: (float(row[1]), float(row[2])) for row in reader if row}
