import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lesionmt.data import Dataset, Sample
from lesionmt.errors import EvaluationError, MetricInputError, UndefinedAUCError
from lesionmt.metrics import (
    EvalReport,
    Prediction,
    aggregate_reports,
    auc,
    auc_fraction,
    evaluate,
    jaccard,
    read_submission,
    write_submission,
)
from lesionmt.rng import RngState


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = Fraction(0)
    for p, n in itertools.product(pos, neg):
        total += 1 if p > n else Fraction(1, 2) if p == n else 0
    return total / (len(pos) * len(neg))


def pixel_count_jaccard(a, b):
    inter = union = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += x and y
        union += x or y
    return 1.0 if union == 0 else inter / union


def test_worked_auc_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_all_tied_scores():
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_perfect_and_reversed():
    assert auc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auc([4, 3, 2, 1], [0, 0, 1, 1]) == 0.0


def test_auc_oracle_random_with_ties():
    rng = RngState(2017)
    for trial in range(100):
        n = int(rng.integers(2, 51))
        # coarse grid forces ties; make sure both classes appear
        scores = (np.floor(rng.uniform(n) * 8) / 8).tolist()
        labels = (rng.uniform(n) < 0.4).astype(int)
        labels[0], labels[1] = 0, 1
        assert auc_fraction(scores, labels) == pair_count_auc(scores, labels), trial


@given(st.lists(st.tuples(st.floats(-10, 10), st.integers(0, 1)), min_size=2, max_size=30))
def test_flipping_labels_complements(pairs):
    scores, labels = zip(*pairs)
    if len(set(labels)) < 2:
        return
    flipped = [1 - y for y in labels]
    assert auc_fraction(scores, labels) + auc_fraction(scores, flipped) == 1


@given(st.lists(st.tuples(st.integers(-20, 20), st.integers(0, 1)), min_size=2, max_size=30))
def test_monotone_transform_invariance(pairs):
    scores, labels = zip(*pairs)
    if len(set(labels)) < 2:
        return
    warped = [np.tanh(s / 7) * 3 + 1 for s in scores]
    assert auc_fraction(scores, labels) == auc_fraction(warped, labels)


def test_auc_undefined_and_bad_input():
    with pytest.raises(UndefinedAUCError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricInputError):
        auc([0.1, 0.2], [0, 2])
    with pytest.raises(MetricInputError):
        auc([0.1], [0, 1])
    with pytest.raises(MetricInputError):
        auc([float("nan"), 0.2], [0, 1])


def test_jaccard_example():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[0, :4] = 1
    b[0, 2:] = 1
    b[1, :2] = 1
    assert jaccard(a, b) == 2 / 6


def test_jaccard_empty_and_errors():
    z = np.zeros((3, 3))
    assert jaccard(z, z) == 1.0
    assert jaccard(np.ones((3, 3)), z) == 0.0
    with pytest.raises(MetricInputError):
        jaccard(np.full((3, 3), 0.5), z)
    with pytest.raises(MetricInputError):
        jaccard(np.zeros((3, 4)), z)


def test_jaccard_oracle_random():
    rng = RngState(16)
    for _ in range(100):
        density = rng.uniform(2)
        a = (rng.uniform((16, 16)) < density[0]).astype(int)
        b = (rng.uniform((16, 16)) < density[1]).astype(int)
        assert jaccard(a, b) == pixel_count_jaccard(a, b)


def tiny_dataset():
    samples = []
    for i, (m, k) in enumerate([(0, 0), (1, 0), (0, 1), (0, 0), (1, 0), (0, 1)]):
        mask = np.zeros((1, 2, 2))
        mask[0, 0, : 1 + i % 2] = 1
        samples.append(Sample(f"I{i}", np.zeros((3, 2, 2)), mask, m, k))
    return Dataset(samples)


def test_evaluate_report():
    ds = tiny_dataset()
    preds = [Prediction(s.id, s.mask, 0.9 * s.label_melanoma, 0.5) for s in ds]
    preds[0] = Prediction("I0", np.zeros((1, 2, 2)), 0.0, 0.5)
    r = evaluate(preds, ds)
    assert r.per_sample_jaccard == [0.0, 1, 1, 1, 1, 1]
    assert r.mean_jaccard == 5 / 6
    assert r.auc_melanoma == 1.0 and r.auc_sk == 0.5 and r.mean_auc == 0.75
    assert evaluate({p.id: p for p in reversed(preds)}, ds) == r


def scores_for_auc(labels, beat, tie):
    """Positives score 1; ``beat`` negatives score 2, ``tie`` score 1, the rest 0."""
    out, seen = [], 0
    for y in labels:
        if y:
            out.append(1.0)
        else:
            out.append(2.0 if seen < beat else 1.0 if seen < beat + tie else 0.0)
            seen += 1
    return out


def test_mean_auc_arithmetic_exact():
    # 25 melanoma, 25 SK, 100 nevus: each task has 125 negatives
    classes = [1] * 25 + [2] * 25 + [0] * 100
    ds = Dataset([Sample(f"I{i:03d}", np.zeros((3, 1, 1)), np.ones((1, 1, 1)), int(c == 1), int(c == 2)) for i, c in enumerate(classes)])
    mel = scores_for_auc([s.label_melanoma for s in ds], beat=15, tie=0)  # 1 - 15/125
    sk = scores_for_auc([s.label_sk for s in ds], beat=3, tie=1)  # 1 - 3.5/125
    r = evaluate([Prediction(s.id, s.mask, a, b) for s, a, b in zip(ds, mel, sk)], ds)
    assert (r.auc_melanoma, r.auc_sk, r.mean_auc) == (0.880, 0.972, 0.926)
    assert aggregate_reports([r, r]).mean_auc == 0.926
    # reports reloaded from JSON lose the exact values but still aggregate exactly
    assert aggregate_reports([EvalReport.from_dict(r.to_dict())]).mean_auc == 0.926


def test_evaluate_missing_prediction():
    ds = tiny_dataset()
    preds = [Prediction(s.id, s.mask, 0.5, 0.5) for s in ds][1:]
    with pytest.raises(EvaluationError, match="I0"):
        evaluate(preds, ds)


def test_aggregate_unweighted_mean():
    a = EvalReport(0.5, 0.6, 0.8, 0.7, [0.5, 0.5], 2)
    b = EvalReport(0.7, 0.9, 1.0, 0.95, [0.7], 1)
    agg = aggregate_reports([a, b])
    assert agg.mean_jaccard == 0.6
    assert agg.auc_melanoma == 0.75 and agg.auc_sk == 0.9
    assert agg.mean_auc == 0.825
    assert agg.n_samples == 3
    assert aggregate_reports([b, a]).mean_auc == agg.mean_auc


def test_submission_round_trip(tmp_path):
    preds = [
        Prediction("B", np.array([[[0, 1], [1, 1]]]), 1.0, 0.0),
        Prediction("A", None, 0.1234564, 2 / 3),
    ]
    path = tmp_path / "out" / "submission.csv"
    write_submission(preds, path)
    lines = path.read_text().splitlines()
    assert lines == ["image_id,melanoma,seborrheic_keratosis", "B,1.000000,0.000000", "A,0.123456,0.666667"]
    back = read_submission(path)
    assert list(back) == ["B", "A"]
    for p in preds:
        assert abs(back[p.id][0] - p.p_melanoma) <= 5e-7 and abs(back[p.id][1] - p.p_sk) <= 5e-7
    assert (tmp_path / "out" / "masks" / "B.pgm").exists()
    assert not (tmp_path / "out" / "masks" / "A.pgm").exists()


def test_read_submission_rejects_header(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("id,a,b\nx,0.1,0.2\n")
    with pytest.raises(EvaluationError):
        read_submission(p)
