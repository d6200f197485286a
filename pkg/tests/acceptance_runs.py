"""The training runs behind acceptance criteria 4-6.

Each run returns a JSON-compatible dict of every number it reports, so the
determinism check can rerun them in a fresh interpreter and compare:

    python tests/acceptance_runs.py c4 c5 c6
"""
from __future__ import annotations

import hashlib
import json
import sys
import time

from lesionmt.data import make_folds
from lesionmt.model import ModelConfig
from lesionmt.synth import SynthConfig, generate
from lesionmt.train import TrainConfig, evaluate_model, run_ablation, train_fold, train_model


def params_digest(model) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].tobytes())
    return h.hexdigest()


def generalization_dataset():
    """250 samples (seed 2); fold 0 of the 5-way split is a 200/50 train/validation split."""
    return make_folds(generate(SynthConfig(count=250, seed=2)), 5, 0)


def run_c4() -> dict:
    ds = generate(SynthConfig(count=8, seed=1))
    cfg = TrainConfig(epochs=200, augment_enabled=False)
    t0 = time.process_time()
    res = train_model(ds.samples, ModelConfig(), cfg)
    report = evaluate_model(res.model, ds)
    return {
        "cpu_seconds": time.process_time() - t0,
        "report": report.to_dict(),
        "loss_curve": res.loss_curve,
        "params": params_digest(res.model),
    }


def run_c5() -> dict:
    ds = generalization_dataset()
    t0 = time.process_time()
    res = train_fold(ds, 0, ModelConfig(), TrainConfig())
    return {
        "cpu_seconds": time.process_time() - t0,
        "n_train": len(res.train_ids),
        "n_val": len(res.val_ids),
        "report": res.val_report.to_dict(),
        "loss_curve": res.train_loss_curve,
        "params": params_digest(res.model),
    }


def run_c6() -> dict:
    ds = generalization_dataset()
    t0 = time.process_time()
    table = run_ablation(ds, ModelConfig(), TrainConfig(), folds=[0])
    return {
        "cpu_seconds": time.process_time() - t0,
        "table": table.to_dict(),
        "text": table.format(),
        "curves": {m: cv.folds[0].train_loss_curve for m, cv in table.results.items()},
        "reports": {m: cv.aggregate.to_dict() for m, cv in table.results.items()},
    }


RUNS = {"c4": run_c4, "c5": run_c5, "c6": run_c6}


def without_timing(result: dict) -> dict:
    return {k: v for k, v in result.items() if k != "cpu_seconds"}


if __name__ == "__main__":
    out = {name: RUNS[name]() for name in sys.argv[1:]}
    json.dump(out, sys.stdout)
