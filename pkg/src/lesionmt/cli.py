"""``lesionmt`` command-line interface.

Settings resolve in three layers: built-in defaults, then the optional JSON
config file (sections ``model``, ``train``, ``synth``), then flags.
"""
from __future__ import annotations

import contextlib
import json
import logging
import sys
from pathlib import Path

import click

from .data import load_dataset, make_folds, read_image, save_dataset
from .errors import ConfigError, LesionMTError
from .gradcheck import DEFAULT_INSTANCES, DEFAULT_STEP, DEFAULT_TOLERANCE, run_gradcheck
from .inference import evaluate_models, load_models, predict_images
from .metrics import Prediction, write_submission
from .model import ModelConfig
from .synth import SynthConfig, class_separability_check, generate
from .train import TrainConfig, cross_validate, run_ablation, train_model

CONFIG_SECTIONS = ("model", "train", "synth")
_MODEL = ModelConfig()
_TRAIN = TrainConfig()
_SYNTH = SynthConfig()


class SizeType(click.ParamType):
    """``64`` or ``64x48`` (height x width)."""

    name = "HxW"

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value
        try:
            parts = [int(v) for v in str(value).lower().split("x")]
        except ValueError:
            self.fail(f"{value!r} is not a size like 64 or 64x48", param, ctx)
        if len(parts) == 1:
            parts *= 2
        if len(parts) != 2 or min(parts) < 1:
            self.fail(f"{value!r} is not a size like 64 or 64x48", param, ctx)
        return tuple(parts)


SIZE = SizeType()


def _size_str(size) -> str:
    return f"{size[0]}x{size[1]}"


def _triple(t) -> str:
    return " ".join(f"{v:g}" for v in t)


def read_config(path: str | None) -> dict[str, dict]:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}; expected {list(CONFIG_SECTIONS)}")
    for k, v in data.items():
        if not isinstance(v, dict):
            raise ConfigError(f"{path}: section {k!r} must be an object")
    return data


def _merge(section: dict, overrides: dict) -> dict:
    out = dict(section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def resolve_model(cfg: dict, **flags) -> ModelConfig:
    return ModelConfig.from_dict(_merge(cfg.get("model", {}), flags))


def resolve_train(cfg: dict, **flags) -> TrainConfig:
    return TrainConfig.from_dict(_merge(cfg.get("train", {}), flags))


def resolve_synth(cfg: dict, **flags) -> SynthConfig:
    return SynthConfig(**_merge(cfg.get("synth", {}), flags))


@contextlib.contextmanager
def _reporting_errors():
    """Print library and I/O errors to stderr and exit 1."""
    try:
        yield
    except (LesionMTError, OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


def config_option(f):
    return click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="JSON config file.")(f)


def model_options(f):
    opts = [
        click.option("--input-size", type=SIZE, show_default=_size_str(_MODEL.input_size), help="Model input size."),
        click.option("--base-channels", type=int, show_default=str(_MODEL.base_channels), help="Channels of the first encoder stage."),
        click.option("--stages", type=int, show_default=str(_MODEL.stages), help="Encoder/decoder depth."),
        click.option(
            "--inception/--no-inception",
            "inception_enabled",
            default=None,
            show_default=str(_MODEL.inception_enabled).lower(),
            help="Parallel 1x1/3x3 blocks instead of stacked 3x3 convs.",
        ),
        click.option(
            "--seg-feeds-heads/--no-seg-feeds-heads",
            default=None,
            show_default=str(_MODEL.seg_feeds_heads).lower(),
            help="Feed the pooled segmentation map into the classifiers.",
        ),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def train_options(f):
    opts = [
        click.option("--epochs", type=int, show_default=str(_TRAIN.epochs)),
        click.option("--batch-size", type=int, show_default=str(_TRAIN.batch_size)),
        click.option("--lr", "learning_rate", type=float, show_default=f"{_TRAIN.learning_rate:g}", help="Learning rate."),
        click.option("--optimizer", type=click.Choice(["adam", "sgd"]), show_default=_TRAIN.optimizer),
        click.option("--seed", type=int, show_default=str(_TRAIN.seed), help="Seed for init, shuffling, augmentation and folds."),
        click.option(
            "--loss-weights",
            type=(float, float, float),
            default=None,
            show_default=_triple(_MODEL.loss_weights),
            help="Segmentation, melanoma and SK loss weights.",
        ),
        click.option(
            "--class-weights",
            type=(float, float),
            default=None,
            show_default=_triple(_TRAIN.class_weights),
            help="Positive-class weights for melanoma and SK.",
        ),
        click.option("--augment/--no-augment", "augment_enabled", default=None, show_default=str(_TRAIN.augment_enabled).lower()),
        click.option("--lr-schedule", type=click.Choice(["constant", "cosine"]), show_default=_TRAIN.lr_schedule),
        click.option("--early-stopping-patience", type=int, show_default="off", help="Epochs without training-loss improvement."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _split_flags(kw: dict) -> tuple[dict, dict]:
    model_keys = {"input_size", "base_channels", "stages", "inception_enabled", "seg_feeds_heads"}
    model = {k: kw.pop(k) for k in list(kw) if k in model_keys}
    train_keys = {
        "epochs", "batch_size", "learning_rate", "optimizer", "seed", "loss_weights",
        "class_weights", "augment_enabled", "lr_schedule", "early_stopping_patience",
    }  # fmt: skip
    train = {k: kw.pop(k) for k in list(kw) if k in train_keys}
    return model, train


def _configs(config_path, kw) -> tuple[ModelConfig, TrainConfig]:
    cfg = read_config(config_path)
    model_flags, train_flags = _split_flags(kw)
    model_cfg = resolve_model(cfg, **model_flags)
    train_cfg = resolve_train(cfg, **train_flags)
    return model_cfg, train_cfg


def _echo_epoch(epoch: int, loss: float) -> None:
    click.echo(f"  epoch {epoch + 1}: loss {loss:.6f}", err=True)


@click.group(context_settings={"help_option_names": ["-h", "--help"], "show_default": True})
@click.option("-v", "--verbose", is_flag=True, default=False, help="Debug logging.")
@click.version_option(package_name="lesionmt")
def main(verbose: bool) -> None:
    """Joint lesion segmentation and melanoma / seborrheic keratosis classification."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@config_option
@click.option("--count", type=int, show_default=str(_SYNTH.count), help="Number of samples.")
@click.option("--seed", type=int, show_default=str(_SYNTH.seed))
@click.option("--size", type=SIZE, show_default=_size_str(_SYNTH.size), help="Image size.")
@click.option("--class-mix", type=(float, float, float), default=None, show_default=_triple(_SYNTH.class_mix), help="Nevus, melanoma, SK probabilities.")
@click.option("--area-range", "lesion_area_range", type=(float, float), default=None, show_default=_triple(_SYNTH.lesion_area_range), help="Lesion area fraction bounds.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output dataset directory.")
def synth(config_path, out_dir, **flags):
    """Generate a synthetic dataset and check it is learnable."""
    with _reporting_errors():
        cfg = resolve_synth(read_config(config_path), **flags)
        ds = generate(cfg)
        save_dataset(ds, out_dir)
        Path(out_dir, "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
        report = class_separability_check(ds)
        counts = ds.class_counts()
        click.echo(f"wrote {len(ds)} samples to {out_dir} (nevus {counts[0]}, melanoma {counts[1]}, SK {counts[2]})")
        click.echo(str(report))
        if not report.learnable:
            click.echo("error: generated data fails the separability check", err=True)
            sys.exit(1)


@main.command()
@config_option
@model_options
@train_options
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True, help="Dataset directory.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Directory for model.lmtk and train.json.")
def train(config_path, data_dir, out_dir, **kw):
    """Train one model on a whole dataset."""
    with _reporting_errors():
        model_cfg, train_cfg = _configs(config_path, kw)
        ds = load_dataset(data_dir, size=model_cfg.input_size)
        res = train_model(ds.samples, model_cfg, train_cfg, on_epoch=_echo_epoch)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        res.model.save(out / "model.lmtk")
        summary = {"train": train_cfg.to_dict(), "model": res.model.config.to_dict(), "train_loss_curve": res.loss_curve}
        (out / "train.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        click.echo(f"saved {out / 'model.lmtk'} (final loss {res.loss_curve[-1]:.6f})")


def _fold_option(f):
    f = click.option("--jobs", type=int, default=1, help="Folds trained in parallel processes.")(f)
    return click.option("--fold", "folds", type=click.IntRange(0, 4), multiple=True, help="Run only these folds (repeatable). [default: all]")(f)


@main.command()
@config_option
@model_options
@train_options
@_fold_option
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True, help="Dataset directory.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Checkpoint and report directory.")
def cv(config_path, data_dir, out_dir, folds, jobs, **kw):
    """Stratified 5-fold cross-validation."""
    with _reporting_errors():
        model_cfg, train_cfg = _configs(config_path, kw)
        train_cfg = train_cfg.replace(checkpoint_dir=out_dir)
        ds = make_folds(load_dataset(data_dir, size=model_cfg.input_size), 5, train_cfg.seed)
        result = cross_validate(ds, model_cfg, train_cfg, folds=folds or None, n_jobs=jobs)
        for f in result.folds:
            r = f.val_report
            click.echo(f"fold {f.fold_index}: Jaccard {r.mean_jaccard:.4f}  AUC mel {r.auc_melanoma:.4f}  AUC SK {r.auc_sk:.4f}  mean AUC {r.mean_auc:.4f}")
        a = result.aggregate
        click.echo(f"mean:   Jaccard {a.mean_jaccard:.4f}  AUC mel {a.auc_melanoma:.4f}  AUC SK {a.auc_sk:.4f}  mean AUC {a.mean_auc:.4f}")


@main.command()
@config_option
@model_options
@train_options
@_fold_option
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True, help="Dataset directory.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Checkpoint and report directory.")
def ablate(config_path, data_dir, out_dir, folds, jobs, **kw):
    """Multi-task vs segmentation-only vs classification-only on identical folds."""
    with _reporting_errors():
        model_cfg, train_cfg = _configs(config_path, kw)
        train_cfg = train_cfg.replace(checkpoint_dir=out_dir)
        ds = make_folds(load_dataset(data_dir, size=model_cfg.input_size), 5, train_cfg.seed)
        table = run_ablation(ds, model_cfg, train_cfg, folds=folds or None, n_jobs=jobs)
        click.echo(table.format())


@main.command("eval")
@click.option("--checkpoint", "checkpoints", type=click.Path(exists=True, dir_okay=False), multiple=True, required=True, help="Checkpoint; repeat to average several.")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True, help="Dataset directory with masks and labels.csv.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Write the report JSON here. [default: stdout only]")
@click.option("--batch-size", type=int, default=16)
def eval_cmd(checkpoints, data_dir, out_path, batch_size):
    """Score checkpoint(s) on a labelled dataset at original resolution."""
    with _reporting_errors():
        models = load_models(checkpoints)
        report = evaluate_models(models, load_dataset(data_dir), batch_size)
        text = report.to_json(out_path)
        summary = {k: v for k, v in json.loads(text).items() if k != "per_sample_jaccard"}
        click.echo(json.dumps(summary, indent=2))


def _list_images(input_dir: Path) -> list[Path]:
    base = input_dir / "images" if (input_dir / "images").is_dir() else input_dir
    return sorted(p for p in base.iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".png") and p.is_file())


@main.command()
@click.option("--checkpoint", "checkpoints", type=click.Path(exists=True, dir_okay=False), multiple=True, required=True, help="Checkpoint; repeat to average several.")
@click.option("--input", "input_dir", type=click.Path(exists=True, file_okay=False), required=True, help="Directory of images (or with an images/ subdirectory).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output directory for submission.csv and masks/.")
@click.option("--batch-size", type=int, default=16)
def predict(checkpoints, input_dir, out_dir, batch_size):
    """Predict masks and class probabilities for every image in a directory."""
    with _reporting_errors():
        models = load_models(checkpoints)
        paths = _list_images(Path(input_dir))
        failed: list[tuple[Path, str]] = []
        ids, images = [], []
        for p in paths:
            try:
                img = read_image(p)
            except (LesionMTError, OSError) as exc:
                failed.append((p, str(exc)))
                continue
            ids.append(p.stem)
            images.append(img.repeat(3, axis=0) if img.shape[0] == 1 else img)
        results = predict_images(models, images, batch_size)
        preds = [Prediction(i, mask, mel, sk) for i, (mask, mel, sk) in zip(ids, results)]
        out = Path(out_dir)
        write_submission(preds, out / "submission.csv", out / "masks")
        click.echo(f"wrote {len(preds)} predictions to {out}")
        if failed:
            for p, msg in failed:
                click.echo(f"error: {p}: {msg}", err=True)
            click.echo(f"error: {len(failed)} of {len(paths)} images failed", err=True)
            sys.exit(1)


@main.command()
@click.option("--seed", type=int, default=0)
@click.option("--instances", type=int, default=DEFAULT_INSTANCES, help="Random instances per op.")
@click.option("--step", type=float, default=DEFAULT_STEP, help="Central-difference step.")
@click.option("--tolerance", type=float, default=DEFAULT_TOLERANCE, help="Maximum relative error.")
@click.option("--op", "ops", multiple=True, help="Check only these ops (repeatable). [default: all]")
def gradcheck(seed, instances, step, tolerance, ops):
    """Finite-difference check of every differentiable op."""
    with _reporting_errors():
        report = run_gradcheck(seed=seed, instances=instances, step=step, tolerance=tolerance, ops=ops or None)
        click.echo(report.format())
        if not report.passed:
            sys.exit(1)
