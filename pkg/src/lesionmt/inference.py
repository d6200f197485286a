"""Prediction at original image resolution, optionally averaging several checkpoints."""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .data import Dataset, Sample, normalize, resize_bilinear, resize_nearest
from .errors import ConfigError
from .metrics import EvalReport, Prediction, evaluate
from .model import MultiTaskModel, forward, threshold_mask


def load_models(paths: Sequence[str]) -> list[MultiTaskModel]:
    if not paths:
        raise ConfigError("at least one checkpoint is required")
    models = [MultiTaskModel.load(p) for p in paths]
    sizes = {m.config.input_size for m in models}
    if len(sizes) > 1:
        raise ConfigError(f"checkpoints disagree on input size: {sorted(sizes)}")
    return models


def _model_input(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if image.shape[1:] != tuple(size):
        image = resize_bilinear(image, *size)
    return normalize(image)


def predict_images(
    models: Sequence[MultiTaskModel],
    images: Sequence[np.ndarray],
    batch_size: int = 16,
) -> list[tuple[np.ndarray, float, float]]:
    """(mask [1,H,W] uint8 at each image's own size, p_melanoma, p_sk) per image.

    Images are resized to the model input for inference. With several models
    the segmentation and class probabilities are averaged before thresholding.
    The mask is thresholded at model resolution, then resized back with
    nearest neighbour.
    """
    if not models:
        raise ConfigError("no models given")
    size = models[0].config.input_size
    results = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        x = np.stack([_model_input(np.asarray(im, dtype=np.float64), size) for im in chunk])
        seg = np.zeros((len(chunk), 1) + tuple(size))
        mel = np.zeros(len(chunk))
        sk = np.zeros(len(chunk))
        for m in models:
            out = forward(m, x)
            seg += out.seg_prob.value
            mel += out.p_melanoma.value
            sk += out.p_sk.value
            out.graph.release()
        k = len(models)
        masks = threshold_mask(seg / k)
        for i, im in enumerate(chunk):
            mask = masks[i]
            if mask.shape[1:] != im.shape[1:]:
                mask = resize_nearest(mask, *im.shape[1:])
            results.append((mask, float(mel[i] / k), float(sk[i] / k)))
    return results


def predict_samples(models: Sequence[MultiTaskModel], samples: Sequence[Sample], batch_size: int = 16) -> list[Prediction]:
    out = predict_images(models, [s.image for s in samples], batch_size)
    return [Prediction(s.id, mask, mel, sk) for s, (mask, mel, sk) in zip(samples, out)]


def evaluate_models(models: Sequence[MultiTaskModel], ds: Dataset, batch_size: int = 16) -> EvalReport:
    """Score against ground truth at each sample's original resolution."""
    return evaluate(predict_samples(models, ds.samples, batch_size), ds)
