"""Procedural dermoscopy-like images with exact lesion masks.

Each lesion is a star-convex region whose boundary radius is a short
Fourier series in the polar angle. Border irregularity, fill colour and
texture depend on the diagnosis:

============  ===================  =====================================
class         |a_k| bound          appearance
============  ===================  =====================================
nevus         0.05                 dark brown, smooth, soft edge
melanoma      0.30                 near-black, darker off-centre blotch
SK            0.08                 tan with speckle, hard edge
============  ===================  =====================================

The mask is the set of pixel centres inside the boundary, so it is exact by
construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import Dataset, Sample
from .errors import ConfigError
from .metrics import auc
from .rng import RngState

MAX_RETRIES = 100
SKIN_RGB = (225.0, 190.0, 170.0)
_AMPLITUDE = {0: 0.05, 1: 0.30, 2: 0.08}
_FILL = {0: (120.0, 78.0, 55.0), 1: (52.0, 38.0, 42.0), 2: (188.0, 150.0, 110.0)}
_EDGE_WIDTH = {0: 2.5, 1: 2.5, 2: 0.35}


@dataclass(frozen=True)
class SynthConfig:
    count: int = 200
    size: tuple[int, int] = (64, 64)
    class_mix: tuple[float, float, float] = (0.5, 0.25, 0.25)  # nevus, melanoma, SK
    seed: int = 0
    lesion_area_range: tuple[float, float] = (0.05, 0.40)

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        object.__setattr__(self, "class_mix", tuple(float(v) for v in self.class_mix))
        object.__setattr__(self, "lesion_area_range", tuple(float(v) for v in self.lesion_area_range))
        self.validate()

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError(f"count must be positive, got {self.count}")
        if len(self.size) != 2 or min(self.size) < 8:
            raise ConfigError(f"size must be two extents >= 8, got {self.size}")
        if len(self.class_mix) != 3 or min(self.class_mix) < 0:
            raise ConfigError(f"class_mix must be three non-negative probabilities, got {self.class_mix}")
        if abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise ConfigError(f"class_mix must sum to 1, got {sum(self.class_mix)}")
        lo, hi = self.lesion_area_range
        if not 0 < lo < hi < 1:
            raise ConfigError(f"lesion_area_range must satisfy 0 < min < max < 1, got {self.lesion_area_range}")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "size": list(self.size),
            "class_mix": list(self.class_mix),
            "seed": self.seed,
            "lesion_area_range": list(self.lesion_area_range),
        }


def _boundary(theta: np.ndarray, r0: float, amps: np.ndarray, phases: np.ndarray) -> np.ndarray:
    r = np.ones_like(theta)
    for k in range(len(amps)):
        r = r + amps[k] * np.cos((k + 1) * theta + phases[k])
    return r0 * r


def rasterize(shape: tuple[int, int], center, r0, amps, phases) -> tuple[np.ndarray, np.ndarray]:
    """(mask, signed distance proxy r(theta) - d) on the pixel-centre grid."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy + 0.5 - center[0]
    dx = xx + 0.5 - center[1]
    d = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    margin = _boundary(theta, r0, amps, phases) - d
    return (margin >= 0).astype(np.float64), margin


@lru_cache(maxsize=8)
def _strata(seed: int, count: int) -> np.ndarray:
    return RngState(seed, 1).permutation(count)


def draw_class(index: int, cfg: SynthConfig, rng: RngState) -> int:
    """Stratified class draw.

    u = (perm[index] + v) / count with a seeded permutation and v ~ U(0,1):
    each sample's class is still marginally distributed as ``class_mix``, but
    class counts over the dataset land within one of their expectation.
    """
    stratum = int(_strata(cfg.seed, cfg.count)[index])
    u = (stratum + float(rng.uniform(1)[0])) / cfg.count
    acc = 0.0
    for i, p in enumerate(cfg.class_mix):
        acc += p
        if u < acc:
            return i
    return max(i for i, p in enumerate(cfg.class_mix) if p > 0)


def render_sample(index: int, cfg: SynthConfig) -> Sample:
    rng = RngState(cfg.seed, 0, index)
    cls = draw_class(index, cfg, rng)
    h, w = cfg.size
    lo, hi = cfg.lesion_area_range
    amp_bound = _AMPLITUDE[cls]

    for _ in range(MAX_RETRIES):
        frac = float(rng.uniform(1, lo, hi)[0])
        r0 = np.sqrt(frac * h * w / np.pi)
        center = (h / 2 + float(rng.uniform(1, -0.1, 0.1)[0]) * h, w / 2 + float(rng.uniform(1, -0.1, 0.1)[0]) * w)
        amps = rng.uniform(4, -amp_bound, amp_bound)
        if cls == 1:
            # keep the border visibly irregular: at least one strong low-order term
            amps[int(rng.integers(0, 2))] = np.copysign(float(rng.uniform(1, 0.18, 0.30)[0]), amps[0])
        phases = rng.uniform(4, 0.0, 2 * np.pi)
        theta = np.linspace(0, 2 * np.pi, 720, endpoint=False)
        if _boundary(theta, 1.0, amps, phases).min() < 0.25:
            continue
        mask, margin = rasterize((h, w), center, r0, amps, phases)
        area = mask.mean()
        if lo <= area <= hi:
            break
    else:
        raise RuntimeError(f"sample {index}: no lesion within area bounds after {MAX_RETRIES} attempts")

    skin = np.asarray(SKIN_RGB) + rng.uniform(3, -8, 8)
    image = skin[:, None, None] + rng.normal((3, h, w), 0.0, 3.0)

    fill = np.asarray(_FILL[cls]) + rng.uniform(3, -10, 10)
    lesion = np.broadcast_to(fill[:, None, None], (3, h, w)).copy()
    if cls == 0:
        lesion += rng.normal((1, h, w), 0.0, 3.0)
    elif cls == 1:
        ang = float(rng.uniform(1, 0, 2 * np.pi)[0])
        off = 0.35 * r0
        by, bx = center[0] + off * np.sin(ang), center[1] + off * np.cos(ang)
        yy, xx = np.mgrid[0:h, 0:w]
        blotch = np.hypot(yy + 0.5 - by, xx + 0.5 - bx) <= 0.45 * r0
        lesion[:, blotch] -= np.asarray([28.0, 22.0, 20.0])[:, None]
        lesion += rng.normal((1, h, w), 0.0, 4.0)
    else:
        lesion += rng.normal((1, h, w), 0.0, 16.0)
        dots = rng.uniform((h, w)) < 0.06
        lesion[:, dots] -= 45.0

    alpha = np.clip(margin / _EDGE_WIDTH[cls] + 0.5, 0.0, 1.0)
    image = alpha * lesion + (1.0 - alpha) * image
    image = np.clip(np.round(image), 0, 255)
    return Sample(
        id=f"SYN_{index:06d}",
        image=image,
        mask=mask[None],
        label_melanoma=int(cls == 1),
        label_sk=int(cls == 2),
    )


def generate(cfg: SynthConfig, indices=None) -> Dataset:
    """Deterministic synthetic dataset.

    Sample i depends only on (seed, count, i), so any subset of ``indices``
    rendered separately matches the corresponding part of a full run.
    """
    cfg.validate()
    idx = range(cfg.count) if indices is None else indices
    return Dataset([render_sample(i, cfg) for i in idx])


@dataclass
class SeparabilityReport:
    auc_melanoma: float | None
    auc_sk: float | None
    threshold: float
    degenerate: list[str]

    @property
    def learnable(self) -> bool:
        return (
            not self.degenerate
            and self.auc_melanoma is not None
            and self.auc_sk is not None
            and self.auc_melanoma >= self.threshold
            and self.auc_sk >= self.threshold
        )

    def __str__(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.4f}"

        status = "learnable" if self.learnable else "UNLEARNABLE"
        lines = [
            f"pixel-statistics AUC melanoma: {fmt(self.auc_melanoma)}",
            f"pixel-statistics AUC SK:       {fmt(self.auc_sk)}",
            f"threshold: {self.threshold}; status: {status}",
        ]
        if self.degenerate:
            lines.append("degenerate (single-class) tasks: " + ", ".join(self.degenerate))
        return "\n".join(lines)


def lesion_intensity(s: Sample) -> float:
    """Mean RGB intensity over the ground-truth lesion region."""
    m = s.mask[0] > 0
    return float(s.image[:, m].mean())


def class_separability_check(ds: Dataset, threshold: float = 0.95) -> SeparabilityReport:
    """Score each task with a one-feature baseline (lesion intensity).

    Darker lesions score higher for melanoma, lighter ones for SK.
    """
    intensity = np.array([lesion_intensity(s) for s in ds])
    mel = [s.label_melanoma for s in ds]
    sk = [s.label_sk for s in ds]
    degenerate = []
    results = []
    for name, labels, scores in (("melanoma", mel, -intensity), ("sk", sk, intensity)):
        if len(set(labels)) < 2:
            degenerate.append(name)
            results.append(None)
        else:
            results.append(auc(scores, labels))
    return SeparabilityReport(results[0], results[1], threshold, degenerate)
