"""Synthetic dataset generation and poisoning attacks.

Image-like data lives on a side x side grid flattened to d = side^2
features in [0, 1]. Dirty-label poisoning stamps a trigger and flips the
label to the target class; clean-label poisoning stamps the trigger on
target-class samples only. The adaptive attack perturbs poisoned inputs
to shrink their loss under a trained detector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorConfig, select_max_loss
from .nncore import MlpModel, backward, forward, make_rng


class ConfigError(ValueError):
    pass


class ThreatModelError(ValueError):
    """Attack parameters outside the assumed regime."""


@dataclass
class LabeledDataset:
    """Feature matrix with optional labels and harness-only poison mask."""

    features: np.ndarray
    labels: np.ndarray | None = None
    poison_mask: np.ndarray | None = None
    target_class: int | None = None
    n_classes: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.features.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape[0] != n:
                raise ConfigError("labels length != sample count")
            if self.n_classes and self.labels.size and self.labels.max() >= self.n_classes:
                raise ConfigError("label out of range")
        if self.poison_mask is not None:
            self.poison_mask = np.asarray(self.poison_mask, dtype=bool)
            if self.poison_mask.shape[0] != n:
                raise ConfigError("poison_mask length != sample count")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def copy(self) -> "LabeledDataset":
        return LabeledDataset(
            self.features.copy(),
            None if self.labels is None else self.labels.copy(),
            None if self.poison_mask is None else self.poison_mask.copy(),
            self.target_class, self.n_classes)

    def without_labels(self) -> "LabeledDataset":
        return LabeledDataset(self.features.copy(), None, None, None, self.n_classes)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            None if self.poison_mask is None else self.poison_mask[idx],
            self.target_class, self.n_classes)


@dataclass
class TriggerSpec:
    """Patch (set listed pixels to a value) or blend (convex mix) trigger."""

    kind: str = "patch"
    patch_coords: list[int] = field(default_factory=list)  # flat pixel indices
    patch_value: float = 1.0
    pattern: np.ndarray | None = None
    blend_alpha: float = 0.0

    @classmethod
    def corner_patch(cls, side: int, patch_side: int, value: float = 1.0) -> "TriggerSpec":
        coords = [r * side + c for r in range(patch_side) for c in range(patch_side)]
        return cls(kind="patch", patch_coords=coords, patch_value=value)

    @classmethod
    def random_blend(cls, dim: int, alpha: float, seed: int) -> "TriggerSpec":
        pattern = make_rng(seed, 0xB1).uniform(0.0, 1.0, dim)
        return cls(kind="blend", pattern=pattern, blend_alpha=alpha)

    def validate(self, dim: int):
        if self.kind == "patch":
            if not self.patch_coords:
                raise ConfigError("patch trigger needs coordinates")
            if min(self.patch_coords) < 0 or max(self.patch_coords) >= dim:
                raise ConfigError("patch coordinate outside the grid")
        elif self.kind == "blend":
            if self.pattern is None or len(self.pattern) != dim:
                raise ConfigError("blend pattern must match the feature dim")
            if not 0.0 <= self.blend_alpha <= 1.0:
                raise ConfigError("blend alpha must lie in [0, 1]")
        else:
            raise ConfigError(f"unknown trigger kind {self.kind!r}")
        return self


def gen_synthetic(n_classes: int, dim: int, per_class: int, noise_sigma: float,
                  seed: int, skip: int = 0) -> LabeledDataset:
    """Gaussian class blobs around prototypes drawn once in [0.2, 0.8]^dim.

    Prototypes depend only on (n_classes, dim, seed), so calls with
    different `skip`/`per_class` sample disjoint stretches of the same
    distribution; samples are clipped to [0, 1] and balanced per class.
    """
    if n_classes < 2:
        raise ConfigError("need at least two classes")
    side = math.isqrt(dim)
    if side * side != dim:
        raise ConfigError(f"dim {dim} is not a perfect square")
    protos = make_rng(seed, 0).uniform(0.2, 0.8, (n_classes, dim))
    feats, labels = [], []
    for c in range(n_classes):
        rng = make_rng(seed, 1, c)
        noise = rng.normal(0.0, noise_sigma, (skip + per_class, dim))[skip:]
        feats.append(np.clip(protos[c] + noise, 0.0, 1.0))
        labels.append(np.full(per_class, c, dtype=np.int64))
    # snap onto the float32 storage grid so serialization is lossless
    features = np.concatenate(feats).astype(np.float32).astype(np.float64)
    return LabeledDataset(features, np.concatenate(labels),
                          np.zeros(n_classes * per_class, dtype=bool),
                          None, n_classes)


def apply_trigger(sample: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Stamp the trigger onto one sample (or a batch); output stays in [0, 1]."""
    x = np.array(sample, dtype=np.float64, copy=True)
    spec.validate(x.shape[-1])
    if spec.kind == "patch":
        x[..., spec.patch_coords] = spec.patch_value
        return np.clip(x, 0.0, 1.0)
    return np.clip((1.0 - spec.blend_alpha) * x + spec.blend_alpha * spec.pattern, 0.0, 1.0)


def poison_dirty_label(dataset: LabeledDataset, spec: TriggerSpec, ratio: float,
                       target_class: int, seed: int) -> LabeledDataset:
    """Trigger + relabel floor(ratio * N) non-target samples."""
    if not 0.0 <= ratio <= 0.5:
        raise ThreatModelError("dirty-label ratio must lie in [0, 0.5]")
    if dataset.labels is None:
        raise ConfigError("dirty-label poisoning needs labels")
    out = dataset.copy()
    out.target_class = target_class
    out.poison_mask = np.zeros(len(out), dtype=bool)
    count = int(ratio * len(out))
    if count == 0:
        return out
    candidates = np.where(out.labels != target_class)[0]
    if count > candidates.size:
        raise ThreatModelError("not enough non-target samples to poison")
    chosen = make_rng(seed, 0xD1).choice(candidates, size=count, replace=False)
    out.features[chosen] = apply_trigger(out.features[chosen], spec)
    out.labels[chosen] = target_class
    out.poison_mask[chosen] = True
    return out


def poison_clean_label(dataset: LabeledDataset, spec: TriggerSpec,
                       in_class_ratio: float, target_class: int,
                       seed: int) -> LabeledDataset:
    """Trigger a fraction of target-class samples; labels stay untouched."""
    if not 0.0 <= in_class_ratio <= 1.0:
        raise ConfigError("in_class_ratio must lie in [0, 1]")
    if dataset.labels is None:
        raise ConfigError("clean-label poisoning needs labels")
    in_class = np.where(dataset.labels == target_class)[0]
    if in_class.size == 0:
        raise ConfigError(f"no samples of target class {target_class}")
    out = dataset.copy()
    out.target_class = target_class
    out.poison_mask = np.zeros(len(out), dtype=bool)
    count = int(in_class_ratio * in_class.size)
    if count == 0:
        return out
    chosen = make_rng(seed, 0xC1).choice(in_class, size=count, replace=False)
    out.features[chosen] = apply_trigger(out.features[chosen], spec)
    out.poison_mask[chosen] = True
    return out


def adaptive_perturb(detector: MlpModel, sample: np.ndarray, cfg: DetectorConfig,
                     label=None, steps: int = 100, step_size: float = 0.01,
                     linf_budget: float | None = None) -> np.ndarray:
    """Gradient-descend the detector's max-side loss over an additive delta.

    Returns delta such that sample + delta stays in [0, 1] (and within
    the optional per-coordinate budget around the original sample).
    """
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    x0 = np.asarray(sample, dtype=np.float64)
    x = x0.copy()
    labels = None if label is None else np.array([label])
    for _ in range(steps):
        logits, cache = forward(detector, x[None, :])
        _, grad = select_max_loss(cfg, logits, labels)
        _, _, input_grad = backward(detector, cache, grad)
        x = x - step_size * input_grad[0]
        if linf_budget is not None:
            x = np.clip(x, x0 - linf_budget, x0 + linf_budget)
        x = np.clip(x, 0.0, 1.0)
    return x - x0


def attack_success_rate(model: MlpModel, clean_eval: LabeledDataset,
                        spec: TriggerSpec, target_class: int) -> float:
    """Fraction of triggered non-target eval samples classified as target."""
    if clean_eval.labels is None:
        raise ConfigError("attack_success_rate needs labeled eval data")
    keep = clean_eval.labels != target_class
    if not keep.any():
        raise ConfigError("eval set has no non-target samples")
    triggered = apply_trigger(clean_eval.features[keep], spec)
    logits, _ = forward(model, triggered)
    return float((logits.argmax(axis=1) == target_class).mean())
