"""End-to-end experiment pipelines, metrics, baseline, countermeasures.

An experiment is: build a poisoned training set, train the victim, run
detection, filter the flagged rows, retrain, and measure. Upstream
quality is TPR/FPR of the flags against the ground-truth mask;
downstream quality is the retrained model's attack success rate and
clean accuracy.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import (LabeledDataset, TriggerSpec, adaptive_perturb,
                      attack_success_rate, gen_synthetic, poison_clean_label,
                      poison_dirty_label)
from .detector import DetectionReport, DetectorConfig, detect
from .nncore import (MlpModel, OptimizerState, accuracy, backward, fine_tune,
                     forward, init_mlp, loss_ce, make_rng, optimizer_step,
                     penultimate_features, train_supervised)

EVAL_RESERVE = 1000   # eval-pool rows kept out of the base set for downstream metrics


@dataclass
class Metrics:
    """Upstream detection counts plus downstream model quality."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    asr: float | None = None
    acc: float | None = None

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if (self.fp + self.tn) else 0.0

    @property
    def remaining_poisons(self) -> int:
        return self.fn


def compute_metrics(flagged_mask, poison_mask) -> Metrics:
    """Upstream confusion counts; poison is the positive class."""
    flagged = np.asarray(flagged_mask, dtype=bool)
    truth = np.asarray(poison_mask, dtype=bool)
    if flagged.shape != truth.shape:
        raise ValueError("mask shapes differ")
    return Metrics(tp=int((flagged & truth).sum()),
                   fp=int((flagged & ~truth).sum()),
                   tn=int((~flagged & ~truth).sum()),
                   fn=int((~flagged & truth).sum()))


@dataclass
class VictimConfig:
    hidden: int = 128
    epochs: int = 30
    batch_size: int = 64
    step_size: float = 1e-3


@dataclass
class AdaptiveAttackConfig:
    steps: int = 100
    step_size: float = 0.01
    linf_budget: float | None = None


@dataclass
class ExperimentSpec:
    """Everything one trial needs. Cases: case0 end-to-end supervised,
    case1_unlabeled (labels withheld from the detector), case2_ft_all /
    case2_ft_last (clean pretrain, poisoned fine-tune)."""

    n_classes: int = 4
    dim: int = 64
    train_per_class: int = 500
    eval_per_class: int = 500
    noise_sigma: float = 0.06
    trigger: TriggerSpec | None = None
    attack: str = "dirty_label"          # dirty_label | clean_label | none
    ratio: float = 0.05                  # dataset fraction; in-class fraction for clean_label
    target_class: int = 0
    victim: VictimConfig = field(default_factory=VictimConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    case: str = "case0"
    base_size: int = 1000
    seed: int = 0
    adaptive: AdaptiveAttackConfig | None = None
    clean_reference: bool = False        # also train on unpoisoned data for ACC delta
    retrain_after_filter: bool = True

    def __post_init__(self):
        if self.trigger is None:
            side = int(round(self.dim ** 0.5))
            self.trigger = TriggerSpec.corner_patch(side, 3)

    def validate(self):
        if self.case not in ("case0", "case1_unlabeled", "case2_ft_all", "case2_ft_last"):
            raise ValueError(f"unknown case {self.case!r}")
        if self.attack not in ("dirty_label", "clean_label", "none"):
            raise ValueError(f"unknown attack {self.attack!r}")
        if self.eval_per_class * self.n_classes < EVAL_RESERVE + 1:
            raise ValueError("eval pool too small for base set plus metrics")
        if self.base_size > EVAL_RESERVE:
            raise ValueError(f"base_size above the {EVAL_RESERVE}-row reserve")
        self.detector.validate()
        return self


@dataclass
class ExperimentResult:
    metrics: Metrics
    report: DetectionReport
    victim_asr: float
    victim_acc: float
    clean_reference_acc: float | None = None
    seed: int = 0


def _build_datasets(spec: ExperimentSpec):
    train = gen_synthetic(spec.n_classes, spec.dim, spec.train_per_class,
                          spec.noise_sigma, spec.seed, skip=0)
    eval_pool = gen_synthetic(spec.n_classes, spec.dim, spec.eval_per_class,
                              spec.noise_sigma, spec.seed, skip=spec.train_per_class)
    pretrain = None
    if spec.case.startswith("case2"):
        pretrain = gen_synthetic(spec.n_classes, spec.dim, spec.train_per_class,
                                 spec.noise_sigma, spec.seed,
                                 skip=spec.train_per_class + spec.eval_per_class)
    return train, eval_pool, pretrain


def _poison(spec: ExperimentSpec, train: LabeledDataset) -> LabeledDataset:
    if spec.attack == "none" or spec.ratio == 0.0:
        out = train.copy()
        out.poison_mask = np.zeros(len(out), dtype=bool)
        out.target_class = spec.target_class
        return out
    if spec.attack == "dirty_label":
        return poison_dirty_label(train, spec.trigger, spec.ratio,
                                  spec.target_class, spec.seed)
    return poison_clean_label(train, spec.trigger, spec.ratio,
                              spec.target_class, spec.seed)


def _train_victim(spec: ExperimentSpec, poisoned: LabeledDataset,
                  pretrain: LabeledDataset | None) -> MlpModel:
    dims = [spec.dim, spec.victim.hidden, spec.n_classes]
    if spec.case.startswith("case2"):
        model = init_mlp(dims, make_rng(spec.seed, 0x11))
        train_supervised(model, pretrain.features, pretrain.labels,
                         spec.victim.epochs, spec.victim.batch_size,
                         make_rng(spec.seed, 0x12), spec.victim.step_size)
        mode = "ft_all" if spec.case == "case2_ft_all" else "ft_last"
        return fine_tune(model, poisoned.features, poisoned.labels, mode,
                         spec.victim.epochs, spec.victim.batch_size,
                         make_rng(spec.seed, 0x13), spec.victim.step_size)
    model = init_mlp(dims, make_rng(spec.seed, 0x11))
    return train_supervised(model, poisoned.features, poisoned.labels,
                            spec.victim.epochs, spec.victim.batch_size,
                            make_rng(spec.seed, 0x12), spec.victim.step_size)


def _split_eval(spec: ExperimentSpec, eval_pool: LabeledDataset):
    """Base set from the first EVAL_RESERVE shuffled rows, metrics on the rest."""
    perm = make_rng(spec.seed, 0x14).permutation(len(eval_pool))
    base = eval_pool.subset(perm[:spec.base_size]).without_labels()
    metric_eval = eval_pool.subset(perm[EVAL_RESERVE:])
    return base, metric_eval


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Full pipeline: poison, train, detect, filter, retrain, measure."""
    spec.validate()
    train, eval_pool, pretrain = _build_datasets(spec)
    poisoned = _poison(spec, train)
    base, metric_eval = _split_eval(spec, eval_pool)

    victim = _train_victim(spec, poisoned, pretrain)
    detector_cfg = replace(spec.detector, seed=spec.seed)
    if spec.case == "case1_unlabeled":
        detector_cfg = replace(detector_cfg, loss_mode="unlabeled")

    if spec.adaptive is not None:
        # attacker replica run, then per-poison perturbation of the inputs
        attacker_report = detect(victim, poisoned.features, poisoned.labels,
                                 base.features, detector_cfg)
        adv = spec.adaptive
        for i in np.where(poisoned.poison_mask)[0]:
            label = poisoned.labels[i] if detector_cfg.loss_mode == "labeled" else None
            delta = adaptive_perturb(attacker_report.detector,
                                     poisoned.features[i], detector_cfg,
                                     label=label, steps=adv.steps,
                                     step_size=adv.step_size,
                                     linf_budget=adv.linf_budget)
            poisoned.features[i] = poisoned.features[i] + delta
        victim = _train_victim(spec, poisoned, pretrain)

    labels_for_detect = poisoned.labels if detector_cfg.loss_mode == "labeled" else None
    report = detect(victim, poisoned.features, labels_for_detect,
                    base.features, detector_cfg)

    metrics = compute_metrics(report.flagged_mask, poisoned.poison_mask)
    victim_asr = attack_success_rate(victim, metric_eval, spec.trigger,
                                     spec.target_class)
    victim_acc = accuracy(victim, metric_eval.features, metric_eval.labels)

    if spec.retrain_after_filter:
        kept = poisoned.subset(np.where(~report.flagged_mask)[0])
        retrained = _train_victim(spec, kept, pretrain)
        metrics.asr = attack_success_rate(retrained, metric_eval, spec.trigger,
                                          spec.target_class)
        metrics.acc = accuracy(retrained, metric_eval.features, metric_eval.labels)

    clean_acc = None
    if spec.clean_reference:
        reference = _train_victim(spec, train, pretrain)
        clean_acc = accuracy(reference, metric_eval.features, metric_eval.labels)

    return ExperimentResult(metrics=metrics, report=report,
                            victim_asr=victim_asr, victim_acc=victim_acc,
                            clean_reference_acc=clean_acc, seed=spec.seed)


def worker_count() -> int:
    """Thread fan-out for sweeps, capped by OFFSET_DETECT_THREADS."""
    raw = os.environ.get("OFFSET_DETECT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_sweep(spec: ExperimentSpec, key: str, values) -> list[ExperimentResult]:
    """Run the experiment once per value of one swept field."""
    specs = []
    for v in values:
        if key == "ratio":
            specs.append(replace(spec, ratio=float(v)))
        elif key == "base_size":
            specs.append(replace(spec, base_size=int(v)))
        elif key == "detector_logits":
            specs.append(replace(spec, detector=replace(spec.detector,
                                                        detector_logits=int(v))))
        elif key == "seed":
            specs.append(replace(spec, seed=int(v)))
        else:
            raise ValueError(f"unsupported sweep key {key!r}")
    workers = worker_count()
    if workers == 1:
        return [run_experiment(s) for s in specs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_experiment, specs))


def spectral_baseline(victim: MlpModel, poisoned: LabeledDataset,
                      expected_ratio: float) -> np.ndarray:
    """Spectral-signature filter: per class, score samples by squared
    projection onto the top right-singular vector of centered embeddings
    and flag the top floor(1.5 * expected_ratio * class size)."""
    if poisoned.labels is None:
        raise ValueError("spectral baseline needs labels")
    flagged = np.zeros(len(poisoned), dtype=bool)
    if expected_ratio <= 0:
        return flagged
    for c in range(poisoned.n_classes):
        idx = np.where(poisoned.labels == c)[0]
        if idx.size < 2:
            warnings.warn(f"class {c} has {idx.size} samples; skipped")
            continue
        feats = penultimate_features(victim, poisoned.features[idx])
        centered = feats - feats.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        scores = (centered @ vt[0]) ** 2
        budget = int(1.5 * expected_ratio * idx.size)
        if budget == 0:
            continue
        top = np.argsort(scores, kind="stable")[::-1][:budget]
        flagged[idx[top]] = True
    return flagged


def unlearn(victim: MlpModel, dataset: LabeledDataset, flagged_mask,
            epochs: int = 10, step_size: float = 2e-3,
            batch_size: int = 64, seed: int = 0) -> MlpModel:
    """Scrub flagged samples out of a trained model.

    Alternates cross-entropy descent on the unflagged rows with ascent
    on the flagged rows, one pass of each per epoch. The two phases keep
    separate optimizer states so the ascent signal is not averaged away.
    """
    flagged = np.asarray(flagged_mask, dtype=bool)
    if dataset.labels is None:
        raise ValueError("unlearning needs labels")
    model = victim.copy()
    if not flagged.any():
        warnings.warn("nothing flagged; unlearn is a no-op")
        return model
    opt_keep = OptimizerState(kind="adam", step_size=step_size)
    opt_drop = OptimizerState(kind="adam", step_size=step_size)
    rng = make_rng(seed, 0x0E)
    keep_idx = np.where(~flagged)[0]
    drop_idx = np.where(flagged)[0]
    for _ in range(epochs):
        for indices, state, direction in ((keep_idx, opt_keep, "descend"),
                                          (drop_idx, opt_drop, "ascend")):
            order = rng.permutation(indices)
            for start in range(0, len(order), batch_size):
                rows = order[start:start + batch_size]
                logits, cache = forward(model, dataset.features[rows])
                _, grad = loss_ce(logits, dataset.labels[rows])
                w_grads, b_grads, _ = backward(model, cache, grad)
                optimizer_step(model, state, w_grads, b_grads, direction)
    return model
