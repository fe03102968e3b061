"""Nested-offset detection pipeline.

The outer loop alternates a variance-loss descent step on clean base
batches with an ascent step on a poison-condensed subset; the inner loop
produces that subset by training a small 0/1 mapper on frozen victim
features and keeping the rows whose scores are adjusted-outlying. Final
per-sample losses are thresholded by the adaptive Gaussian cutoff.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .nncore import (MlpModel, OptimizerState, backward, forward, init_mlp,
                     loss_bce, loss_ce, loss_var, make_rng,
                     optimizer_step, penultimate_features, sigmoid)
from .robuststats import GaussianFit, adaptive_gmm, upper_outlyingness

WEIGHTNET_HIDDEN = 128


@dataclass
class WeightNet:
    """Two-layer scorer (feature dim -> 128 -> 1) with sigmoid output.

    The hidden layer stays at its random initialisation; only the output
    layer trains. A trainable hidden layer can interpolate both
    objectives on desk-scale batches, which erases the cancellation the
    alternating updates rely on.
    """

    hidden_w: np.ndarray
    out_w: np.ndarray
    out_b: float

    @classmethod
    def fresh(cls, feature_dim: int, rng: np.random.Generator) -> "WeightNet":
        hidden = rng.normal(0.0, np.sqrt(2.0 / feature_dim),
                            (feature_dim, WEIGHTNET_HIDDEN))
        return cls(hidden_w=hidden, out_w=np.zeros(WEIGHTNET_HIDDEN), out_b=0.0)

    def hidden(self, feats: np.ndarray) -> np.ndarray:
        return np.maximum(feats @ self.hidden_w, 0.0)

    def scores(self, feats: np.ndarray) -> np.ndarray:
        """Pre-sigmoid scores."""
        return self.hidden(feats) @ self.out_w + self.out_b

    def __call__(self, feats: np.ndarray) -> np.ndarray:
        """Mapper output in (0, 1)."""
        return sigmoid(self.scores(feats))

    def sgd_step(self, hidden_acts: np.ndarray, target: float, lr: float):
        """One full-batch descent step of BCE(output, target)."""
        grad_score = sigmoid(hidden_acts @ self.out_w + self.out_b) - target
        n = hidden_acts.shape[0]
        self.out_w -= lr * (hidden_acts.T @ grad_score) / n
        self.out_b -= lr * float(grad_score.mean())


@dataclass
class DetectorConfig:
    """Hyperparameters of one detection run."""

    outer_iters: int = 2000
    inner_iters: int = 100
    outer_lr: float = 1e-3
    inner_lr: float = 0.2
    ao_threshold: float = 2.0
    gmm_beta: float = 1e-6
    poison_batch: int = 128
    base_batch: int = 64
    loss_mode: str = "labeled"       # labeled -> cross-entropy, unlabeled -> variance
    detector_logits: int | None = None   # None: use the dataset class count
    detector_hidden: int = 128
    mapper_replicas: int = 2         # independent mappers whose picks must agree
    concentrated_cap: int = 16       # keep the ascent batch small and precise
    seed: int = 0

    def validate(self):
        if self.outer_iters < 0 or self.inner_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.outer_lr <= 0 or self.inner_lr <= 0:
            raise ValueError("step sizes must be positive")
        if self.ao_threshold <= 0:
            raise ValueError("ao_threshold must be positive")
        if not 0.0 < self.gmm_beta < 1.0:
            raise ValueError("gmm_beta must lie in (0, 1)")
        if self.poison_batch < 2 or self.base_batch < 2:
            raise ValueError("batch sizes must be >= 2")
        if self.loss_mode not in ("labeled", "unlabeled"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        return self


@dataclass
class DetectionReport:
    """Outcome of one detection run."""

    losses: np.ndarray                  # final per-sample max-side loss
    flagged: np.ndarray                 # sorted indices into the poisoned set
    fit: GaussianFit
    concentrated_sizes: list[int] = field(default_factory=list)
    elapsed_seconds: float = 0.0
    config: DetectorConfig | None = None
    detector: MlpModel | None = None    # trained detector (adaptive attacks use it)

    @property
    def flagged_mask(self) -> np.ndarray:
        mask = np.zeros(self.losses.shape[0], dtype=bool)
        mask[self.flagged] = True
        return mask


def select_max_loss(cfg: DetectorConfig, logits: np.ndarray, labels=None):
    """Per-row max-side loss: cross-entropy when labeled, else variance."""
    if cfg.loss_mode == "labeled":
        if labels is None:
            raise ValueError("labeled mode requires labels")
        losses, grad = loss_ce(logits, labels)
    else:
        losses, grad = loss_var(logits)
    return losses, grad


def _standardize(base_feats: np.ndarray, poison_feats: np.ndarray):
    both = np.concatenate([base_feats, poison_feats])
    mean = both.mean(axis=0)
    std = both.std(axis=0) + 1e-8
    return (base_feats - mean) / std, (poison_feats - mean) / std


def poison_concentration(victim: MlpModel, poison_batch: np.ndarray,
                         base_batch: np.ndarray, cfg: DetectorConfig,
                         seed=None) -> np.ndarray:
    """Return row indices of poison_batch that concentrate as suspicious.

    Each mapper replica trains a fresh WeightNet for cfg.inner_iters
    alternating steps (base rows toward 0, poisoned rows toward 1) on
    standardized victim embeddings; a row is kept only when every
    replica scores it at least cfg.ao_threshold outlying above the clean
    bulk. At most cfg.concentrated_cap rows return; may be empty.
    """
    fb = penultimate_features(victim, base_batch)
    fp = penultimate_features(victim, poison_batch)
    fb, fp = _standardize(fb, fp)
    root = cfg.seed if seed is None else seed
    keep = None
    for replica in range(cfg.mapper_replicas):
        net = WeightNet.fresh(fb.shape[1], make_rng(root, 0x57, replica))
        hb = net.hidden(fb)
        hp = net.hidden(fp)
        for _ in range(cfg.inner_iters):
            grad = sigmoid(hb @ net.out_w + net.out_b) - 0.0
            net.out_w -= cfg.inner_lr * (hb.T @ grad) / hb.shape[0]
            net.out_b -= cfg.inner_lr * float(grad.mean())
            grad = sigmoid(hp @ net.out_w + net.out_b) - 1.0
            net.out_w -= cfg.inner_lr * (hp.T @ grad) / hp.shape[0]
            net.out_b -= cfg.inner_lr * float(grad.mean())
        scores = hp @ net.out_w + net.out_b
        picks = upper_outlyingness(scores) >= cfg.ao_threshold
        keep = picks if keep is None else keep & picks
        score_sum = scores if replica == 0 else score_sum + scores
    hits = np.where(keep)[0]
    if hits.size > cfg.concentrated_cap:
        # half the budget anchors the highest scorers, half rotates over
        # the remaining qualifiers so coverage stays uniform
        half = cfg.concentrated_cap // 2
        by_score = hits[np.argsort(score_sum[hits], kind="stable")[::-1]]
        anchors = by_score[:half]
        rest = by_score[half:]
        rotated = make_rng(root, 0xCA).choice(rest, cfg.concentrated_cap - half,
                                              replace=False)
        hits = np.sort(np.concatenate([anchors, rotated]))
    return hits


def detect(victim: MlpModel, poisoned_features: np.ndarray, poisoned_labels,
           base_features: np.ndarray, cfg: DetectorConfig) -> DetectionReport:
    """Run the full nested offset loop and threshold the final losses.

    The detector model is a fresh MLP shaped like the victim except for
    its logit count, which cfg.detector_logits may override. The base
    set is never consulted for labels.
    """
    cfg.validate()
    started = time.perf_counter()
    poisoned_features = np.asarray(poisoned_features, dtype=np.float64)
    base_features = np.asarray(base_features, dtype=np.float64)
    if cfg.loss_mode == "labeled":
        if poisoned_labels is None:
            raise ValueError("labeled mode requires labels on the inspected set")
        poisoned_labels = np.asarray(poisoned_labels)
    n_logits = cfg.detector_logits
    if n_logits is None:
        n_logits = victim.output_dim
    dims = [poisoned_features.shape[1]] + [cfg.detector_hidden] * (victim.n_layers - 1) + [n_logits]
    model = init_mlp(dims, make_rng(cfg.seed, 0xD0))
    opt_min = OptimizerState(kind="adam", step_size=cfg.outer_lr)
    opt_max = OptimizerState(kind="adam", step_size=cfg.outer_lr)
    batches = make_rng(cfg.seed, 0xBA)
    pc_sizes = []
    # tail-averaged parameters smooth the burst-and-decay loss trajectory
    avg_from = cfg.outer_iters - cfg.outer_iters // 2
    avg_w = [np.zeros_like(w) for w in model.weights]
    avg_b = [np.zeros_like(b) for b in model.biases]
    n_avg = 0
    for i in range(cfg.outer_iters):
        poi_idx = batches.integers(0, poisoned_features.shape[0], cfg.poison_batch)
        base_idx = batches.integers(0, base_features.shape[0], cfg.base_batch)
        logits, cache = forward(model, base_features[base_idx])
        _, grad = loss_var(logits)
        w_grads, b_grads, _ = backward(model, cache, grad)
        optimizer_step(model, opt_min, w_grads, b_grads, "descend")
        keep = poison_concentration(victim, poisoned_features[poi_idx],
                                    base_features[base_idx], cfg,
                                    seed=cfg.seed + i)
        concentrated = poi_idx[keep]
        pc_sizes.append(len(concentrated))
        if len(concentrated):
            logits, cache = forward(model, poisoned_features[concentrated])
            labels = poisoned_labels[concentrated] if cfg.loss_mode == "labeled" else None
            _, grad = select_max_loss(cfg, logits, labels)
            w_grads, b_grads, _ = backward(model, cache, grad)
            optimizer_step(model, opt_max, w_grads, b_grads, "ascend")
        if i >= avg_from:
            for t in range(model.n_layers):
                avg_w[t] += model.weights[t]
                avg_b[t] += model.biases[t]
            n_avg += 1
    if n_avg:
        model = MlpModel(model.layer_dims, [w / n_avg for w in avg_w],
                         [b / n_avg for b in avg_b])
    logits, _ = forward(model, poisoned_features)
    losses, _ = select_max_loss(
        cfg, logits, poisoned_labels if cfg.loss_mode == "labeled" else None)
    flagged, fit = adaptive_gmm(losses, cfg.gmm_beta)
    return DetectionReport(losses=losses, flagged=np.sort(flagged), fit=fit,
                           concentrated_sizes=pc_sizes,
                           elapsed_seconds=time.perf_counter() - started,
                           config=cfg, detector=model)
