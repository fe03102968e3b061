"""Offset-based detection of backdoor-poisoned training samples."""

from .attacks import (LabeledDataset, TriggerSpec, adaptive_perturb,
                      apply_trigger, attack_success_rate, gen_synthetic,
                      poison_clean_label, poison_dirty_label)
from .detector import (DetectionReport, DetectorConfig, WeightNet, detect,
                       poison_concentration, select_max_loss)
from .evalkit import (AdaptiveAttackConfig, ExperimentResult, ExperimentSpec,
                      Metrics, VictimConfig, compute_metrics, run_experiment,
                      run_sweep, spectral_baseline, unlearn)
from .nncore import (MlpModel, OptimizerState, accuracy, backward, fine_tune,
                     forward, init_mlp, loss_bce, loss_ce, loss_var, make_rng,
                     optimizer_step, penultimate_features, predict_classes,
                     train_supervised)
from .robuststats import (GaussianFit, adaptive_gmm, adjusted_outlyingness,
                          adjusted_whiskers, medcouple)

__version__ = "0.1.0"
