"""Accuracy, corruption and perturbation robustness metrics, and the throughput bench."""

from .corruptions import (IDENTITY, KINDS, PERTURBATIONS, SEVERITY, CorruptionSpec, apply_param, corrupt,
                          perturbation_sequence)
from .metrics import (corruption_errors, flip_count, flip_rate, flip_rate_exact, mce_exact,
                      mean_corruption_error, mean_flip_rate, mfr_exact, top1)
from .report import (RobustnessReport, ThroughputReport, evaluate_corruptions, evaluate_perturbations,
                     hardware_descriptor, images_per_sec, load_baseline, robustness_report, throughput_bench)
