"""Desk-scale single-step adversarial training lab.

Crafting (FGSM, FGSM-RS, ZeroGrad, MultiGrad, PGD), a small exact-gradient
network engine, an overfitting guard with checkpoint rollback, and the
diagnostics that make training collapses visible.
"""

import os as _os

# ZG_THREADS caps worker parallelism (the BLAS pools doing the actual math);
# 0 or unset = auto. Must be applied before numpy first loads.
_zg_threads = _os.environ.get("ZG_THREADS", "")
if _zg_threads and _zg_threads != "0":
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _zg_threads)

from .attacks import AgreementMask, AttackSpec, Perturbation, attack_defaults
from .data import Dataset
from .engine import ArchSpec, LossGrad, ParamSet
from .guard import GuardConfig, OverfitVerdict, RollbackPolicy
from .streams import RngLineage
from .trainer import (DiagnosticsConfig, LrSchedule, RunResult, TrainConfig,
                      TrainState)

__all__ = [
    "AgreementMask", "ArchSpec", "AttackSpec", "Dataset", "DiagnosticsConfig",
    "GuardConfig", "LossGrad", "LrSchedule", "OverfitVerdict", "ParamSet",
    "Perturbation", "RngLineage", "RollbackPolicy", "RunResult", "TrainConfig",
    "TrainState", "attack_defaults",
]

__version__ = "0.1.0"
