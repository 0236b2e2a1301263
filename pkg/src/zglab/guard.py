"""Catastrophic-overfitting watchdog: detection, early stopping, rollback.

The detector is a two-part rule on validation robust accuracy: fire when
the current value drops below an absolute floor or falls drop_margin below
the running maximum, after a warmup. On rollback the training resumes from
the checkpoint resume_offset epochs before detection with the attack's q
escalated and a fresh RNG branch.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks, data, engine, streams
from .attacks import AttackSpec


class GuardError(RuntimeError):
    pass


@dataclass
class OverfitVerdict:
    fired: bool
    epoch: int
    val_robust_acc: float
    running_max: float
    rule: str | None = None         # "absolute-floor" or "drop-from-max"


@dataclass(frozen=True)
class RollbackPolicy:
    q_initial: float = 0.25
    q_increment: float = 0.10
    q_max: float = 0.70
    resume_offset: int = 1

    def __post_init__(self):
        if self.q_increment <= 0 or self.resume_offset < 1:
            raise ValueError("q_increment must be positive and resume_offset >= 1")


@dataclass(frozen=True)
class GuardConfig:
    mode: str = "off"               # "off" | "detect" | "rollback"
    monitor: AttackSpec | None = None
    absolute_floor: float = 0.10
    drop_margin: float = 0.20
    warmup: int = 3
    policy: RollbackPolicy | None = None
    val_samples: int | None = None

    def __post_init__(self):
        if self.mode not in ("off", "detect", "rollback"):
            raise ValueError(f"unknown guard mode {self.mode!r}")

    def monitor_spec(self, attack: AttackSpec) -> AttackSpec:
        """PGD-10 at the training epsilon unless a monitor attack was given."""
        if self.monitor is not None:
            return self.monitor
        return AttackSpec(kind="pgd", epsilon=attack.epsilon, alpha_ratio=0.25,
                          steps=10, restarts=1,
                          clamp_image_box=attack.clamp_image_box)


def evaluate_robust(arch: engine.ArchSpec, params: engine.ParamSet, val_data,
                    attack: AttackSpec, seed, batch_size: int = 512):
    """(clean accuracy, robust accuracy) on a validation set.

    val_data is a Dataset or an (inputs, labels) pair. PGD runs in eval
    mode (first misclassifying restart wins).
    """
    if isinstance(val_data, data.Dataset):
        x_all, y_all = val_data.inputs, val_data.labels
    else:
        x_all, y_all = val_data
    ss = streams.as_seedseq(seed)
    clean = robust = 0.0
    for b, i in enumerate(range(0, len(y_all), batch_size)):
        x, y = x_all[i:i + batch_size], y_all[i:i + batch_size]
        clean += float((engine.forward(arch, params, x).argmax(axis=1) == y).sum())
        kwargs = {"mode": "eval"} if attack.kind == "pgd" else {}
        pert = attacks.craft(arch, params, x, y, attack, streams.substream(ss, b),
                             want_loss=False, **kwargs)
        adv_logits = engine.forward(arch, params, x + pert.delta)
        robust += float((adv_logits.argmax(axis=1) == y).sum())
    n = float(len(y_all))
    return clean / n, robust / n


def detect_overfit(history, absolute_floor: float = 0.10, drop_margin: float = 0.20,
                   warmup: int = 3) -> OverfitVerdict:
    """Judge the latest entry of a validation robust-accuracy history."""
    if len(history) == 0:
        raise ValueError("empty history")
    idx = len(history) - 1
    acc = float(history[idx])
    running_max = float(max(history))
    verdict = OverfitVerdict(fired=False, epoch=idx, val_robust_acc=acc,
                             running_max=running_max)
    if idx < warmup:
        return verdict
    if acc < absolute_floor:
        verdict.fired, verdict.rule = True, "absolute-floor"
    elif acc < running_max - drop_margin:
        verdict.fired, verdict.rule = True, "drop-from-max"
    return verdict


def append_event(run_dir, event: dict) -> None:
    with open(Path(run_dir) / "events.jsonl", "a", encoding="utf-8") as f:
        f.write(json.dumps(event, sort_keys=True) + "\n")


def read_events(run_dir) -> list[dict]:
    path = Path(run_dir) / "events.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip()]


def rollback_step(run_dir, verdict: OverfitVerdict, policy: RollbackPolicy):
    """Resume state from before the collapse with q escalated.

    Loads the checkpoint resume_offset epochs before the detection epoch,
    bumps the attack's q by q_increment and moves the RNG lineage to a
    fresh branch so the resumed epochs do not replay the collapse stream.
    """
    if not verdict.fired:
        raise GuardError("rollback requested for a verdict that did not fire")
    from .trainer import checkpoint_path  # deferred: trainer imports this module
    resume = verdict.epoch - policy.resume_offset + 1
    path = checkpoint_path(run_dir, resume)
    if resume < 0 or not path.exists():
        raise GuardError(f"no checkpoint for epoch {verdict.epoch - policy.resume_offset} "
                         f"(wanted {path})")
    state = data.load_checkpoint(path)
    new_q = state.attack.q + policy.q_increment
    if new_q > policy.q_max + 1e-12:
        raise GuardError(f"q escalation {state.attack.q} -> {new_q} exceeds q_max "
                         f"{policy.q_max}")
    return dataclasses.replace(state, attack=state.attack.with_q(new_q),
                               lineage=state.lineage.next_branch())


def early_stop_select(run_dir) -> int:
    """Epoch with the best validation robust accuracy (earliest on ties)."""
    from .diagnostics import read_epochs_csv  # local import keeps module load light
    rows = read_epochs_csv(Path(run_dir) / "epochs.csv")
    if not rows:
        raise GuardError(f"no epoch records in {run_dir}")
    accs = [r["val_robust_acc"] for r in rows]
    best = int(np.argmax(accs))
    return int(rows[best]["epoch"])
