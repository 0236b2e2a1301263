"""Adversarial training loop: schedules, SGD with momentum, run orchestration.

A run is fully determined by (master seed, config, data): shuffling,
attack noise and evaluation noise all come from addressed streams of the
master seed, so any epoch can be replayed bit-exactly from its checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks, data, diagnostics, engine, guard, streams
from .attacks import AttackSpec
from .engine import ArchSpec, ParamSet

SCHEDULE_KINDS = ("cyclical", "one-drop", "constant")


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    max_lr: float
    epochs: int
    drop_epoch: int | None = None
    drop_factor: float = 10.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.max_lr <= 0 or self.epochs < 1 or self.drop_factor <= 0:
            raise ValueError("max_lr, epochs and drop_factor must be positive")
        if self.kind == "one-drop" and self.drop_epoch is None:
            raise ValueError("one-drop schedule needs drop_epoch")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "LrSchedule":
        return LrSchedule(**d)


def lr_at(schedule: LrSchedule, step: int, total_steps: int) -> float:
    """Learning rate for one optimizer step.

    cyclical: triangle, 0 at step 0, max_lr at total_steps/2, 0 at the end.
    one-drop: max_lr, divided by drop_factor from drop_epoch onward.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule.kind == "constant":
        return schedule.max_lr
    if schedule.kind == "cyclical":
        return schedule.max_lr * (1.0 - abs(2.0 * step / total_steps - 1.0))
    epoch = min(step * schedule.epochs // total_steps, schedule.epochs - 1)
    if epoch >= schedule.drop_epoch:
        return schedule.max_lr / schedule.drop_factor
    return schedule.max_lr


@dataclass(frozen=True)
class TrainConfig:
    attack: AttackSpec
    schedule: LrSchedule
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float | None = None
    batch_size: int = 128
    master_seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0,1), got {self.momentum}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


@dataclass
class TrainState:
    """Everything needed to continue (or replay) a run from this point."""

    arch: ArchSpec
    params: ParamSet
    momentum: ParamSet
    epoch: int                      # completed epochs
    lineage: streams.RngLineage
    attack: AttackSpec              # current spec (q may have been escalated)
    schedule: LrSchedule


def init_state(arch: ArchSpec, config: TrainConfig) -> TrainState:
    lineage = streams.RngLineage(config.master_seed)
    params = engine.init_params(arch, streams.stream(lineage, streams.INIT))
    return TrainState(arch=arch, params=params, momentum=params.zeros_like(),
                      epoch=0, lineage=lineage, attack=config.attack,
                      schedule=config.schedule)


def sgd_update(state: TrainState, param_grad: ParamSet, lr: float,
               config: TrainConfig) -> TrainState:
    """One momentum-SGD step; optional global-l2 gradient clipping first."""
    grads = param_grad.groups
    if config.grad_clip is not None:
        gnorm = param_grad.global_l2()
        if gnorm > config.grad_clip:
            scale = config.grad_clip / gnorm
            grads = {k: v * scale for k, v in grads.items()}
    new_momentum, new_params = {}, {}
    for name, w in state.params.groups.items():
        v = config.momentum * state.momentum.groups[name] + \
            (grads[name] + config.weight_decay * w)
        new_momentum[name] = v
        new_params[name] = w - lr * v
    return dataclasses.replace(state, params=ParamSet(new_params),
                               momentum=ParamSet(new_momentum))


def train_epoch(state: TrainState, batch_list, config: TrainConfig):
    """Run one epoch over pre-shuffled batches.

    Attack noise is addressed by (epoch, batch index) so the epoch replays
    bit-exactly from the same state. Returns the advanced state and the
    epoch aggregates (mean loss, accuracy on the crafted examples, mean
    per-coordinate l1 of delta in /255 units).
    """
    steps_per_epoch = len(batch_list)
    total_steps = state.schedule.epochs * steps_per_epoch
    loss_sum = acc_sum = l1_sum = n = 0.0
    for i, (x, y) in enumerate(batch_list):
        seed = streams.stream(state.lineage, streams.ATTACK, state.epoch, i)
        pert = attacks.craft(state.arch, state.params, x, y, state.attack,
                             seed, want_loss=False)
        lg = engine.loss_and_grads(state.arch, state.params, x + pert.delta, y,
                                   want_param_grad=True)
        bs = len(y)
        loss_sum += lg.loss * bs
        acc_sum += float((lg.logits.argmax(axis=1) == y).sum())
        l1_sum += float(np.abs(pert.delta).reshape(bs, -1).mean(axis=1).sum())
        n += bs
        step = state.epoch * steps_per_epoch + i
        lr = lr_at(state.schedule, step, total_steps)
        state = sgd_update(state, lg.param_grad, lr, config)
    state = dataclasses.replace(state, epoch=state.epoch + 1)
    metrics = {"train_loss": loss_sum / n, "train_fgsm_acc": acc_sum / n,
               "mean_l1_x255": 255.0 * l1_sum / n}
    return state, metrics


# -- full runs -----------------------------------------------------------------

@dataclass(frozen=True)
class DiagnosticsConfig:
    probe_batch: int = 128
    sign_diff_pgd: bool = False
    saliency_samples: int = 0


@dataclass
class RunResult:
    state: TrainState
    records: list
    run_dir: Path
    status: str                     # "completed" or "stopped-qmax"


def checkpoint_path(run_dir, completed_epochs: int) -> Path:
    return Path(run_dir) / "ckpt" / f"epoch_{completed_epochs:04d}.zgc"


def _probe_spec(attack: AttackSpec) -> AttackSpec:
    """Sign-diff reference protocol: method crafting without random start."""
    if attack.kind in ("fgsm", "fgsm-rs", "zerograd"):
        return dataclasses.replace(attack, random_start=False)
    return attack


def _epoch_diagnostics(state, probe, prev_probe_delta, diag, monitor):
    """Probe-batch metrics for one completed epoch; pure in (params, streams)."""
    cur = attacks.craft(state.arch, state.params, probe.inputs, probe.labels,
                        state.attack, probe.stream, want_loss=False)
    pmse = diagnostics.probe_pert_mse(probe, prev_probe_delta, cur.delta)
    sign_diff = None
    if diag.sign_diff_pgd:
        method = attacks.craft(state.arch, state.params, probe.inputs, probe.labels,
                               _probe_spec(state.attack), probe.sign_diff_stream,
                               want_loss=False)
        ref = attacks.craft(state.arch, state.params, probe.inputs, probe.labels,
                            monitor, streams.substream(probe.sign_diff_stream, 999),
                            want_loss=False)
        sign_diff = diagnostics.sign_diff_vs_pgd(method.delta, ref.delta)
    return cur.delta, pmse, sign_diff


def train_run(arch: ArchSpec, config: TrainConfig, train_ds: data.Dataset,
              val_ds: data.Dataset, out_dir, guard_cfg: "guard.GuardConfig | None" = None,
              diag_cfg: DiagnosticsConfig | None = None, hooks=(),
              resolved_config: dict | None = None) -> RunResult:
    """Train for config.schedule.epochs epochs with per-epoch evaluation,
    diagnostics, checkpointing and (optionally) overfitting guard/rollback.

    Writes config.json, epochs.csv, events.jsonl and ckpt/epoch_%04d.zgc
    (file index = completed epochs, so epoch_0000 is the initial state).
    """
    run_dir = Path(out_dir)
    (run_dir / "ckpt").mkdir(parents=True, exist_ok=True)
    guard_cfg = guard_cfg or guard.GuardConfig()
    diag_cfg = diag_cfg or DiagnosticsConfig()
    monitor = guard_cfg.monitor_spec(config.attack)

    cfg_blob = resolved_config or {
        "arch": arch.to_dict(),
        "attack": config.attack.to_dict(),
        "schedule": config.schedule.to_dict(),
        "optimizer": {"momentum": config.momentum, "weight_decay": config.weight_decay,
                      "grad_clip": config.grad_clip},
        "batch_size": config.batch_size,
        "master_seed": config.master_seed,
        "checkpoint_every": config.checkpoint_every,
    }
    (run_dir / "config.json").write_text(json.dumps(cfg_blob, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")

    state = init_state(arch, config)
    data.save_checkpoint(state, checkpoint_path(run_dir, 0))

    probe = diagnostics.make_probe_batch(train_ds, diag_cfg.probe_batch,
                                         streams.RngLineage(config.master_seed))
    prev_probe_delta = attacks.craft(arch, state.params, probe.inputs, probe.labels,
                                     state.attack, probe.stream, want_loss=False).delta

    val_x = val_ds.inputs[:guard_cfg.val_samples] if guard_cfg.val_samples else val_ds.inputs
    val_y = val_ds.labels[:guard_cfg.val_samples] if guard_cfg.val_samples else val_ds.labels

    records: list[diagnostics.EpochRecord] = []
    group_names = state.params.names
    status = "completed"
    epoch = 0
    while epoch < config.schedule.epochs:
        before = state.params
        batch_list = data.batches(train_ds, config.batch_size,
                                  streams.stream(state.lineage, streams.SHUFFLE, epoch))
        state, metrics = train_epoch(state, batch_list, config)
        wupd = diagnostics.weight_update_mse(before, state.params)

        prev_probe_delta, probe_mse, sign_diff = _epoch_diagnostics(
            state, probe, prev_probe_delta, diag_cfg, monitor)

        clean_acc, robust_acc = guard.evaluate_robust(
            arch, state.params, (val_x, val_y), monitor,
            streams.stream(state.lineage, streams.EVAL, epoch))

        record = diagnostics.EpochRecord(
            epoch=epoch, train_loss=metrics["train_loss"],
            train_fgsm_acc=metrics["train_fgsm_acc"], val_clean_acc=clean_acc,
            val_robust_acc=robust_acc, weight_update_mse=wupd,
            probe_pert_mse=probe_mse, mean_l1_x255=metrics["mean_l1_x255"],
            sign_diff_pgd_pct=sign_diff)
        records.append(record)

        if (epoch + 1) % config.checkpoint_every == 0:
            data.save_checkpoint(state, checkpoint_path(run_dir, epoch + 1))
        diagnostics.write_epochs_csv(run_dir / "epochs.csv", group_names, records)
        for hook in hooks:
            hook(record, state)

        if guard_cfg.mode != "off":
            verdict = guard.detect_overfit([r.val_robust_acc for r in records],
                                           absolute_floor=guard_cfg.absolute_floor,
                                           drop_margin=guard_cfg.drop_margin,
                                           warmup=guard_cfg.warmup)
            if verdict.fired:
                guard.append_event(run_dir, {
                    "epoch": verdict.epoch, "type": "overfit",
                    "q_before": state.attack.q, "q_after": state.attack.q,
                    "val_robust_acc": verdict.val_robust_acc})
                if guard_cfg.mode == "rollback":
                    policy = guard_cfg.policy or guard.RollbackPolicy(q_initial=config.attack.q)
                    if state.attack.q + policy.q_increment <= policy.q_max + 1e-12:
                        q_before = state.attack.q
                        state = guard.rollback_step(run_dir, verdict, policy)
                        guard.append_event(run_dir, {
                            "epoch": verdict.epoch, "type": "rollback",
                            "q_before": q_before, "q_after": state.attack.q,
                            "val_robust_acc": verdict.val_robust_acc})
                        resume = verdict.epoch - policy.resume_offset + 1
                        # rewrite the resume checkpoint so its header carries
                        # the escalated q and fresh branch (params unchanged)
                        data.save_checkpoint(state, checkpoint_path(run_dir, resume))
                        records = records[:resume]
                        diagnostics.write_epochs_csv(run_dir / "epochs.csv",
                                                     group_names, records)
                        prev_probe_delta = attacks.craft(
                            arch, state.params, probe.inputs, probe.labels,
                            state.attack, probe.stream, want_loss=False).delta
                        epoch = resume
                        continue
                    data.save_checkpoint(state, checkpoint_path(run_dir, epoch + 1))
                    guard.append_event(run_dir, {
                        "epoch": verdict.epoch, "type": "stopped-qmax",
                        "q_before": state.attack.q, "q_after": state.attack.q,
                        "val_robust_acc": verdict.val_robust_acc})
                    status = "stopped-qmax"
                    break
        epoch += 1

    return RunResult(state=state, records=records, run_dir=run_dir, status=status)


def replay_epoch(run_dir, epoch: int, config: TrainConfig, train_ds: data.Dataset,
                 val_ds: data.Dataset, guard_cfg: "guard.GuardConfig | None" = None,
                 diag_cfg: DiagnosticsConfig | None = None) -> diagnostics.EpochRecord:
    """Recompute one epochs.csv row from the checkpoint preceding it.

    Loads ckpt/epoch_{epoch:04d}.zgc (whose header carries the then-current
    q and rng branch), replays the epoch and re-derives every metric; by the
    determinism contract the result matches the original row byte-for-byte.
    """
    guard_cfg = guard_cfg or guard.GuardConfig()
    diag_cfg = diag_cfg or DiagnosticsConfig()
    state = data.load_checkpoint(checkpoint_path(run_dir, epoch))
    if state.epoch != epoch:
        raise ValueError(f"checkpoint at {checkpoint_path(run_dir, epoch)} is for "
                         f"epoch {state.epoch}, not {epoch}")
    monitor = guard_cfg.monitor_spec(state.attack)
    probe = diagnostics.make_probe_batch(train_ds, diag_cfg.probe_batch,
                                         streams.RngLineage(state.lineage.entropy))
    prev_probe_delta = attacks.craft(state.arch, state.params, probe.inputs, probe.labels,
                                     state.attack, probe.stream, want_loss=False).delta

    before = state.params
    batch_list = data.batches(train_ds, config.batch_size,
                              streams.stream(state.lineage, streams.SHUFFLE, epoch))
    state, metrics = train_epoch(state, batch_list, config)
    wupd = diagnostics.weight_update_mse(before, state.params)
    _, probe_mse, sign_diff = _epoch_diagnostics(state, probe, prev_probe_delta,
                                                 diag_cfg, monitor)
    val_x = val_ds.inputs[:guard_cfg.val_samples] if guard_cfg.val_samples else val_ds.inputs
    val_y = val_ds.labels[:guard_cfg.val_samples] if guard_cfg.val_samples else val_ds.labels
    clean_acc, robust_acc = guard.evaluate_robust(
        state.arch, state.params, (val_x, val_y), monitor,
        streams.stream(state.lineage, streams.EVAL, epoch))
    return diagnostics.EpochRecord(
        epoch=epoch, train_loss=metrics["train_loss"],
        train_fgsm_acc=metrics["train_fgsm_acc"], val_clean_acc=clean_acc,
        val_robust_acc=robust_acc, weight_update_mse=wupd, probe_pert_mse=probe_mse,
        mean_l1_x255=metrics["mean_l1_x255"], sign_diff_pgd_pct=sign_diff)
