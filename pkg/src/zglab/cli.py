"""Command-line frontend: train / eval / diagnose.

Run configs are JSON with typo safety (unknown keys are rejected) and all
defaults materialized into the resolved config that lands in the run
directory. Exit codes are stable: 0 success, 1 error, 2 guard-triggered
termination at q_max.
"""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from . import attacks, data, diagnostics, guard, trainer
from .attacks import AttackSpec, attack_defaults
from .data import DataFormatError
from .engine import ArchSpec
from .guard import GuardConfig, GuardError, RollbackPolicy
from .trainer import DiagnosticsConfig, LrSchedule, TrainConfig

EVAL_SCHEMA = 1


class ConfigError(ValueError):
    pass


def parse_epsilon(value) -> float:
    """Accept a fraction string like "8/255" or a decimal."""
    if isinstance(value, (int, float)):
        eps = float(value)
    else:
        try:
            eps = float(Fraction(str(value)))
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"bad epsilon {value!r}: {e}") from None
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"epsilon {eps} outside [0,1)")
    return eps


def _check_keys(obj: dict, allowed, where: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}; "
                          f"allowed: {sorted(allowed)}")


def _get(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return obj[key]


# -- run config -----------------------------------------------------------------

_ATTACK_KEYS = ("kind", "epsilon", "alpha_ratio", "q", "n_samples", "steps",
                "restarts", "clamp_image_box", "random_start", "zero_final_delta")
_DATA_KEYS = {
    "synth-blobs": ("kind", "n", "classes", "noise", "seed", "val_fraction"),
    "idx": ("kind", "train_images", "train_labels", "val_images", "val_labels",
            "val_fraction", "limit"),
    "cifar": ("kind", "train_files", "val_files", "val_fraction", "limit"),
}


def resolve_config(raw: dict, seed: int | None) -> dict:
    """Validate a run config and materialize every default."""
    _check_keys(raw, ("schema", "arch", "data", "attack", "schedule", "optimizer",
                      "batch_size", "seed", "checkpoint_every", "guard",
                      "diagnostics"), "config")
    if raw.get("schema", 1) != 1:
        raise ConfigError(f"unsupported config schema {raw.get('schema')!r}")

    arch_raw = _get(raw, "arch", "config")
    _check_keys(arch_raw, ("kind", "input_shape", "num_classes"), "arch")
    arch = ArchSpec(kind=_get(arch_raw, "kind", "arch"),
                    input_shape=tuple(_get(arch_raw, "input_shape", "arch")),
                    num_classes=int(_get(arch_raw, "num_classes", "arch")))

    data_raw = dict(_get(raw, "data", "config"))
    kind = _get(data_raw, "kind", "data")
    if kind not in _DATA_KEYS:
        raise ConfigError(f"unknown data kind {kind!r}; expected one of {sorted(_DATA_KEYS)}")
    _check_keys(data_raw, _DATA_KEYS[kind], f"data ({kind})")
    if kind == "synth-blobs":
        data_raw.setdefault("n", 1024)
        data_raw.setdefault("classes", 8)
        data_raw.setdefault("noise", 0.15)
        data_raw.setdefault("seed", 0)
    data_raw.setdefault("val_fraction", 0.2)

    attack_raw = dict(_get(raw, "attack", "config"))
    _check_keys(attack_raw, _ATTACK_KEYS, "attack")
    akind = _get(attack_raw, "kind", "attack")
    eps = parse_epsilon(_get(attack_raw, "epsilon", "attack"))
    overrides = {k: v for k, v in attack_raw.items() if k not in ("kind", "epsilon")}
    try:
        attack = attack_defaults(akind, eps, **overrides)
    except (KeyError, TypeError):
        raise ConfigError(f"unknown attack kind {akind!r}") from None

    sched_raw = dict(_get(raw, "schedule", "config"))
    _check_keys(sched_raw, ("kind", "max_lr", "epochs", "drop_epoch", "drop_factor"),
                "schedule")
    schedule = LrSchedule(**sched_raw)

    opt_raw = dict(raw.get("optimizer", {}))
    _check_keys(opt_raw, ("momentum", "weight_decay", "grad_clip"), "optimizer")
    opt = {"momentum": opt_raw.get("momentum", 0.9),
           "weight_decay": opt_raw.get("weight_decay", 5e-4),
           "grad_clip": opt_raw.get("grad_clip", None)}

    guard_raw = dict(raw.get("guard", {}))
    _check_keys(guard_raw, ("mode", "absolute_floor", "drop_margin", "warmup",
                            "q_increment", "q_max", "resume_offset", "val_samples",
                            "monitor_steps", "monitor_restarts", "monitor_alpha_ratio"),
                "guard")
    guard_cfg = {
        "mode": guard_raw.get("mode", "off"),
        "absolute_floor": guard_raw.get("absolute_floor", 0.10),
        "drop_margin": guard_raw.get("drop_margin", 0.20),
        "warmup": guard_raw.get("warmup", 3),
        "q_increment": guard_raw.get("q_increment", 0.10),
        "q_max": guard_raw.get("q_max", 0.70),
        "resume_offset": guard_raw.get("resume_offset", 1),
        "val_samples": guard_raw.get("val_samples", None),
        "monitor_steps": guard_raw.get("monitor_steps", 10),
        "monitor_restarts": guard_raw.get("monitor_restarts", 1),
        "monitor_alpha_ratio": guard_raw.get("monitor_alpha_ratio", 0.25),
    }
    if guard_cfg["mode"] not in ("off", "detect", "rollback"):
        raise ConfigError(f"unknown guard mode {guard_cfg['mode']!r}")

    diag_raw = dict(raw.get("diagnostics", {}))
    _check_keys(diag_raw, ("probe_batch", "sign_diff_pgd", "saliency_samples"),
                "diagnostics")
    diag = {"probe_batch": diag_raw.get("probe_batch", 128),
            "sign_diff_pgd": diag_raw.get("sign_diff_pgd", False),
            "saliency_samples": diag_raw.get("saliency_samples", 0)}

    master_seed = seed if seed is not None else int(raw.get("seed", 0))
    return {
        "schema": 1,
        "arch": arch.to_dict(),
        "data": data_raw,
        "attack": attack.to_dict(),
        "schedule": schedule.to_dict(),
        "optimizer": opt,
        "batch_size": int(raw.get("batch_size", 128)),
        "seed": master_seed,
        "checkpoint_every": int(raw.get("checkpoint_every", 1)),
        "guard": guard_cfg,
        "diagnostics": diag,
    }


def build_datasets(data_cfg: dict, data_root) -> tuple[data.Dataset, data.Dataset]:
    """Materialize (train, val) from a resolved data config."""
    root = Path(data_root) if data_root else Path(".")
    kind = data_cfg["kind"]
    if kind == "synth-blobs":
        ds = data.synth_blobs(data_cfg["seed"], data_cfg["n"], data_cfg["classes"],
                              noise=data_cfg["noise"])
        return data.train_val_split(ds, data_cfg["val_fraction"], data_cfg["seed"] + 1)
    if kind == "idx":
        train = data.load_idx(root / data_cfg["train_images"],
                              root / data_cfg["train_labels"])
        if data_cfg.get("limit"):
            train = train.subset(slice(0, int(data_cfg["limit"])))
        if data_cfg.get("val_images"):
            val = data.load_idx(root / data_cfg["val_images"],
                                root / data_cfg["val_labels"])
            return train, val.subset(slice(None), "val")
        return data.train_val_split(train, data_cfg["val_fraction"], 0)
    train = data.load_cifar(*(root / p for p in data_cfg["train_files"]))
    if data_cfg.get("limit"):
        train = train.subset(slice(0, int(data_cfg["limit"])))
    if data_cfg.get("val_files"):
        val = data.load_cifar(*(root / p for p in data_cfg["val_files"]))
        return train, val.subset(slice(None), "val")
    return data.train_val_split(train, data_cfg["val_fraction"], 0)


def objects_from_resolved(cfg: dict):
    """Typed config objects from a resolved config dict."""
    arch = ArchSpec.from_dict(cfg["arch"])
    attack = AttackSpec.from_dict(cfg["attack"])
    schedule = LrSchedule.from_dict(cfg["schedule"])
    train_cfg = TrainConfig(attack=attack, schedule=schedule,
                            momentum=cfg["optimizer"]["momentum"],
                            weight_decay=cfg["optimizer"]["weight_decay"],
                            grad_clip=cfg["optimizer"]["grad_clip"],
                            batch_size=cfg["batch_size"],
                            master_seed=cfg["seed"],
                            checkpoint_every=cfg["checkpoint_every"])
    g = cfg["guard"]
    monitor = AttackSpec(kind="pgd", epsilon=attack.epsilon,
                         alpha_ratio=g["monitor_alpha_ratio"], steps=g["monitor_steps"],
                         restarts=g["monitor_restarts"],
                         clamp_image_box=attack.clamp_image_box)
    guard_cfg = GuardConfig(mode=g["mode"], monitor=monitor,
                            absolute_floor=g["absolute_floor"],
                            drop_margin=g["drop_margin"], warmup=g["warmup"],
                            policy=RollbackPolicy(q_initial=attack.q,
                                                  q_increment=g["q_increment"],
                                                  q_max=g["q_max"],
                                                  resume_offset=g["resume_offset"]),
                            val_samples=g["val_samples"])
    d = cfg["diagnostics"]
    diag_cfg = DiagnosticsConfig(probe_batch=d["probe_batch"],
                                 sign_diff_pgd=d["sign_diff_pgd"],
                                 saliency_samples=d["saliency_samples"])
    return arch, train_cfg, guard_cfg, diag_cfg


# -- subcommands ------------------------------------------------------------------

def cmd_train(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        print(f"error: output directory {out} exists and is not empty", file=sys.stderr)
        return 1
    raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    cfg = resolve_config(raw, args.seed)
    arch, train_cfg, guard_cfg, diag_cfg = objects_from_resolved(cfg)
    train_ds, val_ds = build_datasets(cfg["data"], args.data)
    if train_ds.input_shape != arch.input_shape:
        raise ConfigError(f"dataset input shape {train_ds.input_shape} does not match "
                          f"arch {arch.input_shape}")
    result = trainer.train_run(arch, train_cfg, train_ds, val_ds, out,
                               guard_cfg=guard_cfg, diag_cfg=diag_cfg,
                               resolved_config=cfg)
    last = result.records[-1]
    print(f"run {result.status}: {len(result.records)} epochs in {out}")
    print(f"final val clean {last.val_clean_acc:.4f} robust {last.val_robust_acc:.4f}")
    if result.status == "stopped-qmax":
        return 2
    return 0


def _load_eval_dataset(path, split: str) -> data.Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    cfg = json.loads(path.read_text(encoding="utf-8"))
    kind = cfg.get("kind")
    if kind not in _DATA_KEYS:
        raise ConfigError(f"unknown data kind {kind!r} in {path}")
    _check_keys(cfg, _DATA_KEYS[kind], f"data ({kind})")
    if kind == "synth-blobs":
        cfg.setdefault("n", 1024)
        cfg.setdefault("classes", 8)
        cfg.setdefault("noise", 0.15)
        cfg.setdefault("seed", 0)
    cfg.setdefault("val_fraction", 0.2)
    train_ds, val_ds = build_datasets(cfg, path.parent)
    return train_ds if split == "train" else val_ds


def cmd_eval(args) -> int:
    state = data.load_checkpoint(args.checkpoint)
    ds = _load_eval_dataset(args.data, args.split)
    if ds.input_shape != state.arch.input_shape:
        print(f"error: checkpoint arch expects input {state.arch.input_shape} but "
              f"dataset has {ds.input_shape}", file=sys.stderr)
        return 1
    eps = parse_epsilon(args.epsilon) if args.epsilon is not None else state.attack.epsilon
    if args.attack == "none":
        clean, _ = guard.evaluate_robust(state.arch, state.params, ds,
                                         AttackSpec(kind="fgsm", epsilon=0.0,
                                                    random_start=False), args.seed)
        robust = clean
        attack_blob = {"kind": "none"}
    else:
        if args.attack == "pgd":
            spec = AttackSpec(kind="pgd", epsilon=eps, alpha_ratio=args.alpha_ratio,
                              steps=args.steps, restarts=args.restarts)
        else:
            spec = AttackSpec(kind="fgsm", epsilon=eps, alpha_ratio=1.0,
                              random_start=False)
        clean, robust = guard.evaluate_robust(state.arch, state.params, ds, spec,
                                              args.seed)
        attack_blob = spec.to_dict()
    report = {"schema": EVAL_SCHEMA, "checkpoint": str(args.checkpoint),
              "epoch": state.epoch, "split": args.split, "samples": len(ds),
              "attack": attack_blob, "clean_acc": clean, "robust_acc": robust}
    out_path = Path(args.checkpoint).with_suffix(".eval.json") \
        if args.report is None else Path(args.report)
    out_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    print(f"clean accuracy  {clean:.4f}")
    print(f"robust accuracy {robust:.4f}  ({args.attack})")
    print(f"report written to {out_path}")
    return 0


def cmd_diagnose(args) -> int:
    run_dir = Path(args.run)
    rows = diagnostics.read_epochs_csv(run_dir / "epochs.csv")
    events = guard.read_events(run_dir)
    fired = {e["epoch"] for e in events if e["type"] == "overfit"}
    print("epoch  train_loss  fgsm_acc  val_clean  val_robust  probe_mse   l1x255")
    for r in rows:
        flag = "  <- overfit" if r["epoch"] in fired else ""
        print(f"{r['epoch']:5d}  {r['train_loss']:10.4f}  {r['train_fgsm_acc']:8.4f}  "
              f"{r['val_clean_acc']:9.4f}  {r['val_robust_acc']:10.4f}  "
              f"{r['probe_pert_mse']:9.3e}  {r['mean_l1_x255']:7.3f}{flag}")
    if not events:
        print("no overfitting detected")
    for e in events:
        if e["type"] == "rollback":
            print(f"rollback at epoch {e['epoch']}: q {e['q_before']} -> {e['q_after']}")
        elif e["type"] == "stopped-qmax":
            print(f"stopped at epoch {e['epoch']}: q_max reached at q {e['q_before']}")
    best = guard.early_stop_select(run_dir)
    print(f"best epoch by validation robust accuracy: {best}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="zglab",
                                     description="single-step adversarial training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run adversarial training from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="root for relative dataset paths")
    p.add_argument("--out", required=True, help="run directory (absent or empty)")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under an attack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset descriptor JSON (or directory)")
    p.add_argument("--attack", choices=("pgd", "fgsm", "none"), default="pgd")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--alpha-ratio", type=float, default=0.25)
    p.add_argument("--epsilon", default=None, help='e.g. "8/255"; default: checkpoint value')
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None, help="report path (default: next to checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="summarize a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_diagnose)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, GuardError, ValueError,
            FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
