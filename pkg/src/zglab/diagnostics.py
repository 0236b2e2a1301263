"""Per-epoch evidence streams: weight-update norms, probe-batch perturbation
drift, mean l1 perturbation size, PGD sign disagreement, saliency dumps.

Everything here is a pure function of its inputs, so epochs.csv can be
recomputed from checkpoints and must come out byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine, streams
from .engine import ArchSpec, ParamSet


@dataclass
class EpochRecord:
    """One diagnostics row; weight_update_mse is [(group name, value), ...]."""

    epoch: int
    train_loss: float
    train_fgsm_acc: float
    val_clean_acc: float
    val_robust_acc: float
    weight_update_mse: list
    probe_pert_mse: float
    mean_l1_x255: float
    sign_diff_pgd_pct: float | None = None


@dataclass
class ProbeBatch:
    """Fixed mini-batch with frozen crafting streams, chosen at run start."""

    inputs: np.ndarray
    labels: np.ndarray
    stream: np.random.SeedSequence
    sign_diff_stream: np.random.SeedSequence


def make_probe_batch(ds, size: int, lineage: streams.RngLineage) -> ProbeBatch:
    rng = streams.generator(lineage, streams.PROBE_SELECT)
    idx = rng.choice(len(ds), size=min(size, len(ds)), replace=False)
    return ProbeBatch(inputs=ds.inputs[idx], labels=ds.labels[idx],
                      stream=streams.stream(lineage, streams.PROBE),
                      sign_diff_stream=streams.stream(lineage, streams.SIGN_DIFF))


def weight_update_mse(before: ParamSet, after: ParamSet) -> list[tuple[str, float]]:
    """Per-group mean squared difference between two same-arch ParamSets."""
    if before.names != after.names:
        raise ValueError(f"group names differ: {before.names} vs {after.names}")
    out = []
    for name in before.names:
        a, b = before.groups[name], after.groups[name]
        if a.shape != b.shape:
            raise ValueError(f"group {name!r} shapes differ: {a.shape} vs {b.shape}")
        out.append((name, float(np.mean((a - b) ** 2))))
    return out


def probe_pert_mse(probe: ProbeBatch, delta_prev: np.ndarray,
                   delta_curr: np.ndarray) -> float:
    """Mean squared drift between two epochs' probe perturbations."""
    if delta_prev.shape != delta_curr.shape or delta_prev.shape != probe.inputs.shape:
        raise ValueError(f"delta shapes {delta_prev.shape}/{delta_curr.shape} do not "
                         f"match probe {probe.inputs.shape}")
    return float(np.mean((delta_curr - delta_prev) ** 2))


def mean_l1_norm(deltas: np.ndarray) -> float:
    """Mean over samples of per-coordinate |delta|, in /255 pixel units."""
    n = deltas.shape[0]
    return float(255.0 * np.abs(deltas).reshape(n, -1).mean(axis=1).mean())


def sign_diff_vs_pgd(delta_method: np.ndarray, delta_pgd: np.ndarray) -> float:
    """Percent of coordinates where both deltas are nonzero with opposite signs."""
    if delta_method.shape != delta_pgd.shape:
        raise ValueError(f"shape mismatch {delta_method.shape} vs {delta_pgd.shape}")
    sm, sp = np.sign(delta_method), np.sign(delta_pgd)
    opposed = (sm != 0) & (sp != 0) & (sm == -sp)
    return float(100.0 * opposed.sum() / delta_method.size)


# -- saliency dumps ------------------------------------------------------------

def _write_pgm(path, u8: np.ndarray) -> None:
    h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(u8, dtype=np.uint8).tobytes())


def _to_u8(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    return np.clip(np.rint(255.0 * (img - lo) / span), 0, 255).astype(np.uint8)


def dump_gradient_images(arch: ArchSpec, params: ParamSet, x: np.ndarray,
                         y: np.ndarray, mg_spec, out_dir, seed) -> list[Path]:
    """Write input / |input grad| / agreement-masked |input grad| PGM triples.

    The gradient magnitude is channel-averaged and min-max normalized per
    image; the masked map reuses the unmasked image's normalization so the
    two are directly comparable. Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ss = streams.as_seedseq(seed)

    g_clean = engine.loss_and_grads(arch, params, x, y,
                                    want_input_grad=True).input_grad
    sign_sum = None
    for j in range(mg_spec.n_samples):
        rng = np.random.default_rng(streams.substream(ss, j))
        delta_j = rng.uniform(-mg_spec.epsilon, mg_spec.epsilon, size=x.shape)
        g = engine.loss_and_grads(arch, params, x + delta_j, y,
                                  want_input_grad=True).input_grad
        s = np.sign(g).astype(np.int64)
        sign_sum = s if sign_sum is None else sign_sum + s
    agree = np.abs(sign_sum) == mg_spec.n_samples

    paths = []
    for i in range(x.shape[0]):
        sal = np.abs(g_clean[i]).mean(axis=0)
        sal_masked = (np.abs(g_clean[i]) * agree[i]).mean(axis=0)
        lo, hi = float(sal.min()), float(sal.max())
        triple = [
            (out_dir / f"sample_{i:03d}_input.pgm", _to_u8(x[i].mean(axis=0), 0.0, 1.0)),
            (out_dir / f"sample_{i:03d}_grad.pgm", _to_u8(sal, lo, hi)),
            (out_dir / f"sample_{i:03d}_grad_masked.pgm", _to_u8(sal_masked, lo, hi)),
        ]
        for path, img in triple:
            _write_pgm(path, img)
            paths.append(path)
    return paths


# -- epochs.csv ------------------------------------------------------------------

_FIXED_COLUMNS = ("epoch", "train_loss", "train_fgsm_acc", "val_clean_acc",
                  "val_robust_acc", "probe_pert_mse", "mean_l1_x255",
                  "sign_diff_pgd_pct")


def csv_header(group_names) -> str:
    return ",".join(_FIXED_COLUMNS + tuple(f"wupd_mse_{g}" for g in group_names))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def csv_row(record: EpochRecord) -> str:
    cells = [record.epoch, record.train_loss, record.train_fgsm_acc,
             record.val_clean_acc, record.val_robust_acc, record.probe_pert_mse,
             record.mean_l1_x255, record.sign_diff_pgd_pct]
    cells += [v for _, v in record.weight_update_mse]
    return ",".join(_fmt(c) for c in cells)


def write_epochs_csv(path, group_names, records) -> None:
    lines = [csv_header(group_names)] + [csv_row(r) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_epochs_csv(path) -> list[dict]:
    """Rows as dicts; numeric fields parsed, empty cells become None."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no epochs.csv at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        cells = line.split(",")
        row = {}
        for key, cell in zip(header, cells):
            if cell == "":
                row[key] = None
            elif key == "epoch":
                row[key] = int(cell)
            else:
                row[key] = float(cell)
        rows.append(row)
    return rows
