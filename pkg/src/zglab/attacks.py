"""L-infinity perturbation crafting.

Single-step attacks (FGSM, FGSM-RS, ZeroGrad, MultiGrad) and multi-step
PGD with restarts. All crafting is deterministic given a seed stream:
MultiGrad's random starts and PGD's restarts each draw from a fixed-index
substream and are combined in stream order, so results do not depend on
execution schedule.

Step sizes are ratios of epsilon: alpha_ratio=1 is the classic FGSM step,
alpha_ratio=2 spans the whole ball from any random start.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import engine, streams
from .engine import ArchSpec, ParamSet

ATTACK_KINDS = ("fgsm", "fgsm-rs", "pgd", "zerograd", "multigrad")


@dataclass(frozen=True)
class AttackSpec:
    """Attack configuration; epsilon and deltas live in [0,1] pixel units."""

    kind: str
    epsilon: float
    alpha_ratio: float = 1.0
    q: float = 0.0                  # zerograd: quantile of |grad| to zero
    n_samples: int = 3              # multigrad: number of random starts
    steps: int = 10                 # pgd
    restarts: int = 1               # pgd
    clamp_image_box: bool = True
    random_start: bool = True       # pgd/fgsm-rs; False gives the zero-init variants
    zero_final_delta: bool = False  # zerograd: zero the output instead of the gradient

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0,1), got {self.epsilon}")
        if self.alpha_ratio <= 0:
            raise ValueError("alpha_ratio must be positive")
        if self.kind in ("fgsm", "fgsm-rs", "zerograd") and self.alpha_ratio > 2.0:
            raise ValueError(f"alpha_ratio {self.alpha_ratio} > 2 for {self.kind}")
        if self.kind == "multigrad" and self.alpha_ratio > 1.0:
            raise ValueError(f"alpha_ratio {self.alpha_ratio} > 1 for multigrad (zero start)")
        if not 0.0 <= self.q < 1.0:
            raise ValueError(f"q must lie in [0,1), got {self.q}")
        if self.n_samples < 1 or self.steps < 1 or self.restarts < 1:
            raise ValueError("n_samples, steps and restarts must be positive")

    @property
    def step_size(self) -> float:
        return self.alpha_ratio * self.epsilon

    def with_q(self, q: float) -> "AttackSpec":
        return dataclasses.replace(self, q=q)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "AttackSpec":
        return AttackSpec(**d)


def attack_defaults(kind: str, epsilon: float, **overrides) -> AttackSpec:
    """Reference configuration per attack kind."""
    base = {
        "fgsm": dict(alpha_ratio=1.0, random_start=False),
        "fgsm-rs": dict(alpha_ratio=1.25),
        "zerograd": dict(alpha_ratio=2.0, q=0.35),
        "multigrad": dict(alpha_ratio=1.0, n_samples=3),
        "pgd": dict(alpha_ratio=0.25, steps=10, restarts=1),
    }[kind]
    base.update(overrides)
    return AttackSpec(kind=kind, epsilon=epsilon, **base)


@dataclass
class Perturbation:
    """Crafted delta plus, where applicable, which coordinates were suppressed."""

    delta: np.ndarray
    zero_mask: np.ndarray | None = None
    loss_at_delta: float | None = None


@dataclass
class AgreementMask:
    """Mean of sign tensors and the all-agree (|omega| == 1) mask."""

    omega: np.ndarray
    mask: np.ndarray


# -- quantile thresholding ---------------------------------------------------

def quantile_threshold(abs_grad: np.ndarray, q: float) -> float:
    """Linearly interpolated empirical q-quantile of an ascending sort."""
    v = np.asarray(abs_grad, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("quantile of an empty vector")
    if not 0.0 <= q < 1.0:
        raise ValueError(f"q must lie in [0,1), got {q}")
    v = np.sort(v)
    h = q * (v.size - 1)
    lo = int(h)
    frac = h - lo
    if frac == 0.0:
        return float(v[lo])
    return float(v[lo] + frac * (v[lo + 1] - v[lo]))


def _row_thresholds(flat_abs: np.ndarray, q: float) -> np.ndarray:
    """Per-row interpolated quantile for a [B, d] matrix."""
    v = np.sort(flat_abs, axis=1)
    h = q * (v.shape[1] - 1)
    lo = int(h)
    frac = h - lo
    if frac == 0.0:
        return v[:, lo]
    return v[:, lo] + frac * (v[:, lo + 1] - v[:, lo])


def _zero_small_rows(grad: np.ndarray, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero |g| strictly below each sample's own quantile. grad [B, ...]."""
    b = grad.shape[0]
    absg = np.abs(grad).reshape(b, -1)
    t = _row_thresholds(absg, q).reshape((b,) + (1,) * (grad.ndim - 1))
    mask = np.abs(grad) < t
    return np.where(mask, 0.0, grad), mask


def zero_small_grads(grad: np.ndarray, q: float) -> tuple[np.ndarray, np.ndarray]:
    """One sample's gradient with sub-quantile magnitudes zeroed.

    Strict comparison: q=0 is a guaranteed no-op and a constant-magnitude
    gradient is never touched. Returns (zeroed gradient, zeroed-coords mask).
    """
    if grad.size == 0:
        raise ValueError("empty gradient")
    if not 0.0 <= q < 1.0:
        raise ValueError(f"q must lie in [0,1), got {q}")
    zeroed, mask = _zero_small_rows(grad[None], q)
    return zeroed[0], mask[0]


def sign_agreement_mask(grads) -> AgreementMask:
    """Agreement over N same-shape gradients of one sample; sgn(0) = 0."""
    stack = np.stack([np.asarray(g) for g in grads])
    n = stack.shape[0]
    ssum = np.sign(stack).astype(np.int64).sum(axis=0)
    return AgreementMask(omega=ssum / n, mask=np.abs(ssum) == n)


# -- crafting ----------------------------------------------------------------

def _box_clip(delta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Keep x + delta inside the [0,1] image box."""
    return np.clip(delta, -x, 1.0 - x)


def _finalize(delta, x, spec):
    delta = np.clip(delta, -spec.epsilon, spec.epsilon)
    if spec.clamp_image_box:
        delta = _box_clip(delta, x)
    return delta


def _mean_loss(arch, params, x, delta, y) -> float:
    logits = engine.forward(arch, params, x + delta)
    return float(engine.per_sample_losses(logits, y).mean())


def _craft_single_step(arch, params, x, y, spec, seed, want_loss):
    """Shared FGSM / FGSM-RS / ZeroGrad path; they differ only in init and zeroing."""
    ss = streams.as_seedseq(seed)
    if spec.random_start and spec.kind != "fgsm":
        rng = np.random.default_rng(streams.substream(ss, 0))
        delta0 = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape)
    else:
        delta0 = np.zeros_like(x)
    g = engine.loss_and_grads(arch, params, x + delta0, y,
                              want_input_grad=True).input_grad
    zero_mask = None
    if spec.kind == "zerograd" and not spec.zero_final_delta:
        g, zero_mask = _zero_small_rows(g, spec.q)
    delta = np.clip(delta0 + spec.step_size * np.sign(g), -spec.epsilon, spec.epsilon)
    if spec.kind == "zerograd" and spec.zero_final_delta:
        _, zero_mask = _zero_small_rows(g, spec.q)
        delta = np.where(zero_mask, 0.0, delta)
    if spec.clamp_image_box:
        delta = _box_clip(delta, x)
    loss = _mean_loss(arch, params, x, delta, y) if want_loss else None
    return Perturbation(delta=delta, zero_mask=zero_mask, loss_at_delta=loss)


def craft_fgsm_rs(arch: ArchSpec, params: ParamSet, x: np.ndarray, y: np.ndarray,
                  spec: AttackSpec, seed, want_loss: bool = True) -> Perturbation:
    """Uniform random start in the ball, one sign step, clamp back."""
    if spec.kind not in ("fgsm", "fgsm-rs"):
        raise ValueError(f"craft_fgsm_rs got kind {spec.kind!r}")
    return _craft_single_step(arch, params, x, y, spec, seed, want_loss)


def craft_zerograd(arch: ArchSpec, params: ParamSet, x: np.ndarray, y: np.ndarray,
                   spec: AttackSpec, seed, want_loss: bool = True) -> Perturbation:
    """FGSM-RS with sub-quantile gradient coordinates zeroed per sample.

    Zeroed coordinates keep their random-init value; with
    spec.zero_final_delta the output perturbation is zeroed there instead.
    """
    if spec.kind != "zerograd":
        raise ValueError(f"craft_zerograd got kind {spec.kind!r}")
    return _craft_single_step(arch, params, x, y, spec, seed, want_loss)


def craft_multigrad(arch: ArchSpec, params: ParamSet, x: np.ndarray, y: np.ndarray,
                    spec: AttackSpec, seed, want_loss: bool = True) -> Perturbation:
    """Step from the clean sample only where N random-start gradients agree in sign."""
    if spec.kind != "multigrad":
        raise ValueError(f"craft_multigrad got kind {spec.kind!r}")
    ss = streams.as_seedseq(seed)
    sign_sum = None
    g_first = None
    for j in range(spec.n_samples):
        rng = np.random.default_rng(streams.substream(ss, j))
        delta_j = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape)
        g = engine.loss_and_grads(arch, params, x + delta_j, y,
                                  want_input_grad=True).input_grad
        if j == 0:
            g_first = g
            sign_sum = np.sign(g).astype(np.int64)
        else:
            sign_sum += np.sign(g).astype(np.int64)
    agree = np.abs(sign_sum) == spec.n_samples
    effective = np.where(agree, g_first, 0.0)
    delta = np.clip(spec.step_size * np.sign(effective), -spec.epsilon, spec.epsilon)
    if spec.clamp_image_box:
        delta = _box_clip(delta, x)
    loss = _mean_loss(arch, params, x, delta, y) if want_loss else None
    return Perturbation(delta=delta, zero_mask=~agree, loss_at_delta=loss)


def craft_pgd(arch: ArchSpec, params: ParamSet, x: np.ndarray, y: np.ndarray,
              spec: AttackSpec, seed, want_loss: bool = True,
              mode: str = "train") -> Perturbation:
    """Projected sign ascent with restarts.

    mode "train": per sample, keep the restart with maximal loss.
    mode "eval": the first misclassifying restart wins per sample
    (short-circuit), otherwise maximal loss.
    """
    if spec.kind != "pgd":
        raise ValueError(f"craft_pgd got kind {spec.kind!r}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    ss = streams.as_seedseq(seed)
    b = x.shape[0]
    best_delta = np.zeros_like(x)
    best_loss = np.full(b, -np.inf)
    locked = np.zeros(b, dtype=bool)

    for r in range(spec.restarts):
        if mode == "eval" and locked.all():
            break
        if spec.random_start:
            rng = np.random.default_rng(streams.substream(ss, r))
            delta = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape)
        else:
            delta = np.zeros_like(x)
        for _ in range(spec.steps):
            g = engine.loss_and_grads(arch, params, x + delta, y,
                                      want_input_grad=True).input_grad
            delta = np.clip(delta + spec.step_size * np.sign(g),
                            -spec.epsilon, spec.epsilon)
            if spec.clamp_image_box:
                delta = _box_clip(delta, x)
        logits = engine.forward(arch, params, x + delta)
        losses = engine.per_sample_losses(logits, y)
        miscls = logits.argmax(axis=1) != y

        if mode == "eval":
            take = (~locked) & (miscls | (losses > best_loss))
            locked |= miscls
        else:
            take = losses > best_loss
        best_delta[take] = delta[take]
        best_loss[take] = losses[take]

    loss = float(engine.per_sample_losses(
        engine.forward(arch, params, x + best_delta), y).mean()) if want_loss else None
    return Perturbation(delta=best_delta, loss_at_delta=loss)


_CRAFTERS = {
    "fgsm": craft_fgsm_rs,
    "fgsm-rs": craft_fgsm_rs,
    "zerograd": craft_zerograd,
    "multigrad": craft_multigrad,
    "pgd": craft_pgd,
}


def craft(arch: ArchSpec, params: ParamSet, x: np.ndarray, y: np.ndarray,
          spec: AttackSpec, seed, want_loss: bool = True, **kwargs) -> Perturbation:
    """Dispatch to the crafter for spec.kind."""
    return _CRAFTERS[spec.kind](arch, params, x, y, spec, seed,
                                want_loss=want_loss, **kwargs)
