"""Minimal dense/conv network engine with exact analytic gradients.

Two fixed architectures, float64 throughout, no batch norm and no
residual connections so the input gradient is exact and cheap to check
against finite differences. Arrays are plain numpy ndarrays in
[batch, channels, height, width] layout for images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ARCH_KINDS = ("mlp-small", "cnn-small")

MLP_HIDDEN = 256
CNN_FILTERS = (16, 32)


@dataclass(frozen=True)
class ArchSpec:
    """Network architecture description.

    kind:        "mlp-small" (flatten - dense(256) - relu - dense(256) -
                 relu - dense(classes)) or "cnn-small" (conv3x3x16/s1/p1 -
                 relu - conv3x3x32/s2/p1 - relu - flatten - dense(classes)).
    input_shape: (channels, height, width)
    num_classes: output dimension
    """

    kind: str
    input_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"unknown arch kind {self.kind!r}, expected one of {ARCH_KINDS}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be (C, H, W) positive, got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def input_dim(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes}

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        return ArchSpec(kind=d["kind"], input_shape=tuple(d["input_shape"]),
                        num_classes=int(d["num_classes"]))


@dataclass
class ParamSet:
    """Ordered named parameter groups; order is fixed by the ArchSpec."""

    groups: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.groups)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.groups.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self.groups.items()})

    def allclose(self, other: "ParamSet", rtol=0.0, atol=0.0) -> bool:
        if self.names != other.names:
            return False
        return all(np.allclose(self.groups[k], other.groups[k], rtol=rtol, atol=atol)
                   for k in self.groups)

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact equality."""
        if self.names != other.names:
            return False
        return all(np.array_equal(self.groups[k], other.groups[k]) for k in self.groups)

    def global_l2(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.groups.values())))


@dataclass
class LossGrad:
    """Mean cross-entropy over the batch plus whichever gradients were asked for."""

    loss: float
    logits: np.ndarray
    input_grad: np.ndarray | None = None
    param_grad: ParamSet | None = None


def conv_out_hw(h: int, w: int, stride: int, pad: int = 1, k: int = 3) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def param_shapes(arch: ArchSpec) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every group, in canonical order."""
    c, h, w = arch.input_shape
    k = arch.num_classes
    if arch.kind == "mlp-small":
        d = arch.input_dim
        return [
            ("fc1.weight", (d, MLP_HIDDEN), d),
            ("fc1.bias", (MLP_HIDDEN,), d),
            ("fc2.weight", (MLP_HIDDEN, MLP_HIDDEN), MLP_HIDDEN),
            ("fc2.bias", (MLP_HIDDEN,), MLP_HIDDEN),
            ("fc3.weight", (MLP_HIDDEN, k), MLP_HIDDEN),
            ("fc3.bias", (k,), MLP_HIDDEN),
        ]
    f1, f2 = CNN_FILTERS
    h2, w2 = conv_out_hw(h, w, stride=2)
    flat = f2 * h2 * w2
    return [
        ("conv1.weight", (f1, c, 3, 3), c * 9),
        ("conv1.bias", (f1,), c * 9),
        ("conv2.weight", (f2, f1, 3, 3), f1 * 9),
        ("conv2.bias", (f2,), f1 * 9),
        ("fc.weight", (flat, k), flat),
        ("fc.bias", (k,), flat),
    ]


def init_params(arch: ArchSpec, seed) -> ParamSet:
    """Fan-in-scaled Gaussian weights (std = sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    groups = {}
    for name, shape, fan_in in param_shapes(arch):
        if name.endswith(".bias"):
            groups[name] = np.zeros(shape)
        else:
            groups[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return ParamSet(groups)


def _check_input(arch: ArchSpec, x: np.ndarray) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(arch.input_shape):
        raise ValueError(
            f"input shape {x.shape} does not match arch input "
            f"(batch, {', '.join(map(str, arch.input_shape))})")


def _check_params(arch: ArchSpec, params: ParamSet) -> None:
    expected = [(n, s) for n, s, _ in param_shapes(arch)]
    got = [(n, tuple(v.shape)) for n, v in params.groups.items()]
    if expected != got:
        raise ValueError(f"param groups {got} do not match arch layout {expected}")


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    # derivative at exactly 0 is 0
    return (z > 0.0).astype(np.float64)


def _identity(z):
    return z


def _identity_grad(z):
    return np.ones_like(z)


_ACTIVATIONS = {"relu": (_relu, _relu_grad), "identity": (_identity, _identity_grad)}


# -- conv primitives (3x3 kernels, zero padding 1) ---------------------------

def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """x [B,C,H,W] -> columns [B*Ho*Wo, C*9] for a padded 3x3 window."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B,C,Ho,Wo,3,3]
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * 9)


def _conv_forward(x, weight, bias, stride):
    b, c, h, w = x.shape
    f = weight.shape[0]
    ho, wo = conv_out_hw(h, w, stride)
    cols = _im2col(x, stride)  # [B*P, C*9]
    out = cols @ weight.reshape(f, c * 9).T + bias
    return out.reshape(b, ho * wo, f).transpose(0, 2, 1).reshape(b, f, ho, wo), cols


def _conv_backward(dout, cols, weight, x_shape, stride, want_dx, want_dw=True):
    """dout [B,F,Ho,Wo]; returns (dx or None, dweight or None, dbias or None)."""
    b, c, h, w = x_shape
    f = weight.shape[0]
    ho, wo = dout.shape[2], dout.shape[3]
    dmat = np.ascontiguousarray(
        dout.reshape(b, f, ho * wo).transpose(0, 2, 1)).reshape(b * ho * wo, f)
    dweight = (dmat.T @ cols).reshape(weight.shape) if want_dw else None
    dbias = dmat.sum(axis=0) if want_dw else None
    if not want_dx:
        return None, dweight, dbias
    dcols = dmat @ weight.reshape(f, c * 9)  # [B*P, C*9]
    dwin = dcols.reshape(b, ho, wo, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += dwin[..., di, dj]
    return dxp[:, :, 1:1 + h, 1:1 + w], dweight, dbias


# -- forward / backward ------------------------------------------------------

def _forward_cached(arch, params, x, activation="relu"):
    act, _ = _ACTIVATIONS[activation]
    g = params.groups
    cache = {"x": x}
    if arch.kind == "mlp-small":
        b = x.shape[0]
        flat = x.reshape(b, -1)
        z1 = flat @ g["fc1.weight"] + g["fc1.bias"]
        h1 = act(z1)
        z2 = h1 @ g["fc2.weight"] + g["fc2.bias"]
        h2 = act(z2)
        logits = h2 @ g["fc3.weight"] + g["fc3.bias"]
        cache.update(flat=flat, z1=z1, h1=h1, z2=z2, h2=h2)
    else:
        z1, cols1 = _conv_forward(x, g["conv1.weight"], g["conv1.bias"], stride=1)
        h1 = act(z1)
        z2, cols2 = _conv_forward(h1, g["conv2.weight"], g["conv2.bias"], stride=2)
        h2 = act(z2)
        b = x.shape[0]
        flat = h2.reshape(b, -1)
        logits = flat @ g["fc.weight"] + g["fc.bias"]
        cache.update(z1=z1, h1=h1, cols1=cols1, z2=z2, h2=h2, cols2=cols2, flat=flat)
    return logits, cache


def forward(arch: ArchSpec, params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Logits [batch, num_classes]; pure function of (params, x)."""
    _check_input(arch, x)
    _check_params(arch, params)
    logits, _ = _forward_cached(arch, params, x)
    return logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def per_sample_losses(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cross-entropy of each sample, [batch]."""
    logp = log_softmax(logits)
    return -logp[np.arange(len(y)), y]


def _backward(arch, params, x, cache, dlogits, want_param_grad, want_input_grad,
              activation):
    """Backpropagate a logits cotangent; returns (input_grad, param_grad)."""
    _, act_grad = _ACTIVATIONS[activation]
    g = params.groups
    grads: dict[str, np.ndarray] = {}
    input_grad = None
    if arch.kind == "mlp-small":
        if want_param_grad:
            grads["fc3.weight"] = cache["h2"].T @ dlogits
            grads["fc3.bias"] = dlogits.sum(axis=0)
        dh2 = dlogits @ g["fc3.weight"].T
        dz2 = dh2 * act_grad(cache["z2"])
        if want_param_grad:
            grads["fc2.weight"] = cache["h1"].T @ dz2
            grads["fc2.bias"] = dz2.sum(axis=0)
        dh1 = dz2 @ g["fc2.weight"].T
        dz1 = dh1 * act_grad(cache["z1"])
        if want_param_grad:
            grads["fc1.weight"] = cache["flat"].T @ dz1
            grads["fc1.bias"] = dz1.sum(axis=0)
        if want_input_grad:
            input_grad = (dz1 @ g["fc1.weight"].T).reshape(x.shape)
    else:
        if want_param_grad:
            grads["fc.weight"] = cache["flat"].T @ dlogits
            grads["fc.bias"] = dlogits.sum(axis=0)
        dflat = dlogits @ g["fc.weight"].T
        dh2 = dflat.reshape(cache["h2"].shape)
        dz2 = dh2 * act_grad(cache["z2"])
        dh1, dw2, db2 = _conv_backward(dz2, cache["cols2"], g["conv2.weight"],
                                       cache["h1"].shape, stride=2, want_dx=True,
                                       want_dw=want_param_grad)
        if want_param_grad:
            grads["conv2.weight"] = dw2
            grads["conv2.bias"] = db2
        dz1 = dh1 * act_grad(cache["z1"])
        dx, dw1, db1 = _conv_backward(dz1, cache["cols1"], g["conv1.weight"],
                                      x.shape, stride=1, want_dx=want_input_grad,
                                      want_dw=want_param_grad)
        if want_param_grad:
            grads["conv1.weight"] = dw1
            grads["conv1.bias"] = db1
        if want_input_grad:
            input_grad = dx
    param_grad = None
    if want_param_grad:
        param_grad = ParamSet({name: grads[name] for name, _, _ in param_shapes(arch)})
    return input_grad, param_grad


def loss_and_grads(arch: ArchSpec, params: ParamSet, x: np.ndarray, y: np.ndarray,
                   want_param_grad: bool = False, want_input_grad: bool = False,
                   activation: str = "relu") -> LossGrad:
    """Mean cross-entropy and its exact analytic gradients.

    Requested gradients only; the unrequested ones stay None. `activation`
    other than "relu" is a test-only hook.
    """
    _check_input(arch, x)
    _check_params(arch, params)
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != x.shape[0]:
        raise ValueError(f"labels shape {y.shape} does not match batch {x.shape[0]}")
    if y.min() < 0 or y.max() >= arch.num_classes:
        raise ValueError(f"labels must lie in [0, {arch.num_classes}), got range "
                         f"[{y.min()}, {y.max()}]")

    logits, cache = _forward_cached(arch, params, x, activation)
    b = x.shape[0]
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(b), y].mean())

    result = LossGrad(loss=loss, logits=logits)
    if not (want_param_grad or want_input_grad):
        return result

    dlogits = np.exp(logp)
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b
    result.input_grad, result.param_grad = _backward(
        arch, params, x, cache, dlogits, want_param_grad, want_input_grad,
        activation)
    return result


def logit_sum_input_grad(arch: ArchSpec, params: ParamSet, x: np.ndarray,
                         activation: str = "relu") -> np.ndarray:
    """Input gradient of sum(logits); test hook for the linearity probe.

    With the identity activation the network is affine, so this gradient
    must not depend on x at all.
    """
    _check_input(arch, x)
    _check_params(arch, params)
    logits, cache = _forward_cached(arch, params, x, activation)
    dlogits = np.ones_like(logits)
    input_grad, _ = _backward(arch, params, x, cache, dlogits,
                              want_param_grad=False, want_input_grad=True,
                              activation=activation)
    return input_grad
