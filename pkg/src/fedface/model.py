"""Shared-backbone / per-party-head model with analytic gradients.

The backbone is a small fully connected network ``f(theta)`` mapping inputs
to embeddings.  Each party owns a bias-free linear head ``c_i(omega_i)``,
either a plain softmax cross-entropy head or a CosFace-style cosine-margin
head acting on L2-normalized embeddings.

Parameter layout (portable across checkpoints): layers in order, and for
each layer the weight matrix of shape ``(fan_in, fan_out)`` in row-major
order followed by its bias of length ``fan_out``.  Head parameters are a
``(feature_dim, num_classes)`` matrix in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .params import ParamError, as_paramvec

ACTIVATIONS = ("tanh", "relu")
HEAD_LOSSES = ("softmax_ce", "cosine_margin")
_NORM_EPS = 1e-12


class ModelError(ParamError):
    """Dimension mismatch between a model spec and its inputs."""


class DivergenceError(ArithmeticError):
    """Loss or parameters became non-finite."""


@dataclass(frozen=True)
class BackboneSpec:
    input_dim: int = 16
    hidden_dims: tuple[int, ...] = (32,)
    feature_dim: int = 16
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim)
        if any(int(d) <= 0 for d in dims):
            raise ModelError(f"all backbone dims must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.feature_dim)

    @property
    def num_params(self) -> int:
        d = self.dims
        return sum(a * b + b for a, b in zip(d[:-1], d[1:]))


@dataclass(frozen=True)
class HeadSpec:
    feature_dim: int = 16
    num_classes: int = 2
    loss: str = "softmax_ce"
    scale_s: float = 64.0
    margin_m: float = 0.35

    def __post_init__(self):
        if self.feature_dim <= 0 or self.num_classes <= 0:
            raise ModelError("head dims must be positive")
        if self.loss not in HEAD_LOSSES:
            raise ModelError(f"loss must be one of {HEAD_LOSSES}, got {self.loss!r}")
        if not 0.0 <= self.margin_m < 1.0:
            raise ModelError(f"margin_m must lie in [0, 1), got {self.margin_m}")
        if self.scale_s <= 0:
            raise ModelError(f"scale_s must be positive, got {self.scale_s}")

    @property
    def num_params(self) -> int:
        return self.feature_dim * self.num_classes


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.inputs.shape[0]


class LossGrads(NamedTuple):
    loss: float
    g: np.ndarray
    h: np.ndarray


def init_backbone(spec: BackboneSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-scaled Gaussian weights, zero biases."""
    chunks = []
    d = spec.dims
    for fan_in, fan_out in zip(d[:-1], d[1:]):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        chunks.append(rng.normal(0.0, std, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return as_paramvec(np.concatenate(chunks), copy=False)


def init_head(spec: HeadSpec, rng: np.random.Generator, sigma: float = 0.01) -> np.ndarray:
    return as_paramvec(rng.normal(0.0, sigma, size=spec.num_params), copy=False)


def unpack_backbone(spec: BackboneSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size != spec.num_params:
        raise ModelError(f"backbone expects {spec.num_params} parameters, got {theta.size}")
    layers, pos = [], 0
    d = spec.dims
    for fan_in, fan_out in zip(d[:-1], d[1:]):
        W = theta[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = theta[pos:pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return layers


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _activate_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return 1.0 - a * a if kind == "tanh" else (z > 0.0).astype(np.float64)


def _check_inputs(spec: BackboneSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ModelError(f"inputs must have shape (n, {spec.input_dim}), got {x.shape}")
    return x


def forward_features(spec: BackboneSpec, theta: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Embeddings of ``inputs`` under backbone parameters ``theta``.

    Hidden layers apply the configured activation; the final layer is linear.
    """
    x = _check_inputs(spec, inputs)
    layers = unpack_backbone(spec, theta)
    for W, b in layers[:-1]:
        x = _activate(spec.activation, x @ W + b)
    W, b = layers[-1]
    return x @ W + b


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True) + _NORM_EPS)
    return x / norms, norms


def _head_logits(h_spec: HeadSpec, feats: np.ndarray, omega: np.ndarray, labels: np.ndarray):
    Om = omega.reshape(h_spec.feature_dim, h_spec.num_classes)
    if h_spec.loss == "softmax_ce":
        return feats @ Om, None
    fhat, fnorm = _normalize_rows(feats)
    what, wnorm = _normalize_rows(Om.T)
    cos = fhat @ what.T
    logits = h_spec.scale_s * cos
    logits[np.arange(len(labels)), labels] -= h_spec.scale_s * h_spec.margin_m
    return logits, (fhat, fnorm, what, wnorm)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and softmax probabilities."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1))
    probs = np.exp(z - lse[:, None])
    return lse - z[np.arange(len(labels)), labels], probs


def _check_batch(b_spec: BackboneSpec, h_spec: HeadSpec, theta, omega, batch: Batch):
    if b_spec.feature_dim != h_spec.feature_dim:
        raise ModelError("backbone feature_dim and head feature_dim differ")
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim != 1 or omega.size != h_spec.num_params:
        raise ModelError(f"head expects {h_spec.num_params} parameters, got {omega.size}")
    x = _check_inputs(b_spec, batch.inputs)
    labels = np.asarray(batch.labels, dtype=np.int64)
    if len(x) == 0:
        raise ModelError("empty batch")
    if labels.shape != (len(x),):
        raise ModelError("labels must be one per input row")
    if labels.min() < 0 or labels.max() >= h_spec.num_classes:
        raise ModelError(f"labels must lie in [0, {h_spec.num_classes})")
    return x, labels, omega


def per_sample_loss_and_grads(b_spec: BackboneSpec, h_spec: HeadSpec, theta, omega, batch: Batch):
    """Like :func:`loss_and_grads` but also returns the per-sample losses."""
    x, labels, omega = _check_batch(b_spec, h_spec, theta, omega, batch)
    layers = unpack_backbone(b_spec, theta)
    n = len(x)

    # overflow shows up as a non-finite loss, reported below as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        acts, pre = [x], []
        for W, b in layers[:-1]:
            z = acts[-1] @ W + b
            pre.append(z)
            acts.append(_activate(b_spec.activation, z))
        W_last, b_last = layers[-1]
        feats = acts[-1] @ W_last + b_last

        logits, cache = _head_logits(h_spec, feats, omega, labels)
        losses, probs = _cross_entropy(logits, labels)
        loss = float(np.mean(losses))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite training loss")

    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    Om = omega.reshape(h_spec.feature_dim, h_spec.num_classes)
    if h_spec.loss == "softmax_ce":
        dOm = feats.T @ dlogits
        dfeats = dlogits @ Om.T
    else:
        fhat, fnorm, what, wnorm = cache
        dcos = h_spec.scale_s * dlogits
        dfhat = dcos @ what
        dwhat = dcos.T @ fhat
        # d(x/|x|) = (du - u <u, du>) / |x|
        dfeats = (dfhat - fhat * np.sum(fhat * dfhat, axis=1, keepdims=True)) / fnorm
        dOm = ((dwhat - what * np.sum(what * dwhat, axis=1, keepdims=True)) / wnorm).T

    grads = []
    delta = dfeats
    grads.append((acts[-1].T @ delta, delta.sum(axis=0)))
    for li in range(len(layers) - 2, -1, -1):
        W_next = layers[li + 1][0]
        delta = (delta @ W_next.T) * _activate_grad(b_spec.activation, pre[li], acts[li + 1])
        grads.append((acts[li].T @ delta, delta.sum(axis=0)))
    grads.reverse()
    g = np.concatenate([part.reshape(-1) for pair in grads for part in pair])
    return losses, LossGrads(loss, g, dOm.reshape(-1))


def loss_and_grads(b_spec: BackboneSpec, h_spec: HeadSpec, theta, omega, batch: Batch) -> LossGrads:
    """Mean cross-entropy over ``batch`` and its gradients.

    Returns:
        ``(loss, g, h)`` where ``g`` is the gradient with respect to the
        backbone parameters and ``h`` with respect to the head parameters.

    Raises:
        ModelError: on any shape inconsistency.
        DivergenceError: if the loss is not finite.
    """
    return per_sample_loss_and_grads(b_spec, h_spec, theta, omega, batch)[1]


def loss_only(b_spec: BackboneSpec, h_spec: HeadSpec, theta, omega, batch: Batch) -> float:
    x, labels, omega = _check_batch(b_spec, h_spec, theta, omega, batch)
    feats = forward_features(b_spec, theta, x)
    logits, _ = _head_logits(h_spec, feats, omega, labels)
    return float(np.mean(_cross_entropy(logits, labels)[0]))


def finite_difference_check(fun: Callable[[np.ndarray], float], x: np.ndarray,
                            analytic: np.ndarray, step: float) -> float:
    """Max relative error between ``analytic`` and central differences of ``fun``."""
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    worst = 0.0
    for j in range(x.size):
        orig = x[j]
        x[j] = orig + step
        up = fun(x)
        x[j] = orig - step
        down = fun(x)
        x[j] = orig
        fd = (up - down) / (2.0 * step)
        a = float(analytic[j])
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst


def gradient_check(b_spec: BackboneSpec, h_spec: HeadSpec, theta, omega, batch: Batch,
                   fd_step: float = 1e-5, perturb: float = 0.0) -> float:
    """Compare analytic gradients against central finite differences.

    ``perturb`` adds a constant offset to the analytic gradients; it exists
    only so callers can confirm the check actually fails on wrong gradients.
    """
    theta = np.asarray(theta, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    _, g, h = loss_and_grads(b_spec, h_spec, theta, omega, batch)
    err_theta = finite_difference_check(
        lambda t: loss_only(b_spec, h_spec, t, omega, batch), theta, g + perturb, fd_step)
    err_omega = finite_difference_check(
        lambda o: loss_only(b_spec, h_spec, theta, o, batch), omega, h + perturb, fd_step)
    return max(err_theta, err_omega)
