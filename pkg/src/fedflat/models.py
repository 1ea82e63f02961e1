"""Small differentiable objectives with exact analytic gradients.

Three objective kinds are supported, all operating on a flat float64
parameter vector:

* ``quadratic``: F(theta) = 0.5 * ||theta - center||^2. Ignores batch
  contents (the batch stands for the full objective), which makes it the
  workhorse for hand-checkable closed forms.
* ``logistic-regression``: multinomial softmax cross-entropy over an
  augmented design (a constant-1 column folds the bias into the weight
  matrix).
* ``mlp2``: one tanh hidden layer followed by a softmax output layer.
  tanh keeps the objective smooth everywhere.

An optional ridge term ``l2_coeff * 0.5 * ||theta||^2`` applies to the whole
parameter vector (bias included). Every public function is pure: identical
inputs give bit-identical outputs.

A central finite-difference oracle (`finite_diff_gradient`) is provided as an
independent check of the analytic gradients; it must never share code with
them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericError

__all__ = [
    "KINDS",
    "ModelSpec",
    "Batch",
    "param_dim",
    "init_params",
    "forward_loss",
    "gradient",
    "finite_diff_gradient",
    "smoothness_constant",
    "predict_proba",
    "predict_labels",
]

KINDS = ("quadratic", "logistic-regression", "mlp2")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Static description of one objective; parameters live elsewhere."""

    kind: str
    input_dim: int = 1
    num_classes: int = 2
    hidden_dim: int = 0
    quadratic_center: Optional[np.ndarray] = None
    l2_coeff: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.kind != "quadratic" and self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == "mlp2" and self.hidden_dim < 1:
            raise ValueError("mlp2 requires hidden_dim >= 1")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be nonnegative")
        if self.kind == "quadratic":
            center = self.quadratic_center
            if center is None:
                center = np.zeros(self.input_dim)
            center = np.asarray(center, dtype=np.float64)
            if center.shape != (self.input_dim,):
                raise ValueError(
                    f"quadratic_center must have shape ({self.input_dim},), got {center.shape}"
                )
            object.__setattr__(self, "quadratic_center", center)


@dataclass
class Batch:
    """A mini-batch view: (batch_size, input_dim) features, integer labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("labels must be 1-D and match the number of feature rows")
        if self.features.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")

    @property
    def size(self) -> int:
        return self.features.shape[0]


def param_dim(spec: ModelSpec) -> int:
    """Number of parameters, a pure function of the spec fields."""
    if spec.kind == "quadratic":
        return spec.input_dim
    if spec.kind == "logistic-regression":
        return spec.num_classes * (spec.input_dim + 1)
    return spec.hidden_dim * (spec.input_dim + 1) + spec.num_classes * (spec.hidden_dim + 1)


def init_params(spec: ModelSpec, rng: np.random.Generator, scale: float = 0.01) -> np.ndarray:
    """Draw a small Gaussian initial parameter vector from the given stream."""
    return scale * rng.standard_normal(param_dim(spec))


def _check_params(spec: ModelSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    d = param_dim(spec)
    if params.shape != (d,):
        raise ValueError(f"parameter vector must have shape ({d},), got {params.shape}")
    if not np.all(np.isfinite(params)):
        raise NumericError("parameter vector contains non-finite entries")
    return params


def _check_batch(spec: ModelSpec, batch: Optional[Batch]) -> Optional[Batch]:
    if spec.kind == "quadratic":
        return batch  # contents unused: the batch stands for the full objective
    if batch is None:
        raise ValueError(f"{spec.kind} requires a batch")
    if batch.features.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch features have {batch.features.shape[1]} columns, expected {spec.input_dim}"
        )
    if np.any(batch.labels < 0) or np.any(batch.labels >= spec.num_classes):
        raise ValueError("labels out of range")
    return batch


def _augment(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _logistic_weights(spec: ModelSpec, params: np.ndarray) -> np.ndarray:
    return params.reshape(spec.num_classes, spec.input_dim + 1)


def _mlp2_weights(spec: ModelSpec, params: np.ndarray):
    n1 = spec.hidden_dim * (spec.input_dim + 1)
    w1 = params[:n1].reshape(spec.hidden_dim, spec.input_dim + 1)
    w2 = params[n1:].reshape(spec.num_classes, spec.hidden_dim + 1)
    return w1, w2


def _logits(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    xb = _augment(features)
    if spec.kind == "logistic-regression":
        return xb @ _logistic_weights(spec, params).T
    w1, w2 = _mlp2_weights(spec, params)
    a1 = np.tanh(xb @ w1.T)
    return _augment(a1) @ w2.T


def forward_loss(spec: ModelSpec, params: np.ndarray, batch: Optional[Batch]) -> float:
    """Mean per-sample loss on the batch plus the ridge term."""
    params = _check_params(spec, params)
    batch = _check_batch(spec, batch)
    reg = 0.5 * spec.l2_coeff * float(params @ params)
    if spec.kind == "quadratic":
        diff = params - spec.quadratic_center
        return 0.5 * float(diff @ diff) + reg
    logp = _log_softmax(_logits(spec, params, batch.features))
    nll = -logp[np.arange(batch.size), batch.labels]
    return float(nll.mean()) + reg


def gradient(spec: ModelSpec, params: np.ndarray, batch: Optional[Batch]) -> np.ndarray:
    """Exact analytic gradient of `forward_loss` with respect to params."""
    params = _check_params(spec, params)
    batch = _check_batch(spec, batch)
    if spec.kind == "quadratic":
        return (params - spec.quadratic_center) + spec.l2_coeff * params

    xb = _augment(batch.features)
    b = batch.size
    if spec.kind == "logistic-regression":
        w = _logistic_weights(spec, params)
        p = _softmax(xb @ w.T)
        p[np.arange(b), batch.labels] -= 1.0
        gw = (p.T @ xb) / b
        return gw.ravel() + spec.l2_coeff * params

    w1, w2 = _mlp2_weights(spec, params)
    z1 = xb @ w1.T
    a1 = np.tanh(z1)
    a1b = _augment(a1)
    p = _softmax(a1b @ w2.T)
    p[np.arange(b), batch.labels] -= 1.0
    dlogits = p / b
    gw2 = dlogits.T @ a1b
    da1 = dlogits @ w2[:, : spec.hidden_dim]
    dz1 = da1 * (1.0 - a1 * a1)
    gw1 = dz1.T @ xb
    return np.concatenate([gw1.ravel(), gw2.ravel()]) + spec.l2_coeff * params


def finite_diff_gradient(
    spec: ModelSpec, params: np.ndarray, batch: Optional[Batch], h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time.

    Verification oracle only; intentionally independent of `gradient`.
    """
    if h <= 0:
        raise ValueError(f"step size h must be positive, got {h}")
    params = _check_params(spec, params)
    out = np.empty_like(params)
    probe = params.copy()
    for j in range(params.shape[0]):
        orig = probe[j]
        probe[j] = orig + h
        up = forward_loss(spec, probe, batch)
        probe[j] = orig - h
        down = forward_loss(spec, probe, batch)
        probe[j] = orig
        out[j] = (up - down) / (2.0 * h)
    return out


def _power_iteration_lambda_max(xb: np.ndarray, tol: float, max_iter: int = 100_000) -> float:
    # Largest eigenvalue of xb.T @ xb / n without forming the d x d matrix.
    n = xb.shape[0]
    v = np.ones(xb.shape[1]) / np.sqrt(xb.shape[1])
    lam = 0.0
    for _ in range(max_iter):
        w = xb.T @ (xb @ v) / n
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam_new = float(v @ (xb.T @ (xb @ v)) / n)
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    return lam


def smoothness_constant(spec: ModelSpec, features: Optional[np.ndarray] = None) -> float:
    """Gradient-Lipschitz bound for the objective on the given data.

    Quadratic: exactly 1 + l2_coeff (the Hessian is the identity plus ridge).
    Logistic: 0.25 * lambda_max(Xb^T Xb / n) + l2_coeff, with the leading
    eigenvalue found by power iteration to relative tolerance 1e-8.
    """
    if spec.kind == "quadratic":
        return 1.0 + spec.l2_coeff
    if spec.kind == "logistic-regression":
        if features is None:
            raise ValueError("logistic smoothness bound requires the dataset features")
        features = np.asarray(features, dtype=np.float64)
        xb = _augment(features)
        lam = _power_iteration_lambda_max(xb, tol=1e-8)
        return 0.25 * lam + spec.l2_coeff
    raise NotImplementedError("no smoothness bound is implemented for mlp2")


def predict_proba(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Class probabilities for the classifier kinds."""
    if spec.kind == "quadratic":
        raise ValueError("quadratic objectives do not define class probabilities")
    params = _check_params(spec, params)
    features = np.asarray(features, dtype=np.float64)
    return _softmax(_logits(spec, params, features))


def predict_labels(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    return np.argmax(predict_proba(spec, params, features), axis=1)
