"""Feedforward embedding network with hand-written reverse mode and Adam."""
import json
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .exceptions import NumericError, ParseError, StructuralError, UnsupportedVersionError, UsageError
from .losses import objective

CHECKPOINT_FORMAT = "ocacompat-checkpoint"
CHECKPOINT_VERSION = 1


class Backbone:
    """Fully connected net; rectifier on hidden layers, identity on the output."""

    def __init__(self, layer_dims, weights, biases):
        self.layer_dims = [int(d) for d in layer_dims]
        self.weights = weights
        self.biases = biases
        self._cache = None

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def embedding_dim(self):
        return self.layer_dims[-1]

    def parameters(self):
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"backbone.W{i}"] = w
            params[f"backbone.b{i}"] = b
        return params

    def invalidate(self):
        self._cache = None


def init_backbone(layer_dims, seed):
    """He-style normal init (``std = sqrt(2 / fan_in)``; ``1 / fan_in`` on the output)."""
    layer_dims = list(layer_dims)
    if len(layer_dims) < 2:
        raise StructuralError(f"need at least input and output dims, got {layer_dims}")
    if any(int(d) != d or d < 1 for d in layer_dims):
        raise StructuralError(f"layer dims must be positive integers, got {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    n_layers = len(layer_dims) - 1
    for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
        gain = 1.0 if i == n_layers - 1 else 2.0
        weights.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Backbone(layer_dims, weights, biases)


def _run(model, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise StructuralError(f"batch shape {x.shape} does not match input dim {model.input_dim}")
    inputs, pre = [], []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(x)
        z = x @ w.T + b
        pre.append(z)
        x = np.maximum(z, 0.0) if i < last else z
    return x, inputs, pre


def forward(model, batch):
    """Embed ``batch`` (n x d_in); keeps activations on ``model`` for :func:`backward`."""
    out, inputs, pre = _run(model, batch)
    model._cache = (np.asarray(batch), inputs, pre)
    return out


def embed(model, batch):
    """Inference-only forward pass; leaves ``model`` untouched."""
    return _run(model, batch)[0]


def _backbone_backward(model, batch, grad_out):
    if model._cache is None:
        raise UsageError("backward called without a preceding forward pass")
    cached_batch, inputs, pre = model._cache
    if cached_batch.shape != np.shape(batch) or not np.array_equal(cached_batch, batch):
        raise UsageError("cached activations belong to a different batch")
    grads = {}
    g = grad_out
    for i in reversed(range(len(model.weights))):
        if i < len(model.weights) - 1:
            g = g * (pre[i] > 0)
        grads[f"backbone.W{i}"] = g.T @ inputs[i]
        grads[f"backbone.b{i}"] = g.sum(axis=0)
        g = g @ model.weights[i]
    return grads


def split_embedding(h_new, d_old):
    """Split ``[h_bct | h_e]`` along the last axis."""
    h_new = np.asarray(h_new)
    total = h_new.shape[-1]
    if not 0 < d_old < total:
        raise StructuralError(f"d_old must be in (0, {total}), got {d_old}")
    return h_new[..., :d_old], h_new[..., d_old:]


@dataclass
class Classifier:
    weights: np.ndarray

    @property
    def num_classes(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]

    @classmethod
    def init(cls, num_classes, dim, rng):
        return cls(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_classes, dim)))


class OrthoLayer:
    """Bias-free linear map ``h -> Q h`` with ``Q = exp(A)``, ``A`` skew-symmetric."""

    def __init__(self, dim, params):
        self.dim = int(dim)
        self.params = np.asarray(params, dtype=np.float64).copy()
        self.refresh()

    @classmethod
    def init(cls, dim, rng, scale=0.01):
        return cls(dim, rng.uniform(-scale, scale, size=linalg.n_skew_params(dim)))

    def refresh(self):
        self.a = linalg.skew_from_params(linalg.SkewParams(self.dim, self.params))
        self.q = linalg.mat_exp(self.a)
        defect = linalg.orthogonality_defect(self.q)
        if defect > 1e-8:
            raise NumericError(f"orthogonal layer drifted: defect {defect:.3e}")

    def apply(self, h):
        return np.asarray(h) @ self.q.T

    def param_grad(self, grad_q):
        return linalg.skew_param_grad(self.a, grad_q)


def backward(model, ortho, classifier, prototypes, batch, labels, spec):
    """Loss breakdown and gradients for every trainable parameter.

    Uses the activations cached by the last :func:`forward` on ``batch``.
    Prototypes are frozen and never appear in the returned gradients.
    """
    if model._cache is None:
        raise UsageError("backward called without a preceding forward pass")
    h = model._cache[2][-1]
    q = ortho.q if (ortho is not None and spec.uses_ortho) else None
    if spec.uses_ortho and ortho is None:
        raise StructuralError(f"mode {spec.mode!r} needs an orthogonal layer")
    protos = None if prototypes is None else np.asarray(prototypes)
    if protos is None and spec.mode != "independent":
        raise StructuralError(f"mode {spec.mode!r} needs prototypes")
    breakdown, g = objective(h, q, labels, classifier.weights, protos, spec)
    grads = _backbone_backward(model, batch, g["h"])
    grads["classifier.W"] = g["W"]
    if q is not None:
        grads["ortho.params"] = ortho.param_grad(g["Q"])
    return breakdown, grads


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update with bias correction; returns ``(params, state)``."""
    for name, g in grads.items():
        if name not in params:
            raise StructuralError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise StructuralError(
                f"{name}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])}"
            )
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def save_checkpoint(path, metadata, tensors):
    """Write metadata and named tensors as JSON; floats use shortest round-trip repr."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "metadata": metadata,
        "tensors": [
            {"name": name, "shape": list(np.shape(t)), "values": np.asarray(t, dtype=np.float64).ravel().tolist()}
            for name, t in tensors.items()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ParseError("not a checkpoint file", str(path))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {doc.get('version')!r}", str(path))
    tensors = {}
    for entry in doc["tensors"]:
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ParseError(f"tensor {entry['name']!r} has {values.size} values for shape {shape}", str(path))
        tensors[entry["name"]] = values.reshape(shape)
    return doc["metadata"], tensors
