"""Small fully connected policy networks with exact reverse-mode gradients.

Networks are bias-free stacks of linear layers and pointwise activations,
followed by an output head that maps raw outputs to distribution parameters:

* ``trunc-gauss``: interleaved pairs (mean, stddev) squashed into the
  allocation support [a, b]; stddev lives in [SIGMA_MIN, sqrt(b - a)].
* ``bernoulli``: per-component on-probability through a sigmoid.
* ``raw``: no transform.

Two model classes share one duck-typed interface: ``PolicyModel`` (a single
network reading the full channel vector) and ``SisoBank`` (independent
per-user copies of one scalar-input network, evaluated in a vectorized
batch). Parameters are exposed as a flat vector ``theta`` so optimizers and
perturbation-based estimators never care about layer structure.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .problem import ContractError

SIGMA_MIN = 1e-3
_PROB_CLIP = 1e-12

ACTIVATIONS = ("relu", "sigmoid", "identity")
HEADS = ("trunc-gauss", "bernoulli", "raw")


def _apply_activation(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return expit(z)
    return z


def _activation_derivative(kind, z, a):
    # derivative expressed via pre-activation z and post-activation a
    if kind == "relu":
        return (z > 0.0).astype(float)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer widths (input first), one activation per linear layer, head kind."""

    layer_sizes: tuple
    activations: tuple
    output_head: str = "raw"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.layer_sizes) < 2:
            raise ContractError("need at least an input and an output layer")
        if any(s <= 0 for s in self.layer_sizes):
            raise ContractError("layer sizes must be positive")
        if len(self.activations) != len(self.layer_sizes) - 1:
            raise ContractError("need exactly one activation per linear layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ContractError(f"unknown activation {act!r}")
        if self.output_head not in HEADS:
            raise ContractError(f"unknown output head {self.output_head!r}")
        if self.output_head == "trunc-gauss" and self.layer_sizes[-1] % 2 != 0:
            raise ContractError("trunc-gauss head needs an even raw output width")

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def raw_output_dim(self):
        return self.layer_sizes[-1]

    @property
    def weight_shapes(self):
        sizes = self.layer_sizes
        return [(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]

    @property
    def n_params(self):
        return sum(a * b for a, b in self.weight_shapes)


def head_transform(raw, head, support):
    """Map raw network outputs to distribution parameters (batched over leading axes)."""
    raw = np.asarray(raw, dtype=float)
    if head == "raw":
        return raw
    if head == "bernoulli":
        return np.clip(expit(raw), _PROB_CLIP, 1.0 - _PROB_CLIP)
    a, b = support
    out = np.empty_like(raw)
    out[..., 0::2] = a + (b - a) * expit(raw[..., 0::2])
    out[..., 1::2] = SIGMA_MIN + (np.sqrt(b - a) - SIGMA_MIN) * expit(raw[..., 1::2])
    return out


def head_backward(raw, head, support, upstream):
    """Pull a gradient w.r.t. head outputs back to raw network outputs."""
    raw = np.asarray(raw, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if head == "raw":
        return upstream
    s = expit(raw)
    ds = s * (1.0 - s)
    if head == "bernoulli":
        return upstream * ds
    a, b = support
    scale = np.empty_like(raw)
    scale[..., 0::2] = b - a
    scale[..., 1::2] = np.sqrt(b - a) - SIGMA_MIN
    return upstream * scale * ds


def _check_support(support):
    a, b = float(support[0]), float(support[1])
    if not b > a:
        raise ContractError("support upper bound must exceed the lower bound")
    return a, b


def _init_layer(rng, shape):
    # uniform fan-based init, symmetric around zero
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


class PolicyModel:
    """Single MLP policy over the full channel vector."""

    def __init__(self, arch, support=(0.0, 1.0), theta=None):
        self.arch = arch
        self.support = _check_support(support)
        self._weights = [np.zeros(s) for s in arch.weight_shapes]
        if theta is not None:
            self.theta = theta

    @property
    def head(self):
        return self.arch.output_head

    @property
    def n_inputs(self):
        return self.arch.input_dim

    @property
    def output_dim(self):
        return self.arch.raw_output_dim

    @property
    def n_params(self):
        return self.arch.n_params

    @property
    def theta(self):
        return np.concatenate([w.ravel() for w in self._weights])

    @theta.setter
    def theta(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ContractError(
                f"theta must have shape ({self.n_params},), got {flat.shape}"
            )
        offset = 0
        for i, shape in enumerate(self.arch.weight_shapes):
            size = shape[0] * shape[1]
            self._weights[i] = flat[offset : offset + size].reshape(shape).copy()
            offset += size

    def init_theta(self, rng):
        """Draw fresh fan-scaled uniform weights in place."""
        self._weights = [_init_layer(rng, s) for s in self.arch.weight_shapes]

    def _forward_raw(self, h_batch, keep_trace=False):
        a = h_batch
        pre, post = [], [h_batch]
        for w, act in zip(self._weights, self.arch.activations):
            z = a @ w
            a = _apply_activation(act, z)
            if keep_trace:
                pre.append(z)
                post.append(a)
        return (a, pre, post) if keep_trace else a

    def forward_batch(self, h_batch):
        """(B, n) channels -> (B, out) head-transformed outputs."""
        h_batch = np.asarray(h_batch, dtype=float)
        raw = self._forward_raw(h_batch)
        return head_transform(raw, self.head, self.support)

    def forward(self, h):
        return self.forward_batch(np.asarray(h, dtype=float)[None, :])[0]

    def backward_batch(self, h_batch, upstream):
        """Sum over the batch of d(upstream_b . output_b)/d(theta), flat (q,)."""
        h_batch = np.asarray(h_batch, dtype=float)
        upstream = np.asarray(upstream, dtype=float)
        raw, pre, post = self._forward_raw(h_batch, keep_trace=True)
        grad_z = head_backward(raw, self.head, self.support, upstream)
        grads = [None] * len(self._weights)
        for layer in reversed(range(len(self._weights))):
            act = self.arch.activations[layer]
            grad_z = grad_z * _activation_derivative(act, pre[layer], post[layer + 1])
            grads[layer] = post[layer].T @ grad_z
            if layer > 0:
                grad_z = grad_z @ self._weights[layer].T
        return np.concatenate([g.ravel() for g in grads])

    def backward(self, h, upstream):
        return self.backward_batch(
            np.asarray(h, dtype=float)[None, :], np.asarray(upstream, dtype=float)[None, :]
        )

    def forward_batch_theta(self, thetas, h_batch):
        """Forward pass with one parameter vector per batch row.

        ``thetas`` is (B, q); row b is evaluated on channel row b. Used by
        perturbation-based gradient estimators.
        """
        thetas = np.asarray(thetas, dtype=float)
        h_batch = np.asarray(h_batch, dtype=float)
        a = h_batch[:, None, :]
        offset = 0
        for shape, act in zip(self.arch.weight_shapes, self.arch.activations):
            size = shape[0] * shape[1]
            w = thetas[:, offset : offset + size].reshape(-1, *shape)
            a = _apply_activation(act, np.matmul(a, w))
            offset += size
        return head_transform(a[:, 0, :], self.head, self.support)

    def to_payload(self):
        return {
            "kind": "mlp",
            "layer_sizes": list(self.arch.layer_sizes),
            "activations": list(self.arch.activations),
            "output_head": self.arch.output_head,
            "support": [self.support[0], self.support[1]],
            "theta": self.theta.tolist(),
        }


class SisoBank:
    """m independent copies of one scalar-input network, one per user.

    Input row (B, m) feeds channel i to copy i; outputs are concatenated
    user-major, so a trunc-gauss bank emits [mu_1, sigma_1, ..., mu_m, sigma_m].
    """

    def __init__(self, arch, n_copies, support=(0.0, 1.0), theta=None):
        if arch.input_dim != 1:
            raise ContractError("bank members must take a single scalar input")
        self.arch = arch
        self.n_copies = int(n_copies)
        if self.n_copies <= 0:
            raise ContractError("need at least one bank member")
        self.support = _check_support(support)
        self._weights = [np.zeros((self.n_copies, *s)) for s in arch.weight_shapes]
        if theta is not None:
            self.theta = theta

    @property
    def head(self):
        return self.arch.output_head

    @property
    def n_inputs(self):
        return self.n_copies

    @property
    def output_dim(self):
        return self.n_copies * self.arch.raw_output_dim

    @property
    def n_params(self):
        return self.n_copies * self.arch.n_params

    @property
    def theta(self):
        return np.concatenate([w.ravel() for w in self._weights])

    @theta.setter
    def theta(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ContractError(
                f"theta must have shape ({self.n_params},), got {flat.shape}"
            )
        offset = 0
        for i, shape in enumerate(self.arch.weight_shapes):
            size = self.n_copies * shape[0] * shape[1]
            self._weights[i] = (
                flat[offset : offset + size].reshape(self.n_copies, *shape).copy()
            )
            offset += size

    def init_theta(self, rng):
        self._weights = [
            _init_layer(rng, (self.n_copies, *s)) for s in self.arch.weight_shapes
        ]

    def _forward_raw(self, h_batch, keep_trace=False):
        # (m, batch, width) layout keeps every layer a single batched matmul
        a = h_batch.T[:, :, None]
        pre, post = [], [a]
        for w, act in zip(self._weights, self.arch.activations):
            z = np.matmul(a, w)
            a = _apply_activation(act, z)
            if keep_trace:
                pre.append(z)
                post.append(a)
        return (a, pre, post) if keep_trace else a

    def forward_batch(self, h_batch):
        h_batch = np.asarray(h_batch, dtype=float)
        if h_batch.shape[-1] != self.n_copies:
            raise ContractError(f"expected {self.n_copies} channel inputs")
        raw = self._forward_raw(h_batch).transpose(1, 0, 2).reshape(h_batch.shape[0], -1)
        return head_transform(raw, self.head, self.support)

    def forward(self, h):
        return self.forward_batch(np.asarray(h, dtype=float)[None, :])[0]

    def backward_batch(self, h_batch, upstream):
        h_batch = np.asarray(h_batch, dtype=float)
        upstream = np.asarray(upstream, dtype=float)
        raw, pre, post = self._forward_raw(h_batch, keep_trace=True)
        batch = h_batch.shape[0]
        flat_raw = raw.transpose(1, 0, 2).reshape(batch, -1)
        grad_flat = head_backward(flat_raw, self.head, self.support, upstream)
        grad_z = grad_flat.reshape(batch, self.n_copies, -1).transpose(1, 0, 2)
        grads = [None] * len(self._weights)
        for layer in reversed(range(len(self._weights))):
            act = self.arch.activations[layer]
            grad_z = grad_z * _activation_derivative(act, pre[layer], post[layer + 1])
            grads[layer] = np.matmul(post[layer].transpose(0, 2, 1), grad_z)
            if layer > 0:
                grad_z = np.matmul(grad_z, self._weights[layer].transpose(0, 2, 1))
        return np.concatenate([g.ravel() for g in grads])

    def backward(self, h, upstream):
        return self.backward_batch(
            np.asarray(h, dtype=float)[None, :], np.asarray(upstream, dtype=float)[None, :]
        )

    def forward_batch_theta(self, thetas, h_batch):
        thetas = np.asarray(thetas, dtype=float)
        h_batch = np.asarray(h_batch, dtype=float)
        batch = h_batch.shape[0]
        a = h_batch[:, :, None]
        offset = 0
        for shape, act in zip(self.arch.weight_shapes, self.arch.activations):
            size = self.n_copies * shape[0] * shape[1]
            w = thetas[:, offset : offset + size].reshape(batch, self.n_copies, *shape)
            a = _apply_activation(act, np.matmul(a[:, :, None, :], w)[:, :, 0, :])
            offset += size
        return head_transform(a.reshape(batch, -1), self.head, self.support)

    def to_payload(self):
        return {
            "kind": "siso-bank",
            "n_copies": self.n_copies,
            "layer_sizes": list(self.arch.layer_sizes),
            "activations": list(self.arch.activations),
            "output_head": self.arch.output_head,
            "support": [self.support[0], self.support[1]],
            "theta": self.theta.tolist(),
        }


def mean_allocation_batch(model, h_batch):
    """Deterministic allocation implied by the model outputs.

    trunc-gauss heads allocate their mean; raw heads allocate the raw output.
    Bernoulli heads have no continuous deterministic allocation and are
    rejected (perturbation estimators cannot difference a coin flip).
    """
    out = model.forward_batch(h_batch)
    if model.head == "trunc-gauss":
        return out[..., 0::2]
    if model.head == "raw":
        return out
    raise ContractError("bernoulli head has no deterministic allocation")


def mean_allocation_batch_theta(model, thetas, h_batch):
    """Per-row-theta version of mean_allocation_batch."""
    out = model.forward_batch_theta(thetas, h_batch)
    if model.head == "trunc-gauss":
        return out[..., 0::2]
    if model.head == "raw":
        return out
    raise ContractError("bernoulli head has no deterministic allocation")


def save_model(model, path):
    """Write a lossless JSON checkpoint (floats round-trip via repr)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_payload(), fh)


def load_model(path):
    """Restore a PolicyModel or SisoBank from ``save_model`` output."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return model_from_payload(payload)


def model_from_payload(payload):
    try:
        arch = MlpArchitecture(
            tuple(payload["layer_sizes"]),
            tuple(payload["activations"]),
            payload["output_head"],
        )
        support = tuple(payload["support"])
        theta = np.asarray(payload["theta"], dtype=float)
        kind = payload["kind"]
    except (KeyError, TypeError) as exc:
        raise ContractError(f"malformed model payload: {exc}") from exc
    if kind == "mlp":
        return PolicyModel(arch, support, theta)
    if kind == "siso-bank":
        return SisoBank(arch, payload["n_copies"], support, theta)
    raise ContractError(f"unknown model kind {kind!r}")
