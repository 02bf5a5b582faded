"""Small encoder-decoder MLPs used as students and frozen teachers."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from . import autodiff as ad
from .exceptions import ContractError, FrozenError, ShapeError
from .linalg import read_matrix, write_matrix

__all__ = [
    "InitSpec",
    "MlpNet",
    "mlp_new",
    "encode",
    "decode",
    "forward",
    "sgd_step",
    "save_checkpoint",
    "load_checkpoint",
]

INIT_SCHEMES = ("uniform-fan-in", "orthogonal-columns", "zeros")


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "uniform-fan-in"
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in INIT_SCHEMES:
            raise ContractError(f"unknown init scheme {self.scheme!r}; expected one of {INIT_SCHEMES}")


@dataclass
class MlpNet:
    """Fully connected net with tanh hidden layers and a linear output.

    ``weights[l]`` has shape ``(widths[l+1], widths[l])`` and is applied as
    ``h @ W.T + b``. Layers ``[0, encoder_cut)`` form the encoder.
    """

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    encoder_cut: int
    frozen: bool = False
    activation: str = "tanh"
    # Layer indices whose activation is skipped (identity); a test hook.
    linear_layers: frozenset = field(default_factory=frozenset)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def feature_dim(self) -> int:
        return self.widths[self.encoder_cut]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MlpNet":
        return MlpNet(
            list(self.widths),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.encoder_cut,
            self.frozen,
            self.activation,
            self.linear_layers,
        )

    def freeze(self) -> "MlpNet":
        self.frozen = True
        return self

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def _init_weight(rng: np.random.Generator, scheme: str, fan_out: int, fan_in: int) -> np.ndarray:
    if scheme == "zeros":
        return np.zeros((fan_out, fan_in))
    if scheme == "orthogonal-columns":
        q, r = np.linalg.qr(rng.standard_normal((max(fan_out, fan_in), min(fan_out, fan_in))))
        q = q * np.sign(np.diag(r))
        return q if fan_out >= fan_in else q.T
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def mlp_new(widths: Sequence[int], encoder_cut: int, init: InitSpec | None = None,
            activation: str = "tanh") -> MlpNet:
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ContractError(f"need at least two positive widths, got {widths}")
    n_layers = len(widths) - 1
    if not 1 <= encoder_cut < n_layers:
        raise ContractError(f"encoder_cut must lie in [1, {n_layers - 1}], got {encoder_cut}")
    if activation not in ("tanh", "relu"):
        raise ContractError(f"unknown activation {activation!r}")
    init = init or InitSpec()
    rng = np.random.default_rng(init.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(_init_weight(rng, init.scheme, fan_out, fan_in))
        if init.scheme == "uniform-fan-in":
            bound = 1.0 / np.sqrt(fan_in)
            biases.append(rng.uniform(-bound, bound, size=(1, fan_out)))
        else:
            biases.append(np.zeros((1, fan_out)))
    return MlpNet(widths, weights, biases, encoder_cut, activation=activation)


def _activate(net: MlpNet, layer: int, h: np.ndarray) -> np.ndarray:
    if layer == net.n_layers - 1 or layer in net.linear_layers:
        return h
    return np.tanh(h) if net.activation == "tanh" else np.maximum(h, 0.0)


def _apply(net: MlpNet, x: np.ndarray, start: int, stop: int) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.widths[start]:
        raise ShapeError(f"input of shape {h.shape} does not match layer width {net.widths[start]}")
    for layer in range(start, stop):
        h = _activate(net, layer, h @ net.weights[layer].T + net.biases[layer])
    return h


def encode(net: MlpNet, x) -> np.ndarray:
    """Features at the encoder output, shape ``(batch, widths[encoder_cut])``."""
    return _apply(net, x, 0, net.encoder_cut)


def decode(net: MlpNet, z) -> np.ndarray:
    return _apply(net, z, net.encoder_cut, net.n_layers)


def forward(net: MlpNet, x) -> np.ndarray:
    return _apply(net, x, 0, net.n_layers)


def apply_tape(net: MlpNet, params: Sequence[ad.Var], h: ad.Var, start: int, stop: int) -> ad.Var:
    """Record layers ``[start, stop)`` on ``h``'s tape using parameter vars ``params``.

    ``params`` is the flat ``[W0, b0, W1, b1, ...]`` list from :meth:`MlpNet.params`.
    """
    if h.shape[1] != net.widths[start]:
        raise ShapeError(f"input of shape {h.shape} does not match layer width {net.widths[start]}")
    for layer in range(start, stop):
        w, b = params[2 * layer], params[2 * layer + 1]
        h = ad.add(ad.matmul(h, ad.transpose(w)), b)
        if not (layer == net.n_layers - 1 or layer in net.linear_layers):
            h = ad.tanh(h) if net.activation == "tanh" else ad.relu(h)
    return h


def sgd_step(net: MlpNet, grads: Sequence[np.ndarray], lr: float) -> MlpNet:
    """In-place ``p <- p - lr * g`` over ``net.params()`` order; returns ``net``."""
    if net.frozen:
        raise FrozenError("refusing to update a frozen network")
    params = net.params()
    if len(grads) != len(params):
        raise ShapeError(f"expected {len(params)} gradients, got {len(grads)}")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
    for p, g in zip(params, grads):
        p -= lr * g
    return net


def save_checkpoint(fh: TextIO, net: MlpNet) -> None:
    fh.write("MLP v1\n")
    fh.write(" ".join(str(w) for w in net.widths) + "\n")
    fh.write(f"{net.encoder_cut}\n")
    for w, b in zip(net.weights, net.biases):
        write_matrix(fh, w)
        write_matrix(fh, b)


def load_checkpoint(fh: TextIO, frozen: bool = False) -> MlpNet:
    header = fh.readline().strip()
    if header != "MLP v1":
        raise ContractError(f"unrecognised checkpoint header {header!r}")
    widths = [int(w) for w in fh.readline().split()]
    cut = int(fh.readline())
    weights, biases = [], []
    for _ in range(len(widths) - 1):
        weights.append(read_matrix(fh))
        biases.append(read_matrix(fh))
    net = MlpNet(widths, weights, biases, cut, frozen=frozen)
    for layer, w in enumerate(weights):
        if w.shape != (widths[layer + 1], widths[layer]):
            raise ShapeError(f"layer {layer} weight shape {w.shape} inconsistent with widths")
    return net
