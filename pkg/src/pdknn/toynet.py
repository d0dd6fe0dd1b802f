"""A small fully-connected classifier with activation capture.

Plain numpy forward/backward passes; trained with mini-batch SGD on the
negative log-likelihood of a log-softmax output layer.
"""

from dataclasses import dataclass, field
import struct
import zlib

import numpy as np

ACTIVATIONS = ("relu", "log_softmax", "identity")
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}

CHECKPOINT_MAGIC = b"PDKM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed model checkpoint."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float).ravel()
        if self.weight.ndim != 2 or self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("weight must be (out, in) with a matching bias")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _apply(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "log_softmax":
        return _log_softmax(z)
    return z


@dataclass
class MlpModel:
    """Stack of dense layers; the last one must be ``log_softmax``."""

    layers: list
    rng_seed: int = 0
    layer_names: list = field(default=None)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i].weight.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise ValueError(f"layer {i} input does not match layer {i - 1} output")
        if self.layers[-1].activation != "log_softmax":
            raise ValueError("final layer must use log_softmax")
        if self.layer_names is None:
            self.layer_names = [f"dense_{i}" for i in range(len(self.layers))]

    @classmethod
    def initialize(cls, sizes, seed=0, hidden_activation="relu"):
        """He-initialized model with layer widths ``sizes`` (input first)."""
        rng = np.random.default_rng(seed)
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
            layers.append(Layer(w, np.zeros(n_out), "log_softmax" if last else hidden_activation))
        return cls(layers, rng_seed=seed)

    @property
    def n_inputs(self):
        return self.layers[0].weight.shape[1]

    @property
    def n_classes(self):
        return self.layers[-1].weight.shape[0]

    @property
    def n_parameters(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def forward_with_trace(self, x):
        """Post-activation output of every layer, input to output.

        ``x`` may be a single vector or a batch of row vectors.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.n_inputs:
            raise ValueError(f"dimension mismatch: expected {self.n_inputs} inputs, got {h.shape[1]}")
        trace = []
        for layer in self.layers:
            h = _apply(layer.activation, h @ layer.weight.T + layer.bias)
            trace.append(h[0] if single else h)
        return trace

    def predict_log_proba(self, x):
        return self.forward_with_trace(x)[-1]

    def predict(self, x):
        return np.argmax(self.predict_log_proba(x), axis=-1)

    def loss_and_grads(self, x, y):
        """Mean negative log-likelihood and its gradients per layer ``(dW, db)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=int).ravel()
        n = x.shape[0]
        inputs = [x]
        pre = []
        h = x
        for layer in self.layers:
            z = h @ layer.weight.T + layer.bias
            pre.append(z)
            h = _apply(layer.activation, z)
            inputs.append(h)
        logp = inputs[-1]
        loss = -float(np.mean(logp[np.arange(n), y]))

        grads = [None] * len(self.layers)
        # d loss / d z of the log-softmax layer
        delta = np.exp(logp)
        delta[np.arange(n), y] -= 1.0
        delta /= n
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i != len(self.layers) - 1:
                if layer.activation == "relu":
                    delta = delta * (pre[i] > 0)
                elif layer.activation == "log_softmax":
                    raise ValueError("log_softmax is only supported as the final layer")
            grads[i] = (delta.T @ inputs[i], delta.sum(axis=0))
            delta = delta @ layer.weight
        return loss, grads

    def get_flat_params(self):
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def set_flat_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        pos = 0
        for l in self.layers:
            nw = l.weight.size
            l.weight = theta[pos:pos + nw].reshape(l.weight.shape).copy()
            pos += nw
            nb = l.bias.size
            l.bias = theta[pos:pos + nb].copy()
            pos += nb

    def copy(self):
        return MlpModel(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            rng_seed=self.rng_seed,
            layer_names=list(self.layer_names),
        )


def forward_with_trace(model, x):
    return model.forward_with_trace(x)


def _sgd(net, X, y, epochs, learning_rate, batch_size, rng):
    n = X.shape[0]
    for _ in range(int(epochs)):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, grads = net.loss_and_grads(X[idx], y[idx])
            for layer, (dw, db) in zip(net.layers, grads):
                layer.weight -= learning_rate * dw
                layer.bias -= learning_rate * db
    return net


def train(model, X, y, epochs=500, learning_rate=0.05, batch_size=64, seed=0,
          standardize=True, restarts=3):
    """Mini-batch SGD starting from a copy of ``model``.

    With ``standardize`` the inputs are z-scored during training and the
    scaling is folded back into the first layer afterwards, so the returned
    model consumes raw inputs. ``restarts > 1`` trains further
    re-initialized copies (seeds derived from ``seed``) and keeps the one
    with the lowest training loss; small ReLU layers can otherwise get stuck
    with a dead unit.

    Returns
    -------
    trained : MlpModel
    accuracy : float
        Training-set accuracy of the returned model.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).ravel()
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y lengths differ")
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    y = y.astype(int)
    if standardize:
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
    else:
        mu = np.zeros(X.shape[1])
        sd = np.ones(X.shape[1])
    Xs = (X - mu) / sd
    sizes = [model.n_inputs] + [l.weight.shape[0] for l in model.layers]
    hidden = model.layers[0].activation if len(model.layers) > 1 else "relu"
    seeds = np.random.SeedSequence(seed).spawn(max(1, int(restarts)))

    best, best_loss = None, np.inf
    for r, ss in enumerate(seeds):
        start = model.copy() if r == 0 else MlpModel.initialize(
            sizes, seed=int(ss.generate_state(1)[0]), hidden_activation=hidden)
        start.layer_names = list(model.layer_names)
        start.rng_seed = model.rng_seed
        net = _sgd(start, Xs, y, epochs, learning_rate, batch_size, np.random.default_rng(ss))
        loss, _ = net.loss_and_grads(Xs, y)
        if loss < best_loss:
            best, best_loss = net, loss

    first = best.layers[0]
    first.bias = first.bias - first.weight @ (mu / sd)
    first.weight = first.weight / sd
    accuracy = float(np.mean(best.predict(X) == y))
    return best, accuracy


def save_model(model, path):
    """Write a little-endian ``PDKM`` checkpoint with a CRC32 trailer."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<IIQ", CHECKPOINT_VERSION, len(model.layers), model.rng_seed)]
    for name, layer in zip(model.layer_names, model.layers):
        encoded = name.encode("utf-8")
        n_out, n_in = layer.weight.shape
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<IIB", n_in, n_out, _ACT_CODES[layer.activation]))
        parts.append(layer.weight.astype("<f8").tobytes(order="C"))
        parts.append(layer.bias.astype("<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a PDKM checkpoint (bad magic)")
    body, trailer = data[:-4], data[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise CheckpointError("checkpoint CRC mismatch")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError(f"checkpoint truncated in {what}")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    version, n_layers, seed = struct.unpack("<IIQ", take(16, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    layers, names = [], []
    for i in range(n_layers):
        (name_len,) = struct.unpack("<H", take(2, f"layer {i} name"))
        names.append(take(name_len, f"layer {i} name").decode("utf-8"))
        n_in, n_out, code = struct.unpack("<IIB", take(9, f"layer {i} dims"))
        if code >= len(ACTIVATIONS):
            raise CheckpointError(f"layer {i}: unknown activation code {code}")
        w = np.frombuffer(take(8 * n_in * n_out, f"layer {i} weights"), dtype="<f8").reshape(n_out, n_in)
        b = np.frombuffer(take(8 * n_out, f"layer {i} bias"), dtype="<f8")
        layers.append(Layer(w.astype(float), b.astype(float), ACTIVATIONS[code]))
    if pos != len(body):
        raise CheckpointError("trailing bytes after last layer")
    return MlpModel(layers, rng_seed=int(seed), layer_names=names)
