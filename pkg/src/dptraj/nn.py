"""Small numpy neural-network kernel with exact per-example gradients.

Only the two fixed architectures used here are supported: the endpoint VAE
(:class:`TiNetwork`) and the next-hop classifier (:class:`TpgNetwork`).
Per-example gradients are kept in factored form (outer products, sparse table
rows) so that their norms and clipped sums never need the dense
``batch x n_params`` matrix; :func:`per_example_backward` materializes the
flat vector for a single example when needed.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .preprocess import atomic_write_bytes

FLOOR = 1e-12
MODEL_MAGIC = b"PTRAJMDL1"


def relu(x):
    return np.maximum(x, 0.0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


ACTIVATIONS = {"relu": relu, "linear": lambda x: x, "softmax": softmax}


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray
    activation: str = "linear"

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


def dense_forward(x, layer: DenseLayer):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"input has {x.shape[-1]} features, layer expects {layer.in_dim}")
    return ACTIVATIONS[layer.activation](x @ layer.weights + layer.bias)


def cross_entropy(probs, label: int) -> float:
    """-ln p[label], with probabilities floored at 1e-12."""
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} outside [0, {probs.shape[-1]})")
    return float(-np.log(max(probs[label], FLOOR)))


def reparameterize(mean, log_var, noise):
    return mean + np.exp(0.5 * log_var) * noise


def kl_standard_normal(mean, log_var):
    """KL(N(mean, exp(log_var)) || N(0, I)), summed over the last axis."""
    return -0.5 * np.sum(1.0 + log_var - mean ** 2 - np.exp(log_var), axis=-1)


def glorot_uniform(rng, fan_in: int, fan_out: int):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# -- factored per-example gradients -------------------------------------------

class DenseGrad:
    """Weight gradient outer(inputs[i], delta[i]) for every example i."""

    def __init__(self, inputs, delta):
        self.inputs, self.delta = inputs, delta

    def sq_norms(self):
        return np.sum(self.inputs ** 2, axis=1) * np.sum(self.delta ** 2, axis=1)

    def weighted_sum(self, w):
        return self.inputs.T @ (self.delta * w[:, None])

    def example(self, i):
        return np.outer(self.inputs[i], self.delta[i])


class BiasGrad:
    def __init__(self, delta):
        self.delta = delta

    def sq_norms(self):
        return np.sum(self.delta ** 2, axis=1)

    def weighted_sum(self, w):
        return w @ self.delta

    def example(self, i):
        return self.delta[i].copy()


class RowGrad:
    """Gradient touching ``k`` rows of a table per example (embeddings, one-hot inputs).

    Repeated indices within one example are summed before taking the norm.
    """

    def __init__(self, index, rows, shape):
        self.index, self.rows, self.shape = index, rows, shape

    def sq_norms(self):
        gram = np.einsum("bkd,bjd->bkj", self.rows, self.rows)
        same = self.index[:, :, None] == self.index[:, None, :]
        return np.sum(gram * same, axis=(1, 2))

    def weighted_sum(self, w):
        out = np.zeros(self.shape)
        np.add.at(out, self.index.ravel(), (self.rows * w[:, None, None]).reshape(-1, self.shape[1]))
        return out

    def example(self, i):
        out = np.zeros(self.shape)
        np.add.at(out, self.index[i], self.rows[i])
        return out


@dataclass
class PerExampleGradient:
    vector: np.ndarray

    @property
    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def _ce_delta(probs, labels):
    """Gradient of floored cross-entropy w.r.t. logits: p - onehot, zero where floored."""
    idx = np.arange(len(labels))
    p_true = probs[idx, labels]
    delta = probs.copy()
    delta[idx, labels] -= 1.0
    delta[p_true < FLOOR] = 0.0
    return -np.log(np.maximum(p_true, FLOOR)), delta


# -- networks -------------------------------------------------------------------

class Network:
    """Parameter container with a fixed, documented flattening order."""

    kind = "network"
    layout: tuple = ()  # (name, layer kind, activation)

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    @property
    def names(self) -> list[str]:
        return [name for name, _, _ in self.layout]

    @property
    def n_params(self) -> int:
        return sum(self.params[n].size for n in self.names)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.names])

    def load_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        pos = 0
        for n in self.names:
            p = self.params[n]
            self.params[n] = vec[pos:pos + p.size].reshape(p.shape).copy()
            pos += p.size

    def architecture(self) -> dict:
        raise NotImplementedError

    def copy(self):
        other = type(self)(**self.architecture())
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def forward_backward(self, batch: dict):
        """Return ``(losses, parts)``: per-example losses and factored gradients by name."""
        raise NotImplementedError

    def batch_size(self, batch: dict) -> int:
        return len(next(iter(batch.values())))

    def manifest(self) -> list[dict]:
        return [{"name": n, "kind": k, "activation": a, "shape": list(self.params[n].shape)}
                for n, k, a in self.layout]


def per_example_backward(model: Network, example: dict) -> PerExampleGradient:
    """Exact flat gradient of one example's loss, in ``model.names`` order."""
    losses, parts = model.forward_backward(example)
    if not np.all(np.isfinite(losses)):
        raise NumericError(f"non-finite loss for example {example.get('id', 0)}")
    return PerExampleGradient(np.concatenate([parts[n].example(0).ravel() for n in model.names]))


def per_example_norms(parts: dict) -> np.ndarray:
    return np.sqrt(sum(p.sq_norms() for p in parts.values()))


class TiNetwork(Network):
    """VAE over the one-hot (source, destination, hour) triple.

    Encoder: one-hot(2n+24) -> dense(h, relu) -> dense(h, linear) -> mean, log_var (latent).
    Decoder: z -> dense(h, relu) -> three softmax heads (n, n, 24).

    Flat parameter order: enc1.W, enc1.b, enc2.W, enc2.b, mean.W, mean.b,
    logvar.W, logvar.b, dec.W, dec.b, src.W, src.b, dst.W, dst.b, hour.W, hour.b.
    """

    kind = "TI"
    layout = (
        ("enc1.W", "dense_onehot", "relu"), ("enc1.b", "bias", "relu"),
        ("enc2.W", "dense", "linear"), ("enc2.b", "bias", "linear"),
        ("mean.W", "dense", "linear"), ("mean.b", "bias", "linear"),
        ("logvar.W", "dense", "linear"), ("logvar.b", "bias", "linear"),
        ("dec.W", "dense", "relu"), ("dec.b", "bias", "relu"),
        ("src.W", "dense", "softmax"), ("src.b", "bias", "softmax"),
        ("dst.W", "dense", "softmax"), ("dst.b", "bias", "softmax"),
        ("hour.W", "dense", "softmax"), ("hour.b", "bias", "softmax"),
    )

    def __init__(self, n_cells: int, hidden: int = 100, latent: int = 50, n_hours: int = 24, seed: int = 0):
        super().__init__()
        self.n_cells, self.hidden, self.latent, self.n_hours, self.seed = n_cells, hidden, latent, n_hours, seed
        rng = np.random.default_rng(seed)
        shapes = {"enc1": (self.input_dim, hidden), "enc2": (hidden, hidden), "mean": (hidden, latent),
                  "logvar": (hidden, latent), "dec": (latent, hidden), "src": (hidden, n_cells),
                  "dst": (hidden, n_cells), "hour": (hidden, n_hours)}
        for name, (fi, fo) in shapes.items():
            self.params[f"{name}.W"] = glorot_uniform(rng, fi, fo)
            self.params[f"{name}.b"] = np.zeros(fo)

    @property
    def input_dim(self) -> int:
        return 2 * self.n_cells + self.n_hours

    def architecture(self) -> dict:
        return {"n_cells": self.n_cells, "hidden": self.hidden, "latent": self.latent,
                "n_hours": self.n_hours, "seed": self.seed}

    def onehot_index(self, src, dst, hour):
        """Positions of the three ones in the encoder input, shape (B, 3)."""
        return np.stack([np.asarray(src), self.n_cells + np.asarray(dst),
                         2 * self.n_cells + np.asarray(hour)], axis=1)

    def encode(self, src, dst, hour):
        P = self.params
        idx = self.onehot_index(src, dst, hour)
        h1 = relu(P["enc1.W"][idx].sum(axis=1) + P["enc1.b"])
        h2 = h1 @ P["enc2.W"] + P["enc2.b"]
        mean = h2 @ P["mean.W"] + P["mean.b"]
        log_var = h2 @ P["logvar.W"] + P["logvar.b"]
        return idx, h1, h2, mean, log_var

    def decode(self, z):
        P = self.params
        d = relu(z @ P["dec.W"] + P["dec.b"])
        heads = [softmax(d @ P[f"{h}.W"] + P[f"{h}.b"]) for h in ("src", "dst", "hour")]
        return d, heads

    def forward_backward(self, batch):
        """Batch keys: ``src``, ``dst``, ``hour`` (dense indices) and ``noise`` (B, latent)."""
        P = self.params
        src, dst, hour = (np.asarray(batch[k]) for k in ("src", "dst", "hour"))
        noise = np.asarray(batch["noise"], dtype=float)
        idx, h1, h2, mean, log_var = self.encode(src, dst, hour)
        with np.errstate(over="raise"):
            try:
                std = np.exp(0.5 * log_var)
                z = mean + std * noise
                kl = kl_standard_normal(mean, log_var)
            except FloatingPointError as exc:
                raise NumericError("overflow in VAE latent") from exc
        d, heads = self.decode(z)
        losses = kl.copy()
        parts = {}
        dd = np.zeros_like(d)
        for name, probs, labels in zip(("src", "dst", "hour"), heads, (src, dst, hour)):
            ce, delta = _ce_delta(probs, labels)
            losses += ce
            parts[f"{name}.W"] = DenseGrad(d, delta)
            parts[f"{name}.b"] = BiasGrad(delta)
            dd += delta @ P[f"{name}.W"].T
        dd *= d > 0
        parts["dec.W"], parts["dec.b"] = DenseGrad(z, dd), BiasGrad(dd)
        dz = dd @ P["dec.W"].T
        dmean = dz + mean
        dlogvar = 0.5 * dz * noise * std + 0.5 * (np.exp(log_var) - 1.0)
        parts["mean.W"], parts["mean.b"] = DenseGrad(h2, dmean), BiasGrad(dmean)
        parts["logvar.W"], parts["logvar.b"] = DenseGrad(h2, dlogvar), BiasGrad(dlogvar)
        dh2 = dmean @ P["mean.W"].T + dlogvar @ P["logvar.W"].T
        parts["enc2.W"], parts["enc2.b"] = DenseGrad(h1, dh2), BiasGrad(dh2)
        dh1 = (dh2 @ P["enc2.W"].T) * (h1 > 0)
        rows = np.broadcast_to(dh1[:, None, :], (len(dh1), 3, self.hidden))
        parts["enc1.W"] = RowGrad(idx, rows, P["enc1.W"].shape)
        parts["enc1.b"] = BiasGrad(dh1)
        return losses, parts


class TpgNetwork(Network):
    """Next-hop classifier.

    Input: shared location embedding of (current, destination) plus hour/23,
    i.e. 2*embed_dim + 1 features -> dense(h, relu) -> softmax(n_classes).

    Flat parameter order: embed.E, hidden.W, hidden.b, out.W, out.b.
    """

    kind = "TPG"
    layout = (
        ("embed.E", "embedding", "linear"),
        ("hidden.W", "dense", "relu"), ("hidden.b", "bias", "relu"),
        ("out.W", "dense", "softmax"), ("out.b", "bias", "softmax"),
    )

    def __init__(self, n_cells: int, embed_dim: int = 50, hidden: int = 200, n_classes: int = 121,
                 n_hours: int = 24, seed: int = 0):
        super().__init__()
        self.n_cells, self.embed_dim, self.hidden = n_cells, embed_dim, hidden
        self.n_classes, self.n_hours, self.seed = n_classes, n_hours, seed
        rng = np.random.default_rng(seed)
        self.params["embed.E"] = rng.normal(0.0, 0.05, size=(n_cells, embed_dim))
        self.params["hidden.W"] = glorot_uniform(rng, self.input_dim, hidden)
        self.params["hidden.b"] = np.zeros(hidden)
        self.params["out.W"] = glorot_uniform(rng, hidden, n_classes)
        self.params["out.b"] = np.zeros(n_classes)

    @property
    def input_dim(self) -> int:
        return 2 * self.embed_dim + 1

    def architecture(self) -> dict:
        return {"n_cells": self.n_cells, "embed_dim": self.embed_dim, "hidden": self.hidden,
                "n_classes": self.n_classes, "n_hours": self.n_hours, "seed": self.seed}

    def features(self, cur, dst, hour):
        E = self.params["embed.E"]
        t = np.asarray(hour, dtype=float)[:, None] / (self.n_hours - 1)
        return np.concatenate([E[np.asarray(cur)], E[np.asarray(dst)], t], axis=1)

    def probs(self, cur, dst, hour):
        P = self.params
        h = relu(self.features(cur, dst, hour) @ P["hidden.W"] + P["hidden.b"])
        return softmax(h @ P["out.W"] + P["out.b"])

    def forward_backward(self, batch):
        """Batch keys: ``cur``, ``dst``, ``hour``, ``label``."""
        P = self.params
        cur, dst, hour, label = (np.asarray(batch[k]) for k in ("cur", "dst", "hour", "label"))
        x = self.features(cur, dst, hour)
        h = relu(x @ P["hidden.W"] + P["hidden.b"])
        probs = softmax(h @ P["out.W"] + P["out.b"])
        losses, dl = _ce_delta(probs, label)
        dh = (dl @ P["out.W"].T) * (h > 0)
        dx = dh @ P["hidden.W"].T
        k = self.embed_dim
        parts = {
            "embed.E": RowGrad(np.stack([cur, dst], axis=1),
                               np.stack([dx[:, :k], dx[:, k:2 * k]], axis=1), P["embed.E"].shape),
            "hidden.W": DenseGrad(x, dh), "hidden.b": BiasGrad(dh),
            "out.W": DenseGrad(h, dl), "out.b": BiasGrad(dl),
        }
        return losses, parts


NETWORKS = {"TI": TiNetwork, "TPG": TpgNetwork}


# -- model files ------------------------------------------------------------------

def save_model(path, network: Network, meta: dict | None = None) -> None:
    """Write ``PTRAJMDL1`` + u32 manifest length + JSON manifest + little-endian f64 payload."""
    manifest = {"tag": network.kind, "architecture": network.architecture(),
                "layers": network.manifest(), "meta": meta or {}}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(network.flatten().astype("<f8").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def load_model(path, expect_tag: str | None = None) -> tuple[Network, dict]:
    """Read a model file; returns ``(network, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MODEL_MAGIC):
        raise DataError(f"{path}: not a PTRAJMDL1 model file")
    pos = len(MODEL_MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    manifest = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    tag = manifest["tag"]
    if expect_tag is not None and tag != expect_tag:
        raise DataError(f"{path}: model tag {tag}, expected {expect_tag}")
    network = NETWORKS[tag](**manifest["architecture"])
    for layer in manifest["layers"]:
        if list(network.params[layer["name"]].shape) != layer["shape"]:
            raise DataError(f"{path}: shape mismatch for {layer['name']}")
    payload = np.frombuffer(data[pos:], dtype="<f8")
    network.load_flat(payload.astype(float))
    return network, manifest["meta"]
