"""Network graph: layer composition, training gradients, pruning, checkpoints.

A :class:`NetworkGraph` is an ordered list of layers (dense, conv, relu,
pool, flatten, noise gate) plus the sample input shape.  It provides

* forward / loss-and-gradient passes (training objective = mean cross
  entropy + ``kl_scale`` * total gate KL / ``n_train``),
* enumeration of prunable structures (hidden dense units and conv channels),
* physical structure removal that shrinks the producing layer, its gate, the
  consuming layer (remapping channel-major through flatten), and any Adam
  moment slots,
* a binary checkpoint format.

Checkpoint layout (all little-endian): magic ``BMRS``, version u32, layer
count u32, input rank u32 + dims u32[]; then per layer a type tag u8
followed by its shapes/hyperparameters as u32, f64 tensor payloads, and for
gate layers the labels (i64) and the alive bitset (packed LSB-first).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .gates import NoiseGateLayer
from .layers import Conv2d, Dense, Flatten, MaxPool2d, ReLU, softmax_cross_entropy

CHECKPOINT_MAGIC = b"BMRS"
CHECKPOINT_VERSION = 1

_LAYER_TAGS = {Dense: 1, Conv2d: 2, ReLU: 3, MaxPool2d: 4, Flatten: 5, NoiseGateLayer: 6}


class GradientError(FloatingPointError):
    """A non-finite gradient was produced, reported with its location."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


@dataclass(frozen=True)
class PrunableSite:
    """One prunable layer: the producing Dense/Conv and its gate, if any."""

    producer_idx: int
    gate_idx: int | None
    width: int


class NetworkGraph:
    def __init__(self, layers: list, input_shape: tuple):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)

    # -- shapes -------------------------------------------------------------

    def layer_input_shapes(self) -> list[tuple]:
        """Input shape (sans batch) seen by each layer."""
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shapes.append(shape)
            shape = layer.output_shape(shape)
        return shapes

    def output_shape(self) -> tuple:
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    # -- passes ---------------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "eval", noise: dict | None = None,
                tape: list | None = None) -> np.ndarray:
        """Run the network; ``noise`` maps gate layer index -> uniform draws."""
        h = np.asarray(x, dtype=float)
        for idx, layer in enumerate(self.layers):
            ctx = None if tape is None else {}
            if isinstance(layer, NoiseGateLayer):
                u = None
                if mode == "train":
                    if noise is None or idx not in noise:
                        raise ValueError(f"train mode requires noise draws for gate {idx}")
                    u = noise[idx]
                h = layer.forward(h, mode=mode, u=u, ctx=ctx)
            else:
                h = layer.forward(h, ctx=ctx)
            if tape is not None:
                tape.append(ctx)
        return h

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray, noise: dict,
                       n_train: int, kl_scale: float = 1.0):
        """Training loss and gradients for every trainable scalar.

        Returns ``(loss, data_loss, kl_total, grads)`` with ``grads`` keyed by
        ``(layer_index, param_name)``.
        """
        tape: list = []
        logits = self.forward(x, mode="train", noise=noise, tape=tape)
        data_loss, grad_logits = softmax_cross_entropy(logits, labels)

        grads: dict = {}
        g = grad_logits
        for idx in range(len(self.layers) - 1, -1, -1):
            g, layer_grads = self.layers[idx].backward(tape[idx], g)
            for name, arr in layer_grads.items():
                grads[(idx, name)] = arr

        kl_total = 0.0
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, NoiseGateLayer):
                kl, g_mu, g_logsig = layer.kl_grads()
                kl_total += kl
                w = kl_scale / n_train
                grads[(idx, "mu")] = grads[(idx, "mu")] + w * g_mu
                grads[(idx, "log_sigma")] = grads[(idx, "log_sigma")] + w * g_logsig

        for (idx, name), arr in grads.items():
            if not np.all(np.isfinite(arr)):
                bad = np.argwhere(~np.isfinite(arr))[0]
                raise GradientError(
                    f"non-finite gradient in layer {idx} param {name!r} at index {tuple(bad)}"
                )
        loss = data_loss + kl_scale * kl_total / n_train
        return loss, data_loss, kl_total, grads

    def params(self) -> dict:
        """All trainable arrays keyed by (layer_index, param_name)."""
        out = {}
        for idx, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[(idx, name)] = arr
        return out

    def apply_params(self, new_params: dict) -> None:
        """Install updated arrays (used after functional-style updates)."""
        for (idx, name), arr in new_params.items():
            setattr_param(self.layers[idx], name, arr)

    def kl_total(self) -> float:
        return sum(l.kl() for l in self.layers if isinstance(l, NoiseGateLayer))

    # -- prunable structures --------------------------------------------------

    def gate_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, NoiseGateLayer)]

    def prunable_sites(self) -> list[PrunableSite]:
        """Hidden Dense/Conv layers in order; the output head is not prunable."""
        producer_idxs = [
            i for i, l in enumerate(self.layers) if isinstance(l, (Dense, Conv2d))
        ][:-1]
        sites = []
        for i in producer_idxs:
            gate_idx = None
            if i + 1 < len(self.layers) and isinstance(self.layers[i + 1], NoiseGateLayer):
                gate_idx = i + 1
            layer = self.layers[i]
            width = layer.out_dim if isinstance(layer, Dense) else layer.out_channels
            sites.append(PrunableSite(i, gate_idx, width))
        return sites

    def n_structures(self) -> int:
        return sum(site.width for site in self.prunable_sites())

    def locate_structure(self, structure_id: int):
        """Map a network-wide flat structure id to (site, local_index)."""
        offset = 0
        for site in self.prunable_sites():
            if structure_id < offset + site.width:
                return site, structure_id - offset
            offset += site.width
        raise IndexError(f"structure id {structure_id} out of range ({offset} structures)")

    def structure_weight(self, site: PrunableSite, index: int) -> np.ndarray:
        """Incoming weights of one structure (dense row or full conv kernel)."""
        layer = self.layers[site.producer_idx]
        if not (0 <= index < site.width):
            raise IndexError(f"structure {index} out of range for site {site}")
        if isinstance(layer, Dense):
            return layer.weights[index, :]
        return layer.filters[index]

    def alive_counts(self) -> list[int]:
        return [self.layers[i].n_alive for i in self.gate_indices()]

    # -- physical pruning -------------------------------------------------------

    def prune_structures(self, site: PrunableSite, local_indices, adam=None) -> dict:
        """Physically remove structures from a site.

        Shrinks the producer's rows/filters and bias, the gate's parameter
        vectors, and the consumer's input columns/channels (channel-major
        blocks when a flatten sits in between).  Optimizer moment slots are
        narrowed through ``adam`` when given.  Returns a removal descriptor.
        """
        local_indices = np.atleast_1d(np.asarray(local_indices, dtype=np.int64))
        if local_indices.size == 0:
            return {"indices": local_indices, "labels": local_indices.copy()}
        producer = self.layers[site.producer_idx]
        width = site.width
        if np.any(local_indices < 0) or np.any(local_indices >= width):
            raise IndexError("structure index out of range for site")
        in_shapes = self.layer_input_shapes()

        if site.gate_idx is not None:
            gate: NoiseGateLayer = self.layers[site.gate_idx]
            descriptor = gate.prune_indices(local_indices)
        else:
            descriptor = {"indices": local_indices.copy(), "labels": local_indices.copy()}

        keep = np.setdiff1d(np.arange(width), local_indices)

        if isinstance(producer, Dense):
            producer.weights = producer.weights[keep, :]
        else:
            producer.filters = producer.filters[keep]
        producer.bias = producer.bias[keep]
        if adam is not None:
            adam.narrow((site.producer_idx, "weights" if isinstance(producer, Dense) else "filters"), 0, keep)
            adam.narrow((site.producer_idx, "bias"), 0, keep)

        if site.gate_idx is not None:
            gate.mu = gate.mu[keep]
            gate.log_sigma = gate.log_sigma[keep]
            gate.alive = gate.alive[keep]
            gate.labels = gate.labels[keep]
            if adam is not None:
                adam.narrow((site.gate_idx, "mu"), 0, keep)
                adam.narrow((site.gate_idx, "log_sigma"), 0, keep)

        # walk to the consumer, tracking whether a flatten intervenes
        consumer_idx = None
        through_flatten = False
        flatten_block = 1
        for j in range(site.producer_idx + 1, len(self.layers)):
            layer = self.layers[j]
            if isinstance(layer, (Dense, Conv2d)):
                consumer_idx = j
                break
            if isinstance(layer, Flatten):
                through_flatten = True
                c, h, w = in_shapes[j]
                flatten_block = h * w
        if consumer_idx is None:
            raise ValueError("prunable site has no consumer layer")

        consumer = self.layers[consumer_idx]
        if isinstance(consumer, Conv2d):
            consumer.filters = consumer.filters[:, keep, :, :]
            if adam is not None:
                adam.narrow((consumer_idx, "filters"), 1, keep)
        else:
            if through_flatten:
                col_keep = (
                    keep[:, None] * flatten_block + np.arange(flatten_block)[None, :]
                ).reshape(-1)
            else:
                col_keep = keep
            consumer.weights = consumer.weights[:, col_keep]
            if adam is not None:
                adam.narrow((consumer_idx, "weights"), 1, col_keep)

        return descriptor

    # -- bookkeeping ------------------------------------------------------------

    def count_parameters(self) -> int:
        """Weight + bias scalars of dense/conv layers (gate parameters excluded)."""
        total = 0
        for layer in self.layers:
            if isinstance(layer, Dense):
                total += layer.weights.size + layer.bias.size
            elif isinstance(layer, Conv2d):
                total += layer.filters.size + layer.bias.size
        return total


def setattr_param(layer, name: str, arr: np.ndarray) -> None:
    if name not in layer.params():
        raise KeyError(f"{type(layer).__name__} has no param {name!r}")
    setattr(layer, name, arr)


def draw_noise(net: NetworkGraph, rng: np.random.Generator,
               batch_size: int | None = None) -> dict:
    """Uniform draws per alive structure of each gate, clipped into (0, 1).

    With ``batch_size`` the draws are per example (shape ``(batch, n_alive)``);
    otherwise one draw per structure is shared across the minibatch.  Gates
    are visited in layer order so a fixed generator state yields a fixed
    draw, independent of how the caller consumes the dict.
    """
    tiny = np.finfo(float).tiny
    top = 1.0 - np.finfo(float).epsneg
    noise = {}
    for idx in net.gate_indices():
        n = net.layers[idx].n_alive
        shape = (n,) if batch_size is None else (batch_size, n)
        noise[idx] = np.clip(rng.random(shape), tiny, top)
    return noise


def predict(net: NetworkGraph, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits = net.forward(images[start : start + batch_size], mode="eval")
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def accuracy(net: NetworkGraph, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 512) -> float:
    return float(np.mean(predict(net, images, batch_size) == labels))


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_mlp(
    rng: np.random.Generator,
    in_shape: tuple = (1, 28, 28),
    n_hidden_layers: int = 7,
    hidden_dim: int = 100,
    n_classes: int = 10,
    with_gates: bool = True,
    log_lo: float = -20.0,
    log_hi: float = 0.0,
) -> NetworkGraph:
    """Fully connected ReLU net; every hidden unit carries a noise gate."""
    in_dim = int(np.prod(in_shape))
    layers: list = [Flatten()]
    prev = in_dim
    for _ in range(n_hidden_layers):
        layers.append(Dense(prev, hidden_dim, rng))
        if with_gates:
            layers.append(NoiseGateLayer(hidden_dim, log_lo, log_hi))
        layers.append(ReLU())
        prev = hidden_dim
    layers.append(Dense(prev, n_classes, rng))
    return NetworkGraph(layers, in_shape)


def build_lenet5(
    rng: np.random.Generator,
    in_shape: tuple = (1, 28, 28),
    n_classes: int = 10,
    with_gates: bool = True,
    log_lo: float = -20.0,
    log_hi: float = 0.0,
) -> NetworkGraph:
    """Lenet5-style CNN: conv(6) and conv(16) blocks, then 120/84 dense units.

    Gates sit on each conv output channel and each hidden dense unit.
    """
    c, h, w = in_shape

    def gate(n):
        return [NoiseGateLayer(n, log_lo, log_hi)] if with_gates else []

    layers: list = []
    layers += [Conv2d(c, 6, 5, rng, padding=2), *gate(6), ReLU(), MaxPool2d(2)]
    layers += [Conv2d(6, 16, 5, rng), *gate(16), ReLU(), MaxPool2d(2)]
    layers += [Flatten()]
    shape = (c, h, w)
    for layer in layers:
        shape = layer.output_shape(shape)
    flat = shape[0]
    layers += [Dense(flat, 120, rng), *gate(120), ReLU()]
    layers += [Dense(120, 84, rng), *gate(84), ReLU()]
    layers += [Dense(84, n_classes, rng)]
    return NetworkGraph(layers, in_shape)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def _write_u32(f, *values):
    f.write(struct.pack("<" + "I" * len(values), *values))


def _write_f64(f, arr):
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(net: NetworkGraph, path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        _write_u32(f, CHECKPOINT_VERSION, len(net.layers), len(net.input_shape))
        _write_u32(f, *net.input_shape)
        for layer in net.layers:
            f.write(struct.pack("<B", _LAYER_TAGS[type(layer)]))
            if isinstance(layer, Dense):
                _write_u32(f, layer.out_dim, layer.in_dim)
                _write_f64(f, layer.weights)
                _write_f64(f, layer.bias)
            elif isinstance(layer, Conv2d):
                _write_u32(
                    f,
                    layer.out_channels,
                    layer.in_channels,
                    layer.kernel_size,
                    layer.stride,
                    layer.padding,
                )
                _write_f64(f, layer.filters)
                _write_f64(f, layer.bias)
            elif isinstance(layer, MaxPool2d):
                _write_u32(f, layer.size)
            elif isinstance(layer, NoiseGateLayer):
                _write_u32(f, layer.n_structures)
                _write_f64(f, np.array([layer.log_lo, layer.log_hi]))
                _write_f64(f, layer.mu)
                _write_f64(f, layer.log_sigma)
                f.write(np.ascontiguousarray(layer.labels, dtype="<i8").tobytes())
                f.write(np.packbits(layer.alive, bitorder="little").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack("<" + "I" * count, self.take(4 * count))
        return vals[0] if count == 1 else vals

    def u8(self) -> int:
        return self.take(1)[0]

    def f64(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).copy()

    def i64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<i8").copy()


def load_checkpoint(path) -> NetworkGraph:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic at byte 0; not a model checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    n_layers = r.u32()
    ndim = r.u32()
    input_shape = tuple(r.u32(ndim)) if ndim > 1 else (r.u32(),)

    rng = np.random.default_rng(0)  # placeholder init, overwritten below
    layers: list = []
    for _ in range(n_layers):
        tag = r.u8()
        if tag == 1:
            out_dim, in_dim = r.u32(2)
            layer = Dense(in_dim, out_dim, rng)
            layer.weights = r.f64((out_dim, in_dim))
            layer.bias = r.f64((out_dim,))
        elif tag == 2:
            out_ch, in_ch, k, stride, padding = r.u32(5)
            layer = Conv2d(in_ch, out_ch, k, rng, stride=stride, padding=padding)
            layer.filters = r.f64((out_ch, in_ch, k, k))
            layer.bias = r.f64((out_ch,))
        elif tag == 3:
            layer = ReLU()
        elif tag == 4:
            layer = MaxPool2d(r.u32())
        elif tag == 5:
            layer = Flatten()
        elif tag == 6:
            n = r.u32()
            bounds = r.f64((2,))
            layer = NoiseGateLayer(n, float(bounds[0]), float(bounds[1]))
            layer.mu = r.f64((n,))
            layer.log_sigma = r.f64((n,))
            layer.labels = r.i64(n)
            packed = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
            layer.alive = np.unpackbits(packed, count=n, bitorder="little").astype(bool)
        else:
            raise CheckpointError(f"unknown layer tag {tag} at byte {r.pos - 1}")
        layers.append(layer)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after layer payload")
    return NetworkGraph(layers, input_shape)
