"""Discriminative deep belief network: model, greedy CD training,
quantized inference, quantization-aware retraining, and serialization.

The network stacks L hidden layers on a 784-unit input; the top RBM is
discriminative, with a 10-unit one-hot class block concatenated to the
last-but-one hidden layer. Inference propagates input -> hidden layers ->
class softmax; stochastic mode samples binary hidden states and averages
class probabilities over repetitions, mean-field mode propagates
probabilities deterministically.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import FixedPointFormat, quantize_all

MODEL_MAGIC = b"ADBN"
MODEL_VERSION = 1


class ModelFileError(Exception):
    pass


class VersionMismatch(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def softmax(z):
    """Row-wise stable softmax."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def weight_format(frac_bits, int_bits=8):
    """Signed Qm.n for weights/biases/pre-activations; a 0-bit budget
    collapses to the zero-only format (pruning)."""
    if frac_bits == 0:
        return FixedPointFormat(signed=True, int_bits=0, frac_bits=0)
    return FixedPointFormat(signed=True, int_bits=int_bits, frac_bits=frac_bits)


def activation_format(frac_bits):
    """Unsigned Q0.n for sigmoid/softmax outputs in [0, 1)."""
    return FixedPointFormat(signed=False, int_bits=0, frac_bits=frac_bits)


@dataclass
class PrecisionMap:
    """Fractional-bit budgets: one entry per hidden neuron (governs that
    neuron's incoming weights/bias, pre-activation, and activation), one
    budget for the class layer, and a global budget for remaining
    variables (layer-1 visible bias, reporting defaults)."""

    hidden_frac_bits: list          # per hidden layer, int array of budgets
    class_frac_bits: int
    global_frac_bits: int
    weight_int_bits: int = 8
    activation_frac_bits: int = 0   # 0 = follow the owning budget; a fixed
                                    # value supports e.g. Q8.56 weights with
                                    # Q0.64 activations

    @classmethod
    def uniform(cls, hidden_sizes, frac_bits, weight_int_bits=8,
                activation_frac_bits=0):
        return cls(
            hidden_frac_bits=[np.full(n, frac_bits, dtype=np.int64) for n in hidden_sizes],
            class_frac_bits=frac_bits,
            global_frac_bits=frac_bits,
            weight_int_bits=weight_int_bits,
            activation_frac_bits=activation_frac_bits,
        )

    def copy(self):
        return PrecisionMap(
            [b.copy() for b in self.hidden_frac_bits],
            self.class_frac_bits,
            self.global_frac_bits,
            self.weight_int_bits,
            self.activation_frac_bits,
        )

    def activation_bits(self, budget):
        """Activation budget for a neuron with the given frac-bit budget;
        a 0-bit (pruned) neuron always has a zero-bit activation."""
        if budget == 0 or self.activation_frac_bits == 0:
            return budget
        return self.activation_frac_bits

    def total_hidden_bits(self) -> int:
        return int(sum(b.sum() for b in self.hidden_frac_bits))

    def num_hidden_neurons(self) -> int:
        return int(sum(len(b) for b in self.hidden_frac_bits))

    def check_monotone_update(self, new):
        """Guard used by the search: budgets only ever decrease."""
        for old_b, new_b in zip(self.hidden_frac_bits, new.hidden_frac_bits):
            if np.any(new_b > old_b):
                raise ValueError("bit-length increase is not allowed")
        if new.class_frac_bits > self.class_frac_bits:
            raise ValueError("bit-length increase is not allowed")


def _quantize_columns(arr, frac_bits, fmt_fn):
    """Quantize each column of ``arr`` (last axis) under its own format."""
    out = np.array(arr, dtype=np.float64)
    for n in np.unique(frac_bits):
        cols = np.asarray(frac_bits) == n
        out[..., cols] = quantize_all(out[..., cols], fmt_fn(int(n)))
    return out


@dataclass
class DdbnModel:
    layer_sizes: list               # [784, n1, ..., nL, 10]
    weights: list                   # L arrays, (prev, n_l)
    hidden_biases: list             # L arrays, (n_l,)
    visible_biases: list            # L arrays, (prev,) -- CD training only
    class_weights: np.ndarray       # (n_L, 10)
    class_bias: np.ndarray          # (10,)
    precision: PrecisionMap = None
    metadata: dict = field(default_factory=dict)

    @property
    def hidden_sizes(self):
        return self.layer_sizes[1:-1]

    @property
    def num_hidden_layers(self):
        return len(self.layer_sizes) - 2

    @classmethod
    def random_init(cls, layer_sizes, seed=0, scale=0.01):
        rng = np.random.default_rng(seed)
        sizes = list(layer_sizes)
        weights, h_biases, v_biases = [], [], []
        for prev, cur in zip(sizes[:-2], sizes[1:-1]):
            weights.append(scale * rng.standard_normal((prev, cur)))
            h_biases.append(np.zeros(cur))
            v_biases.append(np.zeros(prev))
        class_weights = scale * rng.standard_normal((sizes[-2], sizes[-1]))
        return cls(sizes, weights, h_biases, v_biases, class_weights,
                   np.zeros(sizes[-1]))

    def copy(self):
        return DdbnModel(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.hidden_biases],
            [b.copy() for b in self.visible_biases],
            self.class_weights.copy(),
            self.class_bias.copy(),
            self.precision.copy() if self.precision else None,
            dict(self.metadata),
        )

    # ---- inference -----------------------------------------------------

    def hidden_probs(self, layer, v):
        """Activation probabilities of hidden layer ``layer`` (0-based)
        given the previous layer's values; applies the attached precision
        map to pre-activations and activations."""
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        if v.shape[1] != self.layer_sizes[layer]:
            raise ValueError(
                f"layer {layer} expects inputs of size "
                f"{self.layer_sizes[layer]}, got {v.shape[1]}"
            )
        z = v @ self.weights[layer] + self.hidden_biases[layer]
        if self.precision is not None:
            pmap = self.precision
            bits = pmap.hidden_frac_bits[layer]
            m = pmap.weight_int_bits
            z = _quantize_columns(z, bits, lambda n: weight_format(n, m))
            a = _quantize_columns(
                sigmoid(z), bits,
                lambda n: activation_format(pmap.activation_bits(n)))
        else:
            a = sigmoid(z)
        return a

    def class_probs(self, h):
        """Softmax class probabilities given the top hidden layer."""
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        if h.shape[1] != self.layer_sizes[-2]:
            raise ValueError(
                f"class layer expects inputs of size {self.layer_sizes[-2]}, "
                f"got {h.shape[1]}"
            )
        z = h @ self.class_weights + self.class_bias
        if self.precision is not None:
            n = self.precision.class_frac_bits
            z = quantize_all(z, weight_format(n, self.precision.weight_int_bits))
            return quantize_all(
                softmax(z),
                activation_format(self.precision.activation_bits(n)))
        return softmax(z)

    def forward_hidden(self, v):
        """Mean-field propagation through all hidden layers."""
        a = np.atleast_2d(np.asarray(v, dtype=np.float64))
        for layer in range(self.num_hidden_layers):
            a = self.hidden_probs(layer, a)
        return a

    def classify(self, v, mode="mean_field", samples=10, seed=0):
        """Predict classes. Returns (predicted classes, class probability
        vectors); ties resolve to the lowest class index."""
        v = np.asarray(v, dtype=np.float64)
        single = v.ndim == 1
        v = np.atleast_2d(v)
        if mode == "mean_field":
            probs = self.class_probs(self.forward_hidden(v))
        elif mode == "stochastic":
            if samples < 1:
                raise ValueError("stochastic mode needs samples >= 1")
            probs = np.empty((len(v), self.layer_sizes[-1]))
            for i, x in enumerate(v):
                rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
                probs[i] = self._stochastic_probs(x, samples, rng)
        else:
            raise ValueError(f"unknown inference mode {mode!r}")
        pred = np.argmax(probs, axis=1)
        if single:
            return int(pred[0]), probs[0]
        return pred, probs

    def _stochastic_probs(self, x, samples, rng):
        a = self.hidden_probs(0, x[None, :])
        h = (rng.random((samples, a.shape[1])) < a).astype(np.float64)
        for layer in range(1, self.num_hidden_layers):
            a = self.hidden_probs(layer, h)
            h = (rng.random(a.shape) < a).astype(np.float64)
        return self.class_probs(h).mean(axis=0)

    # ---- precision -----------------------------------------------------

    def apply_precision(self, pmap):
        """Quantize every parameter under ``pmap`` and attach the map; the
        result satisfies the quantization fixpoint invariant."""
        m = self.copy()
        wm = pmap.weight_int_bits
        for layer in range(m.num_hidden_layers):
            bits = pmap.hidden_frac_bits[layer]
            m.weights[layer] = _quantize_columns(
                m.weights[layer], bits, lambda n: weight_format(n, wm))
            m.hidden_biases[layer] = _quantize_columns(
                m.hidden_biases[layer], bits, lambda n: weight_format(n, wm))
            if layer == 0:
                vfmt = weight_format(pmap.global_frac_bits, wm)
                m.visible_biases[layer] = quantize_all(m.visible_biases[layer], vfmt)
            else:
                m.visible_biases[layer] = _quantize_columns(
                    m.visible_biases[layer], pmap.hidden_frac_bits[layer - 1],
                    lambda n: weight_format(n, wm))
        cfmt = weight_format(pmap.class_frac_bits, wm)
        m.class_weights = quantize_all(m.class_weights, cfmt)
        m.class_bias = quantize_all(m.class_bias, cfmt)
        m.precision = pmap.copy()
        return m


@dataclass
class TrainConfig:
    cd_steps: int = 1
    learning_rate: float = 0.05
    epochs: int = 15
    batch_size: int = 100
    momentum: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.cd_steps < 1 or self.batch_size < 1:
            raise ValueError("epochs, cd_steps and batch_size must be >= 1")


def _requantize_layer(model, layer):
    pmap = model.precision
    if pmap is None:
        return
    wm = pmap.weight_int_bits
    bits = pmap.hidden_frac_bits[layer]
    model.weights[layer] = _quantize_columns(
        model.weights[layer], bits, lambda n: weight_format(n, wm))
    model.hidden_biases[layer] = _quantize_columns(
        model.hidden_biases[layer], bits, lambda n: weight_format(n, wm))
    if layer == 0:
        vfmt = weight_format(pmap.global_frac_bits, wm)
        model.visible_biases[layer] = quantize_all(model.visible_biases[layer], vfmt)
    else:
        model.visible_biases[layer] = _quantize_columns(
            model.visible_biases[layer], pmap.hidden_frac_bits[layer - 1],
            lambda n: weight_format(n, wm))


def _requantize_class(model):
    pmap = model.precision
    if pmap is None:
        return
    cfmt = weight_format(pmap.class_frac_bits, pmap.weight_int_bits)
    model.class_weights = quantize_all(model.class_weights, cfmt)
    model.class_bias = quantize_all(model.class_bias, cfmt)


def _train_rbm(model, layer, data, config, rng):
    """CD-k on one plain RBM. Under a precision map, gradients accumulate
    in full-precision master parameters while the model's own parameters
    (used by every forward pass) are re-quantized after each update."""
    master_w = model.weights[layer].copy()
    master_hb = model.hidden_biases[layer].copy()
    master_vb = model.visible_biases[layer].copy()
    vel_w = np.zeros_like(master_w)
    vel_hb = np.zeros_like(master_hb)
    vel_vb = np.zeros_like(master_vb)
    n = len(data)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            v0 = data[order[start:start + config.batch_size]]
            ph0 = sigmoid(v0 @ model.weights[layer] + model.hidden_biases[layer])
            phk, vk = ph0, v0
            for _ in range(config.cd_steps):
                hk = (rng.random(phk.shape) < phk).astype(np.float64)
                vk = sigmoid(hk @ model.weights[layer].T + model.visible_biases[layer])
                phk = sigmoid(vk @ model.weights[layer] + model.hidden_biases[layer])
            b = len(v0)
            lr = config.learning_rate
            vel_w = config.momentum * vel_w + lr * (v0.T @ ph0 - vk.T @ phk) / b
            vel_hb = config.momentum * vel_hb + lr * (ph0 - phk).mean(axis=0)
            vel_vb = config.momentum * vel_vb + lr * (v0 - vk).mean(axis=0)
            master_w = master_w + vel_w
            master_hb = master_hb + vel_hb
            master_vb = master_vb + vel_vb
            model.weights[layer] = master_w
            model.hidden_biases[layer] = master_hb
            model.visible_biases[layer] = master_vb
            _requantize_layer(model, layer)


def _sample_one_hot(probs, rng):
    u = rng.random(len(probs))
    idx = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    idx = np.minimum(idx, probs.shape[1] - 1)
    out = np.zeros_like(probs)
    out[np.arange(len(probs)), idx] = 1.0
    return out


def _train_top_rbm(model, data, targets, config, rng):
    """Discriminative top RBM: visible layer is [h_prev, one-hot class];
    the class block reconstructs through a softmax, sampling one class."""
    layer = model.num_hidden_layers - 1
    master_w = model.weights[layer].copy()
    master_cw = model.class_weights.copy()
    master_hb = model.hidden_biases[layer].copy()
    master_vb = model.visible_biases[layer].copy()
    master_cb = model.class_bias.copy()
    vel_w = np.zeros_like(master_w)
    vel_cw = np.zeros_like(master_cw)
    vel_hb = np.zeros_like(master_hb)
    vel_vb = np.zeros_like(master_vb)
    vel_cb = np.zeros_like(master_cb)
    n = len(data)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            x0, t0 = data[sel], targets[sel]
            ph0 = sigmoid(x0 @ model.weights[layer] + t0 @ model.class_weights.T
                          + model.hidden_biases[layer])
            phk, xk, tk = ph0, x0, t0
            for _ in range(config.cd_steps):
                hk = (rng.random(phk.shape) < phk).astype(np.float64)
                xk = sigmoid(hk @ model.weights[layer].T + model.visible_biases[layer])
                tk = _sample_one_hot(
                    softmax(hk @ model.class_weights + model.class_bias), rng)
                phk = sigmoid(xk @ model.weights[layer] + tk @ model.class_weights.T
                              + model.hidden_biases[layer])
            b = len(x0)
            lr = config.learning_rate
            vel_w = config.momentum * vel_w + lr * (x0.T @ ph0 - xk.T @ phk) / b
            vel_cw = config.momentum * vel_cw + lr * (ph0.T @ t0 - phk.T @ tk) / b
            vel_hb = config.momentum * vel_hb + lr * (ph0 - phk).mean(axis=0)
            vel_vb = config.momentum * vel_vb + lr * (x0 - xk).mean(axis=0)
            vel_cb = config.momentum * vel_cb + lr * (t0 - tk).mean(axis=0)
            master_w = master_w + vel_w
            master_cw = master_cw + vel_cw
            master_hb = master_hb + vel_hb
            master_vb = master_vb + vel_vb
            master_cb = master_cb + vel_cb
            model.weights[layer] = master_w
            model.class_weights = master_cw
            model.hidden_biases[layer] = master_hb
            model.visible_biases[layer] = master_vb
            model.class_bias = master_cb
            _requantize_layer(model, layer)
            _requantize_class(model)


def _train_stack(model, images, one_hot, config):
    rng = np.random.default_rng(config.seed)
    data = np.asarray(images, dtype=np.float64)
    for layer in range(model.num_hidden_layers - 1):
        _train_rbm(model, layer, data, config, rng)
        data = model.hidden_probs(layer, data)
    _train_top_rbm(model, data, one_hot, config, rng)


def train_ddbn(images, one_hot, layer_sizes, config) -> DdbnModel:
    """Greedy layer-wise CD pretraining followed by discriminative
    top-RBM training; deterministic for a fixed config seed."""
    if len(images) == 0:
        raise ValueError("training set is empty")
    model = DdbnModel.random_init(layer_sizes, seed=config.seed)
    _train_stack(model, images, one_hot, config)
    model.metadata["train_seed"] = config.seed
    return model


def retrain_quantized(model, pmap, images, one_hot, config) -> DdbnModel:
    """Continue CD training from the current (quantized) parameters.
    The model's parameters are re-quantized after every update; the
    update steps themselves accumulate in full-precision masters so
    that coarse formats do not swallow small gradients. Pruned neurons
    stay at zero."""
    out = model.apply_precision(pmap)
    _train_stack(out, images, one_hot, config)
    return out


def evaluate_accuracy(model, images, labels, mode="mean_field",
                      samples=10, seed=0, chunk=2048):
    """Fraction of samples classified correctly."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("evaluation set is empty")
    correct = 0
    for start in range(0, len(images), chunk):
        batch = images[start:start + chunk]
        if mode == "stochastic":
            preds = np.empty(len(batch), dtype=np.int64)
            for i, x in enumerate(batch):
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, start + i]))
                preds[i] = int(np.argmax(model._stochastic_probs(x, samples, rng)))
        else:
            preds, _ = model.classify(batch, mode=mode)
        correct += int((preds == labels[start:start + chunk]).sum())
    return correct / len(images)


def confusion_counts(model, images, labels, mode="mean_field",
                     samples=10, seed=0):
    """10x10 matrix of (true label, predicted label) counts."""
    counts = np.zeros((10, 10), dtype=np.int64)
    images = np.asarray(images, dtype=np.float64)
    if mode == "stochastic":
        for i, x in enumerate(images):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
            pred = int(np.argmax(model._stochastic_probs(x, samples, rng)))
            counts[labels[i], pred] += 1
    else:
        preds, _ = model.classify(images, mode=mode)
        for t, p in zip(labels, preds):
            counts[t, p] += 1
    return counts


# ---- serialization -----------------------------------------------------


def _pack_array(arr):
    return np.asarray(arr, dtype="<f8").tobytes()


def save_model(model, path):
    """Versioned binary container with trailing CRC32."""
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack("<H", MODEL_VERSION)
    sizes = model.layer_sizes
    buf += struct.pack("<H", len(sizes))
    buf += struct.pack(f"<{len(sizes)}I", *sizes)
    for layer in range(model.num_hidden_layers):
        buf += _pack_array(model.weights[layer])
        buf += _pack_array(model.hidden_biases[layer])
        buf += _pack_array(model.visible_biases[layer])
    buf += _pack_array(model.class_weights)
    buf += _pack_array(model.class_bias)
    pmap = model.precision
    buf += struct.pack("<B", 1 if pmap is not None else 0)
    if pmap is not None:
        buf += struct.pack("<BHHH", pmap.weight_int_bits,
                           pmap.class_frac_bits, pmap.global_frac_bits,
                           pmap.activation_frac_bits)
        for bits in pmap.hidden_frac_bits:
            buf += np.asarray(bits, dtype="<u2").tobytes()
    meta = json.dumps(model.metadata, sort_keys=True).encode()
    buf += struct.pack("<I", len(meta))
    buf += meta
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    with open(path, "wb") as f:
        f.write(bytes(buf))


class _Reader:
    def __init__(self, data, path):
        self.data, self.path, self.pos = data, path, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ModelFileError(f"{self.path}: truncated at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape):
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * 8), dtype="<f8").reshape(shape).copy()


def load_model(path) -> DdbnModel:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 10 or data[:4] != MODEL_MAGIC:
        raise ModelFileError(f"{path}: not a model file (bad magic)")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumError(f"{path}: CRC32 mismatch, file is corrupted")
    r = _Reader(data[:-4], path)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != MODEL_VERSION:
        raise VersionMismatch(
            f"{path}: format version {version}, this build reads {MODEL_VERSION}")
    (n_sizes,) = r.unpack("<H")
    sizes = list(r.unpack(f"<{n_sizes}I"))
    weights, h_biases, v_biases = [], [], []
    for prev, cur in zip(sizes[:-2], sizes[1:-1]):
        weights.append(r.array((prev, cur)))
        h_biases.append(r.array((cur,)))
        v_biases.append(r.array((prev,)))
    class_weights = r.array((sizes[-2], sizes[-1]))
    class_bias = r.array((sizes[-1],))
    (has_pmap,) = r.unpack("<B")
    pmap = None
    if has_pmap:
        wib, cfb, gfb, afb = r.unpack("<BHHH")
        hidden_bits = [
            np.frombuffer(r.take(n * 2), dtype="<u2").astype(np.int64)
            for n in sizes[1:-1]
        ]
        pmap = PrecisionMap(hidden_bits, cfb, gfb, wib, afb)
    (meta_len,) = r.unpack("<I")
    metadata = json.loads(r.take(meta_len).decode())
    return DdbnModel(sizes, weights, h_biases, v_biases, class_weights,
                     class_bias, pmap, metadata)


def export_text(model, path):
    """Human-readable diagnostic dump of parameters and precision map."""
    with open(path, "w") as f:
        f.write(f"layer_sizes: {model.layer_sizes}\n")
        if model.precision is not None:
            p = model.precision
            f.write(f"class_frac_bits: {p.class_frac_bits}\n")
            f.write(f"global_frac_bits: {p.global_frac_bits}\n")
            for i, bits in enumerate(p.hidden_frac_bits):
                f.write(f"hidden_frac_bits[{i}]: {' '.join(map(str, bits))}\n")
        else:
            f.write("precision: none\n")
        for layer in range(model.num_hidden_layers):
            f.write(f"\n# hidden layer {layer}\n")
            np.savetxt(f, model.weights[layer], header=f"W[{layer}]")
            np.savetxt(f, model.hidden_biases[layer][None, :], header=f"b[{layer}]")
            np.savetxt(f, model.visible_biases[layer][None, :], header=f"bv[{layer}]")
        f.write("\n# class layer\n")
        np.savetxt(f, model.class_weights, header="Wc")
        np.savetxt(f, model.class_bias[None, :], header="bc")
