"""Minimal trainable layers with reverse-mode gradients and rmsprop.

Six layer types (dense, conv2d-3x3, maxpool-2x2, relu, dropout,
residual-add) compose into a LayerGraph: a sequential chain where
residual-add nodes fetch a skip connection from an earlier node. Everything
is float64 and deterministic: weights come from a seeded init stream and
dropout masks from a per-layer, per-step stream, so identical seeds and
inputs reproduce training runs bit-exactly.
"""

import json
import os

import numpy as np

from . import rng
from .errors import DataIOError, ValidationError


# ---------------------------------------------------------------------------
# layers


class Dense:
    """Affine map y = x W + b over the last axis of a flattened batch."""

    def __init__(self, n_in, n_out):
        if n_in < 1 or n_out < 1:
            raise ValidationError("dense layer sizes must be positive")
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.weight = np.zeros((self.n_in, self.n_out))
        self.bias = np.zeros(self.n_out)
        self._x = None

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.n_in:
            raise ValidationError(f"dense expects ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def init_params(self, gen):
        limit = np.sqrt(6.0 / self.n_in)
        self.weight = gen.uniform(-limit, limit, size=(self.n_in, self.n_out))
        self.bias = np.zeros(self.n_out)

    def forward(self, x, train, gen):
        if train:
            self._x = x
        return x @ self.weight + self.bias

    def backward(self, up):
        self.g_weight = self._x.T @ up
        self.g_bias = up.sum(axis=0)
        return up @ self.weight.T

    def params(self):
        return [("weight", "weight"), ("bias", "bias")]

    def spec(self):
        return {"kind": "dense", "n_in": self.n_in, "n_out": self.n_out}


class Relu:
    def __init__(self):
        self._x = None

    def out_shape(self, in_shape):
        return in_shape

    def init_params(self, gen):
        pass

    def forward(self, x, train, gen):
        if train:
            self._x = x
        return np.maximum(x, 0.0)

    def backward(self, up):
        return up * (self._x > 0.0)

    def params(self):
        return []

    def spec(self):
        return {"kind": "relu"}


class Dropout:
    """Inverted dropout: scales kept units by 1/(1-rate); eval mode is identity."""

    def __init__(self, rate=0.5):
        if not (0.0 <= rate < 1.0):
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self._mask = None

    def out_shape(self, in_shape):
        return in_shape

    def init_params(self, gen):
        pass

    def forward(self, x, train, gen):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = gen.random(x.shape) >= self.rate
        self._mask = keep / (1.0 - self.rate)
        return x * self._mask

    def backward(self, up):
        if self._mask is None:
            return up
        return up * self._mask

    def params(self):
        return []

    def spec(self):
        return {"kind": "dropout", "rate": self.rate}


class Conv2d3x3:
    """3x3 convolution, stride 1, zero padding 1 (same spatial size)."""

    def __init__(self, c_in, c_out):
        if c_in < 1 or c_out < 1:
            raise ValidationError("conv channel counts must be positive")
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.weight = np.zeros((self.c_out, self.c_in, 3, 3))
        self.bias = np.zeros(self.c_out)
        self._cols = None
        self._in_shape = None

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ValidationError(f"conv expects ({self.c_in}, H, W), got {in_shape}")
        return (self.c_out, in_shape[1], in_shape[2])

    def init_params(self, gen):
        fan_in = self.c_in * 9
        limit = np.sqrt(6.0 / fan_in)
        self.weight = gen.uniform(-limit, limit, size=(self.c_out, self.c_in, 3, 3))
        self.bias = np.zeros(self.c_out)

    def _im2col(self, x):
        b, c, h, w = x.shape
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        shape = (b, c, 3, 3, h, w)
        strides = padded.strides[:2] + padded.strides[2:] + padded.strides[2:]
        windows = np.lib.stride_tricks.as_strided(padded, shape, strides)
        return windows.reshape(b, c * 9, h * w)

    def forward(self, x, train, gen):
        b, c, h, w = x.shape
        cols = self._im2col(x)  # (B, C*9, H*W)
        wmat = self.weight.reshape(self.c_out, c * 9)
        out = np.matmul(wmat, cols).reshape(b, self.c_out, h, w)
        out += self.bias[None, :, None, None]
        if train:
            self._cols = cols
            self._in_shape = x.shape
        return out

    def backward(self, up):
        b, c, h, w = self._in_shape
        upf = np.ascontiguousarray(up.reshape(b, self.c_out, h * w))
        g_w = np.matmul(upf, self._cols.transpose(0, 2, 1)).sum(axis=0)
        self.g_weight = g_w.reshape(self.weight.shape)
        self.g_bias = upf.sum(axis=(0, 2))
        wmat = self.weight.reshape(self.c_out, c * 9)
        dcols = np.matmul(wmat.T, upf).reshape(b, c, 3, 3, h, w)
        dx = np.zeros((b, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                dx[:, :, i : i + h, j : j + w] += dcols[:, :, i, j]
        return dx[:, :, 1 : 1 + h, 1 : 1 + w]

    def params(self):
        return [("weight", "weight"), ("bias", "bias")]

    def spec(self):
        return {"kind": "conv2d3x3", "c_in": self.c_in, "c_out": self.c_out}


class MaxPool2x2:
    """2x2 max pooling, stride 2; ties route the gradient to the first maximum."""

    def __init__(self):
        self._arg = None
        self._in_shape = None

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise ValidationError(f"maxpool expects (C, 2h, 2w), got {in_shape}")
        return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2)

    def init_params(self, gen):
        pass

    def forward(self, x, train, gen):
        b, c, h, w = x.shape
        win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(b, c, h // 2, w // 2, 4)
        if train:
            self._arg = win.argmax(axis=-1)
            self._in_shape = x.shape
        return win.max(axis=-1)

    def backward(self, up):
        b, c, h, w = self._in_shape
        routed = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(routed, self._arg[..., None], up[..., None], axis=-1)
        routed = routed.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return routed.reshape(b, c, h, w)

    def params(self):
        return []

    def spec(self):
        return {"kind": "maxpool2x2"}


class Flatten:
    def __init__(self):
        self._in_shape = None

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def init_params(self, gen):
        pass

    def forward(self, x, train, gen):
        if train:
            self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, up):
        return up.reshape(self._in_shape)

    def params(self):
        return []

    def spec(self):
        return {"kind": "flatten"}


class ResidualAdd:
    """Adds the activation of an earlier node (skip connection)."""

    def __init__(self, source):
        self.source = int(source)
        self._skip = None

    def out_shape(self, in_shape):
        return in_shape

    def init_params(self, gen):
        pass

    def forward(self, x, train, gen):
        return x + self._skip

    def backward(self, up):
        return up

    def params(self):
        return []

    def spec(self):
        return {"kind": "residual_add", "source": self.source}


_LAYER_KINDS = {
    "dense": lambda s: Dense(s["n_in"], s["n_out"]),
    "relu": lambda s: Relu(),
    "dropout": lambda s: Dropout(s["rate"]),
    "conv2d3x3": lambda s: Conv2d3x3(s["c_in"], s["c_out"]),
    "maxpool2x2": lambda s: MaxPool2x2(),
    "flatten": lambda s: Flatten(),
    "residual_add": lambda s: ResidualAdd(s["source"]),
}


# ---------------------------------------------------------------------------
# graph


class LayerGraph:
    """Sequential chain with skip connections, shape-checked at construction.

    Node i consumes node i-1's output (node -1 is the graph input); a
    ResidualAdd node also consumes the recorded output of its source node
    (source -1 is the input). Dropout masks for training step t of layer i
    are drawn from stream(seed, DOMAIN_DROPOUT, i, t).
    """

    def __init__(self, layers, input_shape, seed=0):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.seed = int(seed)
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ResidualAdd):
                if not (-1 <= layer.source < i):
                    raise ValidationError(f"residual source {layer.source} out of range at node {i}")
                skip_shape = shapes[layer.source + 1]
                if skip_shape != shapes[-1]:
                    raise ValidationError(
                        f"residual shapes differ at node {i}: {skip_shape} vs {shapes[-1]}"
                    )
            shapes.append(layer.out_shape(shapes[-1]))
        self.shapes = shapes
        self._acts = None
        for i, layer in enumerate(self.layers):
            layer.init_params(rng.stream(self.seed, rng.DOMAIN_INIT, i))

    @property
    def output_shape(self):
        return self.shapes[-1]

    def forward(self, x, train=False, step=0):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValidationError(f"input shape {x.shape[1:]} != declared {self.input_shape}")
        acts = [x]
        for i, layer in enumerate(self.layers):
            gen = None
            if train and isinstance(layer, Dropout):
                gen = rng.stream(self.seed, rng.DOMAIN_DROPOUT, i, step)
            if isinstance(layer, ResidualAdd):
                layer._skip = acts[layer.source + 1]
            acts.append(layer.forward(acts[-1], train, gen))
        self._acts = acts if train else None
        return acts[-1]

    def backward(self, upstream):
        """Propagate dLoss/dOutput; fills each layer's g_* fields.

        Returns dLoss/dInput.
        """
        if self._acts is None:
            raise ValidationError("backward requires a preceding forward(train=True)")
        grads = [None] * (len(self.layers) + 1)
        grads[-1] = np.asarray(upstream, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            up = grads[i + 1]
            down = layer.backward(up)
            if isinstance(layer, ResidualAdd):
                j = layer.source + 1
                grads[j] = up if grads[j] is None else grads[j] + up
            grads[i] = down if grads[i] is None else grads[i] + down
        return grads[0]

    # --- parameter access -------------------------------------------------

    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, attr in layer.params():
                out.append((f"layer{i:03d}.{name}", layer, attr))
        return out

    def param_arrays(self):
        return [getattr(layer, attr) for _, layer, attr in self.named_params()]

    def grad_arrays(self):
        return [getattr(layer, "g_" + attr) for _, layer, attr in self.named_params()]

    def set_param_arrays(self, arrays):
        named = self.named_params()
        if len(arrays) != len(named):
            raise ValidationError("parameter count mismatch")
        for (name, layer, attr), arr in zip(named, arrays):
            current = getattr(layer, attr)
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != current.shape:
                raise ValidationError(f"shape mismatch for {name}")
            setattr(layer, attr, arr)

    def specs(self):
        return [layer.spec() for layer in self.layers]


def graph_from_specs(specs, input_shape, seed=0):
    layers = []
    for spec in specs:
        kind = spec.get("kind")
        if kind not in _LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {kind!r}")
        layers.append(_LAYER_KINDS[kind](spec))
    return LayerGraph(layers, input_shape, seed)


# ---------------------------------------------------------------------------
# optimizer


class Rmsprop:
    """acc <- decay * acc + (1 - decay) * g^2;  p <- p - lr * g / (sqrt(acc) + eps)."""

    def __init__(self, learning_rate=3e-4, decay=0.99, epsilon=1e-8):
        if learning_rate <= 0 or not (0.0 <= decay < 1.0) or epsilon <= 0:
            raise ValidationError("invalid rmsprop hyperparameters")
        self.learning_rate = float(learning_rate)
        self.decay = float(decay)
        self.epsilon = float(epsilon)
        self.acc = None

    def step(self, params, grads):
        """Update parameter arrays in place; returns them for convenience."""
        if len(params) != len(grads):
            raise ValidationError("params and grads must align")
        if self.acc is None:
            self.acc = [np.zeros_like(p) for p in params]
        for p, g, a in zip(params, grads, self.acc):
            if p.shape != g.shape:
                raise ValidationError("parameter/gradient shape mismatch")
            a *= self.decay
            a += (1.0 - self.decay) * g * g
            p -= self.learning_rate * g / (np.sqrt(a) + self.epsilon)
        return params


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + one little-endian float64 blob per tensor


def save_checkpoint(graph, dirpath, step=0, extra=None):
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    for i, (name, layer, attr) in enumerate(graph.named_params()):
        arr = np.ascontiguousarray(getattr(layer, attr), dtype="<f8")
        fname = f"param{i:04d}.f64"
        with open(os.path.join(dirpath, fname), "wb") as handle:
            handle.write(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "layers": graph.specs(),
        "input_shape": list(graph.input_shape),
        "seed": graph.seed,
        "step": int(step),
        "params": entries,
    }
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(dirpath, "manifest.json"), "w") as handle:
        json.dump(manifest, handle, indent=1, sort_keys=True)
        handle.write("\n")


def load_checkpoint(dirpath):
    """Returns (graph, step, extra)."""
    path = os.path.join(dirpath, "manifest.json")
    try:
        with open(path) as handle:
            manifest = json.load(handle)
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataIOError(f"checkpoint manifest {path} is not valid JSON: {exc}") from exc
    try:
        graph = graph_from_specs(manifest["layers"], manifest["input_shape"], manifest["seed"])
        arrays = []
        for entry in manifest["params"]:
            fpath = os.path.join(dirpath, entry["file"])
            with open(fpath, "rb") as handle:
                raw = handle.read()
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
            arrays.append(arr)
        graph.set_param_arrays(arrays)
        return graph, int(manifest["step"]), manifest.get("extra")
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint blob: {exc}") from exc
    except (KeyError, TypeError) as exc:
        raise DataIOError(f"malformed checkpoint manifest: {exc}") from exc
