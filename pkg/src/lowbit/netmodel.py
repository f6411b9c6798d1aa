"""Quantized feed-forward networks: forward pass, activation gradients and the
per-layer linearization used for layerwise training.

A network is a list of quantized layers (dense or convolutional, each followed
by ReLU and optionally 2x2-style average pooling) and a real-valued output
layer ``f(x) = a . y_L + b``.  Layers are indexed from 0 here; layer ``l`` maps
``y_l`` to ``y_{l+1}``.

Convolutions use stride 1 and no padding.  Inputs to conv layers are
(C, H, W) images; patch vectors are laid out channel-major, then kernel row,
then kernel column.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .quantcore import (BinaryWeightVector, MultiComponentWeight, QuantLevels, UNIT_LEVELS,
                        multibit_scale, multibit_signs)

_CHUNK = 256


class ArchitectureError(ValueError):
    pass


# -- quantized weight matrices -------------------------------------------------

@dataclass(eq=False)
class QuantizedMatrix:
    """Rows of quantized weights stored as B bit planes.

    Binary rows (B = 1): ``w = alpha + (beta - alpha) * bits``.
    Multi-component rows: ``w = scale * sum_j signs[j] * bits[j]``.
    """
    bits: np.ndarray                 # (B, rows, cols) bool
    levels: QuantLevels | None = None
    signs: tuple = (1,)
    scale: float = 1.0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 3:
            raise ArchitectureError("bits must be (B, rows, cols)")
        if self.levels is not None and self.bits.shape[0] != 1:
            raise ArchitectureError("binary rows have exactly one bit plane")
        if self.levels is None and len(self.signs) != self.bits.shape[0]:
            raise ArchitectureError("one sign per bit plane")

    @classmethod
    def binary(cls, rows: int, cols: int, levels: QuantLevels, rng) -> "QuantizedMatrix":
        return cls(rng.random((1, rows, cols)) < 0.5, levels=levels)

    @classmethod
    def multibit(cls, rows: int, cols: int, n_components: int, beta: float, rng) -> "QuantizedMatrix":
        bits = rng.random((n_components, rows, cols)) < 0.5
        return cls(bits, None, multibit_signs(n_components), multibit_scale(n_components, beta))

    @property
    def shape(self) -> tuple:
        return self.bits.shape[1:]

    @property
    def n_components(self) -> int:
        return self.bits.shape[0]

    @property
    def offset(self) -> float:
        return self.levels.alpha if self.levels is not None else 0.0

    @property
    def coefs(self) -> tuple:
        if self.levels is not None:
            return (self.levels.step,)
        return tuple(self.scale * s for s in self.signs)

    def dense(self) -> np.ndarray:
        out = np.full(self.shape, self.offset)
        for coef, plane in zip(self.coefs, self.bits):
            out += coef * plane
        return out

    def row(self, k: int):
        if self.levels is not None:
            return BinaryWeightVector.from_mask(self.bits[0, k], self.levels)
        comps = tuple(BinaryWeightVector.from_mask(p[k], UNIT_LEVELS) for p in self.bits)
        return MultiComponentWeight(comps, self.signs, self.scale)

    def copy(self) -> "QuantizedMatrix":
        return QuantizedMatrix(self.bits.copy(), self.levels, self.signs, self.scale)


# -- layers -------------------------------------------------------------------

@dataclass(eq=False)
class LayerSpec:
    kind: str                        # "dense" or "conv"
    weights: QuantizedMatrix         # (units, fan_in)
    in_shape: tuple                  # (fan_in,) for dense, (C, H, W) for conv
    kernel: int = 1
    pool: int = 1
    bias: np.ndarray = None

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ArchitectureError(f"unknown layer kind {self.kind!r}")
        units, fan_in = self.weights.shape
        if self.kind == "dense":
            if fan_in != math.prod(self.in_shape):
                raise ArchitectureError("dense fan-in does not match input size")
        else:
            C, H, W = self.in_shape
            if fan_in != C * self.kernel ** 2:
                raise ArchitectureError("conv fan-in must be C * k^2")
            ho, wo = H - self.kernel + 1, W - self.kernel + 1
            if ho < 1 or wo < 1 or ho % self.pool or wo % self.pool:
                raise ArchitectureError(
                    f"{H}x{W} input, kernel {self.kernel}, pool {self.pool} do not fit")
        if self.bias is None:
            self.bias = np.zeros(units)

    @property
    def units(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def conv_hw(self) -> tuple:
        if self.kind == "dense":
            return (1, 1)
        _, H, W = self.in_shape
        return (H - self.kernel + 1, W - self.kernel + 1)

    @property
    def positions(self) -> int:
        ho, wo = self.conv_hw
        return ho * wo

    @property
    def out_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.units,)
        ho, wo = self.conv_hw
        return (self.units, ho // self.pool, wo // self.pool)

    @property
    def out_size(self) -> int:
        return math.prod(self.out_shape)


@dataclass(eq=False)
class NetworkModel:
    layers: list
    a: np.ndarray
    b: float = 0.0
    name: str = ""

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        if not self.layers:
            raise ArchitectureError("need at least one quantized layer")
        for lower, upper in zip(self.layers, self.layers[1:]):
            if lower.out_size != math.prod(upper.in_shape):
                raise ArchitectureError("consecutive layer shapes do not match")
        if self.a.shape != (self.layers[-1].out_size,):
            raise ArchitectureError("output weights do not match last layer size")

    @property
    def depth(self) -> int:
        """Number of weight layers, counting the real-valued output layer."""
        return len(self.layers) + 1

    @property
    def in_dim(self) -> int:
        return math.prod(self.layers[0].in_shape)

    def copy(self) -> "NetworkModel":
        layers = [LayerSpec(l.kind, l.weights.copy(), l.in_shape, l.kernel, l.pool, l.bias.copy())
                  for l in self.layers]
        return NetworkModel(layers, self.a.copy(), self.b, self.name)


# -- primitive ops --------------------------------------------------------------

def im2col(images, kernel: int) -> np.ndarray:
    """(n, C, H, W) or (C, H, W) -> (n, P, C*k*k) patch matrix, P = Ho*Wo in
    row-major order."""
    images = np.asarray(images, dtype=float)
    single = images.ndim == 3
    if single:
        images = images[None]
    n, C, H, W = images.shape
    if kernel < 1 or kernel > H or kernel > W:
        raise ArchitectureError(f"kernel {kernel} incompatible with {H}x{W} input")
    win = sliding_window_view(images, (kernel, kernel), axis=(2, 3))  # n C Ho Wo k k
    ho, wo = win.shape[2], win.shape[3]
    patches = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, C * kernel * kernel)
    return patches[0] if single else patches


def _col2im(gpatch, in_shape, kernel):
    """Adjoint of :func:`im2col` for a batch: (n, P, C*k*k) -> (n, C, H, W)."""
    C, H, W = in_shape
    ho, wo = H - kernel + 1, W - kernel + 1
    n = gpatch.shape[0]
    g = gpatch.reshape(n, ho, wo, C, kernel, kernel)
    out = np.zeros((n, C, H, W))
    for di in range(kernel):
        for dj in range(kernel):
            out[:, :, di:di + ho, dj:dj + wo] += g[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out


def _pool(x, p):
    if p == 1:
        return x
    n, F, H, W = x.shape
    return x.reshape(n, F, H // p, p, W // p, p).mean(axis=(3, 5))


def _unpool(g, p):
    if p == 1:
        return g
    return np.repeat(np.repeat(g, p, axis=2), p, axis=3) / (p * p)


def relu(x):
    return np.maximum(x, 0.0)


def _layer_pre(layer: LayerSpec, W, y):
    """Pre-activations for a batch of layer inputs ``y`` (n, *in_shape),
    shaped (n, P, units)."""
    n = y.shape[0]
    if layer.kind == "dense":
        return (y.reshape(n, -1) @ W.T + layer.bias)[:, None, :]
    out = np.empty((n, layer.positions, layer.units))
    for s in range(0, n, _CHUNK):
        out[s:s + _CHUNK] = im2col(y[s:s + _CHUNK], layer.kernel) @ W.T + layer.bias
    return out


def _post_to_out(layer: LayerSpec, act):
    """(n, P, units) post-ReLU activations -> next layer input (n, *out_shape)."""
    n = act.shape[0]
    if layer.kind == "dense":
        return act[:, 0, :]
    ho, wo = layer.conv_hw
    maps = act.transpose(0, 2, 1).reshape(n, layer.units, ho, wo)
    return _pool(maps, layer.pool)


def _out_grad_to_post(layer: LayerSpec, g):
    """Gradient wrt next-layer input -> gradient wrt (n, P, units) post-ReLU."""
    n = g.shape[0]
    if layer.kind == "dense":
        return g.reshape(n, 1, layer.units)
    g = _unpool(g.reshape((n,) + layer.out_shape), layer.pool)
    return g.reshape(n, layer.units, -1).transpose(0, 2, 1)


def _pre_grad_to_input(layer: LayerSpec, W, gpre):
    if layer.kind == "dense":
        return gpre[:, 0, :] @ W
    return _col2im(gpre @ W, layer.in_shape, layer.kernel)


@dataclass
class ForwardCache:
    inputs: list        # per layer: (n, *in_shape)
    pre: list           # per layer: (n, P, units)
    output: np.ndarray  # (n,)


def _as_batch(model, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None]
    X = X.reshape(X.shape[0], -1)
    if X.shape[1] != model.in_dim:
        raise ArchitectureError(f"input dimension {X.shape[1]} != {model.in_dim}")
    return X


def forward_batch(model: NetworkModel, X) -> ForwardCache:
    X = _as_batch(model, X)
    y = X.reshape((X.shape[0],) + tuple(model.layers[0].in_shape))
    inputs, pres = [], []
    for layer in model.layers:
        y = y.reshape((y.shape[0],) + tuple(layer.in_shape))
        inputs.append(y)
        pre = _layer_pre(layer, layer.weights.dense(), y)
        pres.append(pre)
        y = _post_to_out(layer, relu(pre))
    out = y.reshape(y.shape[0], -1) @ model.a + model.b
    return ForwardCache(inputs, pres, out)


def predict(model: NetworkModel, X) -> np.ndarray:
    return forward_batch(model, X).output


def forward(model: NetworkModel, x):
    """Single-sample forward pass: returns f(x) and the activations
    [y_0 = x, y_1, ..., y_{L-1}] (flattened), y_{L-1} feeding the output layer."""
    cache = forward_batch(model, x)
    acts = [inp[0].reshape(-1) for inp in cache.inputs]
    last = model.layers[-1]
    acts.append(_post_to_out(last, relu(cache.pre[-1]))[0].reshape(-1))
    return float(cache.output[0]), acts


def _backward_to(model, cache, l, denses):
    """Gradient of the output wrt the post-ReLU activations of layer ``l``,
    shaped (n, P, units)."""
    n = cache.output.shape[0]
    g = np.broadcast_to(model.a, (n, model.a.size)).copy()
    for m in range(len(model.layers) - 1, l, -1):
        layer = model.layers[m]
        gpost = _out_grad_to_post(layer, g)
        gpre = gpost * (cache.pre[m] > 0)
        g = _pre_grad_to_input(layer, denses[m], gpre).reshape(n, -1)
    return _out_grad_to_post(model.layers[l], g)


def grad_wrt_activation(model: NetworkModel, x, l: int) -> np.ndarray:
    """d f / d y_{l+1} at x, where y_{l+1} are the post-ReLU (pre-pooling)
    activations of quantized layer ``l``; ReLU'(0) is taken as 0.  Returned
    flattened in (position, unit) order, i.e. unit-fastest."""
    if not 0 <= l < len(model.layers):
        raise IndexError(f"layer {l} out of range")
    cache = forward_batch(model, x)
    denses = [layer.weights.dense() for layer in model.layers]
    return _backward_to(model, cache, l, denses)[0].reshape(-1)


def linearize(model: NetworkModel, x, l: int) -> tuple[np.ndarray, float]:
    """(ahat, bhat) with f(x) = ahat . relu(W_l y_l + b_l) + bhat exactly at x."""
    cache = forward_batch(model, x)
    denses = [layer.weights.dense() for layer in model.layers]
    ahat = _backward_to(model, cache, l, denses)[0]
    bhat = float(cache.output[0] - np.sum(ahat * relu(cache.pre[l][0])))
    return ahat.reshape(-1), bhat


def linearized_output(model: NetworkModel, x, l: int, ahat, bhat) -> float:
    """Evaluate ahat . relu(W_l y_l + b_l) + bhat with y_l computed from x by
    the current lower layers."""
    cache = forward_batch(model, x)
    return float(np.sum(np.asarray(ahat).reshape(-1) * relu(cache.pre[l][0]).reshape(-1)) + bhat)


# -- batched linearization for training ---------------------------------------------

class LayerLinearization:
    """Everything the per-unit oracles of one layer need, for a batch.

    ``pre`` (n, P, units) pre-activations, ``ahat`` the matching output
    gradients, ``bhat`` (n,) offsets so that the linearized output equals the
    true output at the anchor, and ``total`` the running linearized output.
    """

    def __init__(self, model: NetworkModel, X, l: int):
        from .oracle import DenseColumns, PatchColumns

        self.model = model
        self.layer_index = l
        self.layer = model.layers[l]
        cache = forward_batch(model, X)
        denses = [layer.weights.dense() for layer in model.layers]
        self.output = cache.output
        self.pre = cache.pre[l].copy()
        self.ahat = _backward_to(model, cache, l, denses)
        self.bhat = self.output - np.einsum("npu,npu->n", self.ahat, relu(self.pre))
        self.total = self.output.copy()
        inp = cache.inputs[l]
        if self.layer.kind == "dense":
            self.cols = DenseColumns(inp.reshape(inp.shape[0], -1))
        else:
            self.cols = PatchColumns(inp, self.layer.kernel)
        self._ones_matvec = None

    @property
    def units(self) -> int:
        return self.layer.units

    @property
    def positions(self) -> int:
        return self.pre.shape[1]

    def unit_contribution(self, k: int, pre_k=None) -> np.ndarray:
        pre_k = self.pre[:, :, k] if pre_k is None else pre_k.reshape(self.pre.shape[:2])
        return np.sum(self.ahat[:, :, k] * relu(pre_k), axis=1)

    def rest(self, k: int) -> np.ndarray:
        return self.total - self.unit_contribution(k)

    def component_base(self, k: int, j: int) -> tuple[float, float, np.ndarray]:
        """(low, step, base) describing unit k's pre-activations as a function
        of its j-th bit plane with the other planes fixed."""
        wm = self.layer.weights
        coefs = wm.coefs
        base = np.full(self.cols.n_rows, float(self.layer.bias[k]))
        if wm.levels is not None:
            return wm.levels.alpha, wm.levels.step, base
        for m, coef in enumerate(coefs):
            if m != j and wm.bits[m, k].any():
                base = base + coef * self.cols.matvec(wm.bits[m, k].astype(float))
        return 0.0, coefs[j], base

    def oracle(self, k: int, y, variant: str = "no_relu", component: int = 0, mask=None):
        from .oracle import NeuronOracle

        low, step, base = self.component_base(k, component)
        if mask is None:
            mask = self.layer.weights.bits[component, k]
        return NeuronOracle(self.cols, y, self.ahat[:, :, k], self.rest(k), variant,
                            mask=mask, low=low, step=step, base=base)

    def commit(self, k: int, pre_k) -> None:
        """Record new pre-activations for unit k (after its row changed)."""
        pre_k = np.asarray(pre_k).reshape(self.pre.shape[:2])
        self.total = self.total - self.unit_contribution(k) + self.unit_contribution(k, pre_k)
        self.pre[:, :, k] = pre_k


def layer_linearization(model: NetworkModel, X, l: int) -> LayerLinearization:
    if not 0 <= l < len(model.layers):
        raise IndexError(f"layer {l} out of range")
    return LayerLinearization(model, _as_batch(model, X), l)


# -- architectures ---------------------------------------------------------------

def _layer_levels(fan_in: int) -> QuantLevels:
    return QuantLevels.he(fan_in)


def _quantized(rows, fan_in, bits, rng):
    if bits == 1:
        return QuantizedMatrix.binary(rows, fan_in, _layer_levels(fan_in), rng)
    return QuantizedMatrix.multibit(rows, fan_in, bits, math.sqrt(2.0 / fan_in), rng)


def build_model(config: dict, in_shape, bits: int = 1, seed: int = 0) -> NetworkModel:
    """Build a network from a declarative layer list, e.g.::

        {"name": "fc2", "layers": [{"kind": "dense", "units": 100}]}
        {"layers": [{"kind": "conv", "filters": 6, "kernel": 5, "pool": 2}, ...]}

    Weight bits are drawn from ``seed``; levels are +-sqrt(2 / fan_in) and
    the output layer is drawn from N(0, 1 / fan_in).
    """
    rng = np.random.default_rng(seed)
    shape = tuple(in_shape)
    layers = []
    for spec in config["layers"]:
        kind = spec["kind"]
        if kind == "dense":
            fan_in = math.prod(shape)
            layer = LayerSpec("dense", _quantized(spec["units"], fan_in, bits, rng), (fan_in,))
        elif kind == "conv":
            if len(shape) != 3:
                raise ArchitectureError("conv layer needs a (C, H, W) input")
            k = spec["kernel"]
            fan_in = shape[0] * k * k
            layer = LayerSpec("conv", _quantized(spec["filters"], fan_in, bits, rng), shape,
                              kernel=k, pool=spec.get("pool", 1))
        else:
            raise ArchitectureError(f"unknown layer kind {kind!r}")
        layers.append(layer)
        shape = layer.out_shape
    width = math.prod(shape)
    a = rng.normal(0.0, 1.0 / math.sqrt(width), size=width)
    return NetworkModel(layers, a, 0.0, config.get("name", ""))


# Stand-in topologies.  "cnn6" is six weight layers (4 conv + 2 dense); the
# original CNN6-d topology is not reproduced.
ARCHITECTURES = {
    "fc2": {"name": "fc2", "layers": [{"kind": "dense", "units": 100}]},
    "fc3": {"name": "fc3", "layers": [{"kind": "dense", "units": 256},
                                      {"kind": "dense", "units": 100}]},
    "lenet5": {"name": "lenet5", "layers": [
        {"kind": "conv", "filters": 6, "kernel": 5, "pool": 2},
        {"kind": "conv", "filters": 16, "kernel": 5, "pool": 2},
        {"kind": "dense", "units": 120},
        {"kind": "dense", "units": 84}]},
    "cnn6": {"name": "cnn6", "layers": [
        {"kind": "conv", "filters": 8, "kernel": 3},
        {"kind": "conv", "filters": 8, "kernel": 3, "pool": 2},
        {"kind": "conv", "filters": 16, "kernel": 3},
        {"kind": "conv", "filters": 16, "kernel": 3, "pool": 2},
        {"kind": "dense", "units": 32}]},
}


def architecture(name_or_config) -> dict:
    if isinstance(name_or_config, dict):
        return name_or_config
    key = str(name_or_config).lower()
    if key in ARCHITECTURES:
        return ARCHITECTURES[key]
    try:
        with open(name_or_config) as f:
            return json.load(f)
    except (OSError, ValueError):
        raise ArchitectureError(
            f"unknown architecture {name_or_config!r}; choose from {sorted(ARCHITECTURES)} "
            "or pass a JSON file") from None


def model_manifest(model: NetworkModel) -> dict:
    return {
        "name": model.name,
        "b": model.b,
        "a": model.a.tolist(),
        "layers": [{
            "kind": l.kind, "in_shape": list(l.in_shape), "kernel": l.kernel, "pool": l.pool,
            "units": l.units, "fan_in": l.fan_in, "components": l.weights.n_components,
        } for l in model.layers],
    }



def save_model(directory, model: NetworkModel) -> None:
    """Checkpoint as a directory: ``manifest.json`` (shapes, output weights,
    biases) plus one weight file per quantized layer holding the row-major
    flattened matrix in the :mod:`lowbit.quantcore` format."""
    from .quantcore import save

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = model_manifest(model)
    for i, l in enumerate(model.layers):
        wm = l.weights
        flat = wm.bits.reshape(wm.n_components, -1)
        if wm.levels is not None:
            w = BinaryWeightVector.from_mask(flat[0], wm.levels)
        else:
            comps = tuple(BinaryWeightVector.from_mask(p, UNIT_LEVELS) for p in flat)
            w = MultiComponentWeight(comps, wm.signs, wm.scale)
        save(directory / f"layer{i}.lbw", w)
        header["layers"][i]["bias"] = l.bias.tolist()
        header["layers"][i]["file"] = f"layer{i}.lbw"
    (directory / "manifest.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_model(directory) -> NetworkModel:
    from .quantcore import load

    directory = Path(directory)
    header = json.loads((directory / "manifest.json").read_text())
    layers = []
    for h in header["layers"]:
        w = load(directory / h["file"])
        shape = (h["units"], h["fan_in"])
        if isinstance(w, BinaryWeightVector):
            wm = QuantizedMatrix(w.mask.reshape((1,) + shape), levels=w.levels)
        else:
            bits = np.stack([c.mask.reshape(shape) for c in w.components])
            wm = QuantizedMatrix(bits, None, w.signs, w.scale)
        layers.append(LayerSpec(h["kind"], wm, tuple(h["in_shape"]), h["kernel"], h["pool"],
                                np.array(h["bias"], dtype=float)))
    return NetworkModel(layers, np.array(header["a"], dtype=float), header["b"], header["name"])
