"""Declarative CNN assembly for the baseline (ORIG) and RBF-equipped (PROP) networks."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .errors import ConfigError, DimensionError
from .rbf import RbfBlockConfig, RbfBlockParams, init_rbf_params, rbf_layer_output

LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "dense", "rbf-map")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0  # conv channels, dense units or RBF center count
    kernel: int = 3
    stride: int = 1
    padding: str = "valid"
    window: int = 2
    learn_A: bool = True
    learn_beta: bool = True
    tap: bool = False  # expose this layer's output as a feature tap

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")


@dataclass
class Model:
    """A layer list bound to its parameters.

    Parameters are created in layer order from ``seed`` so two builds with the
    same arguments are identical.
    """

    spec: tuple
    input_shape: tuple
    seed: int = 0
    name: str = "model"
    params: dict = field(default_factory=dict, init=False)
    rbf_blocks: list = field(default_factory=list, init=False)
    tap_layers: list = field(default_factory=list, init=False)
    _bound: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        self.spec = tuple(self.spec)
        self.input_shape = tuple(self.input_shape)
        rng = np.random.default_rng(self.seed)
        shape = self.input_shape  # (H, W, C) or (D,)
        counters: dict = {}
        for index, layer in enumerate(self.spec):
            counters[layer.kind] = counters.get(layer.kind, 0) + 1
            tag = f"{layer.kind.replace('-', '')}{counters[layer.kind]}"
            shape, bound = self._bind(layer, shape, rng, tag)
            self._bound.append(bound)
            if layer.tap:
                self.tap_layers.append(index)
        self.output_shape = shape

    def _add(self, p: Parameter) -> Parameter:
        if p.name in self.params:
            raise ConfigError(f"duplicate parameter name {p.name}")
        self.params[p.name] = p
        return p

    def _bind(self, layer: LayerSpec, shape, rng, tag):
        kind = layer.kind
        if kind == "conv":
            if len(shape) != 3:
                raise DimensionError(f"{tag}: conv needs an (H,W,C) input, got {shape}")
            h, w, c = shape
            k = layer.kernel
            std = np.sqrt(2.0 / (k * k * c))
            kern = self._add(Parameter(f"{tag}.kernel", rng.normal(0.0, std, (k, k, c, layer.out))))
            bias = self._add(Parameter(f"{tag}.bias", np.zeros(layer.out)))
            if layer.padding == "same":
                ho, wo = -(-h // layer.stride), -(-w // layer.stride)
            else:
                if k > h or k > w:
                    raise DimensionError(f"{tag}: kernel {k} larger than input {h}x{w}")
                ho, wo = (h - k) // layer.stride + 1, (w - k) // layer.stride + 1
            return (ho, wo, layer.out), (kern, bias)
        if kind == "relu":
            return shape, ()
        if kind == "maxpool":
            h, w, c = shape
            if layer.window > h or layer.window > w:
                raise DimensionError(f"{tag}: window {layer.window} larger than {h}x{w}")
            s = layer.window
            return ((h - layer.window) // s + 1, (w - layer.window) // s + 1, c), ()
        if kind == "flatten":
            return (int(np.prod(shape)),), ()
        if kind == "dense":
            if len(shape) != 1:
                raise DimensionError(f"{tag}: dense needs a flat input, got {shape}")
            d = shape[0]
            limit = np.sqrt(6.0 / (d + layer.out))
            wts = self._add(Parameter(f"{tag}.weights", rng.uniform(-limit, limit, (d, layer.out))))
            bias = self._add(Parameter(f"{tag}.bias", np.zeros(layer.out)))
            return (layer.out,), (wts, bias)
        if kind == "rbf-map":
            if len(shape) != 3:
                raise DimensionError(f"{tag}: rbf-map needs an (H,W,C) input, got {shape}")
            cfg = RbfBlockConfig(K=shape[2], P=layer.out, learn_A=layer.learn_A, learn_beta=layer.learn_beta)
            block = init_rbf_params(cfg, rng, prefix=tag)
            for p in block.parameters():
                self._add(p)
            self.rbf_blocks.append(block)
            return (shape[0], shape[1], shape[2] + layer.out), (block,)
        raise ConfigError(f"unknown layer kind {kind!r}")

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    @property
    def num_classes(self) -> int:
        return self.output_shape[0]

    # -- evaluation ---------------------------------------------------------

    def _check_batch(self, x: np.ndarray) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"{self.name}: batch has per-sample shape {tuple(x.shape[1:])}, expected {self.input_shape}"
            )

    def forward(self, x: Tensor, taps: bool = False):
        """Run the layer list on ``x``; records onto the active tape if any."""
        self._check_batch(x.data)
        tapped = []
        for index, (layer, bound) in enumerate(zip(self.spec, self._bound)):
            kind = layer.kind
            if kind == "conv":
                x = ad.conv2d(x, bound[0], bound[1], layer.stride, layer.padding)
            elif kind == "relu":
                x = ad.relu(x)
            elif kind == "maxpool":
                x = ad.maxpool2d(x, layer.window, layer.window)
            elif kind == "flatten":
                x = ad.flatten(x)
            elif kind == "dense":
                x = ad.dense(x, bound[0], bound[1])
            else:
                x = rbf_layer_output(x, bound[0])
            if taps and index in self.tap_layers:
                tapped.append(x)
        return (x, tapped) if taps else x

    def logits(self, batch: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Untaped forward pass in chunks."""
        batch = np.asarray(batch, dtype=np.float64)
        self._check_batch(batch)
        out = [self.forward(Tensor(batch[i:i + batch_size])).data for i in range(0, len(batch), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.logits(batch).argmax(axis=1)

    def loss_per_sample(self, batch: np.ndarray, targets, batch_size: int = 500) -> np.ndarray:
        return ad.cross_entropy_per_sample(self.logits(batch, batch_size), targets)

    def input_gradient(self, batch: np.ndarray, targets, batch_size: int = 250) -> np.ndarray:
        """Gradient of the batch-mean cross-entropy, computed in chunks."""
        batch = np.asarray(batch, dtype=np.float64)
        targets = np.asarray(targets)
        n = len(batch)
        out = np.empty_like(batch)
        for i in range(0, n, batch_size):
            chunk = slice(i, i + batch_size)
            m = len(batch[chunk])
            out[chunk] = input_gradient(self, batch[chunk], targets[chunk]) * (m / n)
        return out


def _block_layers(channels: Sequence[int], pools: Sequence[bool], padding: str = "valid") -> list[list[LayerSpec]]:
    blocks = []
    for c, pool in zip(channels, pools):
        block = [LayerSpec("conv", out=c, kernel=3, padding=padding), LayerSpec("relu")]
        if pool:
            block.append(LayerSpec("maxpool", window=2))
        blocks.append(block)
    return blocks


def _with_tap(layer: LayerSpec) -> LayerSpec:
    return LayerSpec(**{**layer.__dict__, "tap": True})


ORIG_CHANNELS = (32, 64, 64)
ORIG_POOLS = (True, True, False)


def orig_spec(num_classes: int, channels: Sequence[int] = ORIG_CHANNELS, padding: str = "valid") -> list[LayerSpec]:
    """Reference layer list; ``channels``/``padding`` only shrink it for toy-sized checks."""
    spec: list[LayerSpec] = []
    for block in _block_layers(channels, ORIG_POOLS, padding):
        block[-1] = _with_tap(block[-1])
        spec.extend(block)
    spec += [LayerSpec("flatten"), LayerSpec("dense", out=num_classes)]
    return spec


def prop_spec(
    num_classes: int,
    P_per_block: Sequence[int] = (8, 8, 8),
    learn_A: bool = True,
    learn_beta: bool = True,
    last_only: bool = False,
    channels: Sequence[int] = ORIG_CHANNELS,
    padding: str = "valid",
) -> list[LayerSpec]:
    if len(P_per_block) != len(ORIG_CHANNELS):
        raise ConfigError(f"P_per_block needs {len(ORIG_CHANNELS)} entries, got {len(P_per_block)}")
    if any(int(p) < 1 for p in P_per_block):
        raise ConfigError(f"every P must be >= 1, got {list(P_per_block)}")
    spec: list[LayerSpec] = []
    blocks = _block_layers(channels, ORIG_POOLS, padding)
    for i, (block, P) in enumerate(zip(blocks, P_per_block)):
        spec.extend(block)
        if last_only and i < len(blocks) - 1:
            spec[-1] = _with_tap(spec[-1])
            continue
        spec.append(LayerSpec("rbf-map", out=int(P), learn_A=learn_A, learn_beta=learn_beta, tap=True))
    spec += [LayerSpec("flatten"), LayerSpec("dense", out=num_classes)]
    return spec


def build_orig(num_classes: int = 10, input_shape=(28, 28, 1), seed: int = 0) -> Model:
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    return Model(orig_spec(num_classes), input_shape, seed, name="orig")


def build_prop(
    num_classes: int = 10,
    P_per_block: Sequence[int] = (8, 8, 8),
    learn_A: bool = True,
    learn_beta: bool = True,
    last_only: bool = False,
    input_shape=(28, 28, 1),
    seed: int = 0,
) -> Model:
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    spec = prop_spec(num_classes, P_per_block, learn_A, learn_beta, last_only)
    return Model(spec, input_shape, seed, name="prop")


def forward_logits(model: Model, batch: np.ndarray) -> np.ndarray:
    return model.logits(batch)


def feature_tap(model: Model, batch: np.ndarray, layer_index: int) -> np.ndarray:
    """Per-sample flattened output of the ``layer_index``-th tapped layer (negative indices allowed)."""
    n_taps = len(model.tap_layers)
    if not -n_taps <= layer_index < n_taps:
        raise IndexError(f"tap index {layer_index} out of range for {n_taps} taps")
    batch = np.asarray(batch, dtype=np.float64)
    chunks = []
    for i in range(0, len(batch), 500):
        _, taps = model.forward(Tensor(batch[i:i + 500]), taps=True)
        chunks.append(taps[layer_index].data.reshape(len(taps[layer_index].data), -1))
    return np.concatenate(chunks)


def input_gradient(model: Model, batch: np.ndarray, targets) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input pixels."""
    x = Tensor(np.array(batch, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        loss = ad.softmax_cross_entropy(model.forward(x), targets)
    if tape.nodes:
        tape.backward(loss, wrt=[x])
    return x.grad
