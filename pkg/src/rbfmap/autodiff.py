"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations executed inside an active :class:`Tape` context record a
:class:`TapeNode` whenever at least one operand requires a gradient.
``Tape.backward`` replays the nodes in reverse order.  Outside a tape the
same functions are plain forward computations, which is what gradient-free
code paths (SPSA, evaluation) rely on.

Layout is channel-last throughout: images are ``(N, H, W, C)`` and conv
kernels ``(kh, kw, Cin, Cout)``.
"""
from __future__ import annotations

import contextvars
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "rbfmap_active_tape", default=None
)

_backward_lock = threading.Lock()
_backward_total = 0


def backward_call_count() -> int:
    """Number of ``Tape.backward`` sweeps executed in this process."""
    return _backward_total


class Tensor:
    """A float64 array that may take part in a recorded computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named learnable tensor.

    The gradient buffer always exists; it simply stays at zero while the
    parameter is frozen (``trainable=False``).  ``lower`` is an optional
    elementwise bound that optimizers project onto after each step.
    """

    def __init__(self, name: str, value, trainable: bool = True, lower: float | None = None):
        super().__init__(np.array(value, dtype=DTYPE), requires_grad=trainable)
        self.name = name
        self.lower = lower
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Tensor
    # backward(grad_output, needs) -> one gradient (or None) per input
    backward: Callable[[np.ndarray, tuple], tuple]
    kink_margin: float = math.inf


@dataclass
class Tape:
    """Records differentiable operations for one reverse sweep."""

    nodes: list = field(default_factory=list)
    track_kinks: bool = False
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    @property
    def kink_margin(self) -> float:
        """Smallest distance of any relu/maxpool input to a non-differentiable point."""
        return min((n.kink_margin for n in self.nodes), default=math.inf)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf.

        With ``wrt`` given, only those leaves receive gradients and branches
        that cannot reach them are skipped.  The tape is cleared afterwards.
        """
        global _backward_total
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ContractError("backward called on an empty tape")
        with _backward_lock:
            _backward_total += 1

        produced = {id(n.output) for n in self.nodes}
        if wrt is None:
            needed = None
        else:
            targets = {id(t) for t in wrt}
            needed = set(targets)
            for node in self.nodes:
                if any(id(t) in needed for t in node.inputs):
                    needed.add(id(node.output))

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            needs = tuple(
                t.requires_grad and (needed is None or id(t) in needed)
                for t in node.inputs
            )
            if not any(needs):
                continue
            in_grads = node.backward(g, needs)
            for t, need, gi in zip(node.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                if id(t) in produced:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi
        self.nodes.clear()


def current_tape() -> Tape | None:
    return _active_tape.get()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward, kink=None) -> Tensor:
    tape = _active_tape.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=False)
    if needs_grad:
        result.requires_grad = True
        margin = kink() if (kink is not None and tape.track_kinks) else math.inf
        tape.record(TapeNode(op, tuple(inputs), result, backward, margin))
    return result


# ---------------------------------------------------------------------------
# elementwise and reshaping
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def kink():
        return float(np.min(np.abs(x.data))) if x.data.size else math.inf

    def backward(g, needs):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.data, 0.0), backward, kink)


def flatten(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def backward(g, needs):
        return (g.reshape(shape),)

    return _emit("flatten", (x,), x.data.reshape(shape[0], -1), backward)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward(g, needs):
        return (np.full_like(x.data, float(g)),)

    return _emit("sum", (x,), np.asarray(x.data.sum()), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g, needs):
        return (g * b.data if needs[0] else None, g * a.data if needs[1] else None)

    return _emit("mul", (a, b), a.data * b.data, backward)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)

    def backward(g, needs):
        return (g * c,)

    return _emit("scale", (x,), x.data * c, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (channel) axis, ``a`` first."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim:
        raise DimensionError(f"concat_channels: rank {a.ndim} vs {b.ndim}")
    for axis, (da, db) in enumerate(zip(a.shape[:-1], b.shape[:-1])):
        if da != db:
            raise DimensionError(
                f"concat_channels: axis {axis} differs ({da} vs {db})"
            )
    ca = a.shape[-1]

    def backward(g, needs):
        return (g[..., :ca], g[..., ca:])

    return _emit("concat", (a, b), np.concatenate([a.data, b.data], axis=-1), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    x, weights, bias = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    if x.ndim != 2 or weights.ndim != 2:
        raise DimensionError(f"dense: expected 2-D input and weights, got {x.shape}, {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise DimensionError(
            f"dense: input axis 1 has {x.shape[1]} features, weights axis 0 has {weights.shape[0]}"
        )
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense: bias shape {bias.shape}, expected ({weights.shape[1]},)")

    def backward(g, needs):
        return (
            g @ weights.data.T if needs[0] else None,
            x.data.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return _emit("dense", (x, weights, bias), x.data @ weights.data + bias.data, backward)


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """2-D cross-correlation plus bias.

    ``padding`` is ``"valid"`` (no padding) or ``"same"`` (zero padding so the
    output spatial size is ``ceil(H / stride)``).
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be (N,H,W,C), got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be (kh,kw,Cin,Cout), got shape {kernel.shape}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {cin}, kernel expects {kcin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ContractError(f"conv2d: unknown padding {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp:
        raise DimensionError(f"conv2d: kernel height {kh} exceeds padded height {hp}")
    if kw > wp:
        raise DimensionError(f"conv2d: kernel width {kw} exceeds padded width {wp}")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    rows = n * ho * wo

    cols = np.concatenate(
        [xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for i in range(kh) for j in range(kw)],
        axis=-1,
    ).reshape(rows, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat + bias.data).reshape(n, ho, wo, cout)

    def backward(g, needs):
        g2 = g.reshape(rows, cout)
        dx = dk = db = None
        if needs[0]:
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh * kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i * kw + j]
            dx = dxp[:, pt:pt + h, pl:pl + w, :]
        if needs[1]:
            dk = (cols.T @ g2).reshape(kernel.shape)
        if needs[2]:
            db = g2.sum(axis=0)
        return dx, dk, db

    return _emit("conv2d", (x, kernel, bias), out, backward)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max over ``window x window`` patches; ties go to the first element in row-major order."""
    x = _as_tensor(x)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: input must be (N,H,W,C), got shape {x.shape}")
    n, h, w, c = x.shape
    if window > h or window > w:
        raise DimensionError(f"maxpool2d: window {window} larger than input {h}x{w}")
    if window < 1 or stride < 1:
        raise ContractError("maxpool2d: window and stride must be >= 1")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    offsets = [(i, j) for i in range(window) for j in range(window)]
    cand = np.stack(
        [x.data[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for i, j in offsets],
        axis=-1,
    )
    arg = cand.argmax(axis=-1)
    out = np.take_along_axis(cand, arg[..., None], axis=-1)[..., 0]

    def kink():
        if len(offsets) == 1:
            return math.inf
        top2 = np.partition(cand, -2, axis=-1)[..., -2:]
        gap = top2[..., 1] - top2[..., 0]
        # ties between exact zeros come from relu dead zones, which are locally flat
        gap = gap[top2[..., 1] != 0.0]
        return float(gap.min()) if gap.size else math.inf

    def backward(g, needs):
        dx = np.zeros_like(x.data)
        for k, (i, j) in enumerate(offsets):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += np.where(arg == k, g, 0.0)
        return (dx,)

    return _emit("maxpool2d", (x,), out, backward, kink)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    # log1p over the non-max terms keeps tiny losses such as log1p(e^-50)
    top = logits.argmax(axis=1)
    shifted = logits - logits[np.arange(len(logits)), top][:, None]
    e = np.exp(shifted)
    e[np.arange(len(logits)), top] = 0.0
    return shifted - np.log1p(e.sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_targets(targets, n: int, q: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape}, expected ({n},)")
    if q < 2:
        raise ContractError(f"need at least 2 classes, got {q}")
    if targets.size and (targets.min() < 0 or targets.max() >= q):
        raise IndexError(f"target class out of range [0, {q})")
    return targets.astype(np.intp)


def cross_entropy_per_sample(logits: np.ndarray, targets) -> np.ndarray:
    """Untaped per-row cross-entropy, used by gradient-free code."""
    targets = _check_targets(targets, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(len(targets)), targets]


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N,Q), got {logits.shape}")
    n, q = logits.shape
    targets = _check_targets(targets, n, q)
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), targets].mean()

    def backward(g, needs):
        grad = np.exp(logp)
        grad[np.arange(n), targets] -= 1.0
        return (grad * (float(g) / n),)

    return _emit("softmax_ce", (logits,), np.asarray(loss), backward)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def grad_check(
    build_loss: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``build_loss`` recomputes a scalar loss from the current values of
    ``tensors`` (all of which must require gradients).  With ``max_coords``
    set, each tensor is probed at that many randomly chosen coordinates.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in tensors:
        t.data = np.ascontiguousarray(t.data)
        t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss, wrt=tensors)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            up = float(build_loss().data)
            flat[idx] = orig - step
            down = float(build_loss().data)
            flat[idx] = orig
            fd = (up - down) / (2 * step)
            a = analytic.reshape(-1)[idx]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


def kink_margin(build_loss: Callable[[], Tensor], tensors: Sequence[Tensor] = ()) -> float:
    """Distance of the current probe to the nearest relu/maxpool kink."""
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
    try:
        with Tape(track_kinks=True) as tape:
            build_loss()
        return tape.kink_margin
    finally:
        for t, f in zip(tensors, flags):
            t.requires_grad = f
