"""Dense NHWC tensors with reverse-mode automatic differentiation.

Only the operators FragNet needs are provided. Every operator is a
:class:`Function` subclass; calling ``Function.apply`` runs the forward pass
on raw numpy arrays and, if any input tracks gradients, records an
:class:`OpNode` on the output so :meth:`Tensor.backward` can walk the graph.
"""

from __future__ import annotations

import contextlib
from typing import Any, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "OpNode",
    "ShapeError",
    "BoundsError",
    "NumericError",
    "get_dtype",
    "set_precision",
    "precision",
    "add",
    "scale",
    "tensor_sum",
    "conv2d",
    "maxpool2x2",
    "batchnorm",
    "relu",
    "concat_channels",
    "crop",
    "crop_stack",
    "global_avg_pool",
    "linear",
    "softmax_cross_entropy",
    "BN_EPS",
    "BN_MOMENTUM",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_DTYPE = np.dtype(np.float32)


class ShapeError(ValueError):
    pass


class BoundsError(IndexError):
    pass


class NumericError(FloatingPointError):
    pass


def get_dtype() -> np.dtype:
    return _DTYPE


def set_precision(name: str) -> None:
    """Switch the default float type for new tensors ("float32" or "float64")."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported precision {name!r}")
    _DTYPE = np.dtype(name)


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = _DTYPE.name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


class OpNode:
    """Record of one operator application inside the autodiff graph."""

    __slots__ = ("fn", "inputs")

    def __init__(self, fn: "Function", inputs: tuple["Tensor", ...]):
        self.fn = fn
        self.inputs = inputs

    @property
    def op_kind(self) -> str:
        return type(self.fn).__name__

    @property
    def saved_context(self) -> dict:
        return self.fn.saved


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None,
                 _node: OpNode | None = None, _copy: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DTYPE and (arr.dtype.kind in "fiub" or arr.dtype == object):
            arr = arr.astype(_DTYPE)
        elif _copy and arr is data:
            arr = arr.copy()
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node = _node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _copy=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if not np.isfinite(g).all():
                    raise NumericError(f"non-finite gradient reaching {t!r}")
                t.grad = g if t.grad is None else t.grad + g
                continue
            in_grads = t.node.fn.backward(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
            # the graph is single-use; release saved buffers early
            t.node.fn.saved = {}
            t.node = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


class Function:
    """Base class for differentiable operators."""

    def __init__(self, needs_grad: tuple[bool, ...]):
        self.needs_grad = needs_grad
        self.saved: dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        needs = tuple(t.requires_grad for t in inputs)
        fn = cls(needs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if any(needs):
            return Tensor(out, requires_grad=True, _node=OpNode(fn, inputs), _copy=False)
        return Tensor(out, _copy=False)


def _as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise helpers


class Add(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


class Scale(Function):
    def forward(self, a, factor: float):
        self.saved["factor"] = factor
        return a * a.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.saved["factor"]),)


class Sum(Function):
    def forward(self, a):
        self.saved["shape"] = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.saved["shape"]).copy(),)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(_as_tensor(a), _as_tensor(b))


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def tensor_sum(a: Tensor) -> Tensor:
    return Sum.apply(a)


# ---------------------------------------------------------------------------
# convolution


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


def _conv3x3(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    # one GEMM per kernel tap keeps peak memory at one input-sized copy
    B, H, W, C = x.shape
    xp = _pad1(x)
    out = None
    for dy in range(3):
        for dx in range(3):
            tap = np.ascontiguousarray(xp[:, dy:dy + H, dx:dx + W, :]).reshape(-1, C)
            part = tap @ k[:, dy, dx, :]
            if out is None:
                out = part
            else:
                out += part
    return out.reshape(B, H, W, k.shape[3])


class Conv2d(Function):
    def forward(self, x, k, b):
        if x.ndim != 4:
            raise ShapeError(f"conv2d: input must be B x H x W x C, got {x.shape}")
        if k.ndim != 4 or k.shape[1:3] != (3, 3):
            raise ShapeError(f"conv2d: kernel must be Cin x 3 x 3 x Cout, got {k.shape}")
        if x.shape[3] != k.shape[0]:
            raise ShapeError(f"conv2d: input has {x.shape[3]} channels, kernel expects {k.shape[0]}")
        if b.shape != (k.shape[3],):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match Cout={k.shape[3]}")
        self.saved["x"] = x
        self.saved["k"] = k
        out = _conv3x3(x, k)
        out += b
        return out

    def backward(self, grad):
        x, k = self.saved["x"], self.saved["k"]
        gx = gk = gb = None
        if self.needs_grad[0]:
            flipped = np.ascontiguousarray(k[:, ::-1, ::-1, :].transpose(3, 1, 2, 0))
            gx = _conv3x3(grad, flipped)
        if self.needs_grad[1]:
            B, H, W, C = x.shape
            xp = _pad1(x)
            g2 = grad.reshape(-1, grad.shape[3])
            gk = np.empty_like(k)
            for dy in range(3):
                for dx in range(3):
                    tap = np.ascontiguousarray(xp[:, dy:dy + H, dx:dx + W, :]).reshape(-1, C)
                    gk[:, dy, dx, :] = tap.T @ g2
        if self.needs_grad[2]:
            gb = grad.sum(axis=(0, 1, 2))
        return gx, gk, gb


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""
    return Conv2d.apply(x, kernel, bias)


# ---------------------------------------------------------------------------
# pooling


class MaxPool2x2(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"maxpool2x2: input must be 4-D, got {x.shape}")
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ShapeError(f"maxpool2x2: spatial size {H}x{W} must be even")
        taps = [x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]]
        out = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))
        # winner = first tap in row-major order equal to the max
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for t in taps:
            m = (t == out) & ~taken
            taken |= m
            masks.append(m)
        self.saved["masks"] = masks
        self.saved["shape"] = x.shape
        return out

    def backward(self, grad):
        masks = self.saved["masks"]
        gx = np.zeros(self.saved["shape"], dtype=grad.dtype)
        gx[:, 0::2, 0::2] = grad * masks[0]
        gx[:, 0::2, 1::2] = grad * masks[1]
        gx[:, 1::2, 0::2] = grad * masks[2]
        gx[:, 1::2, 1::2] = grad * masks[3]
        return (gx,)


def maxpool2x2(x: Tensor) -> Tensor:
    return MaxPool2x2.apply(x)


class GlobalAvgPool(Function):
    def forward(self, x):
        if x.ndim != 4 or x.shape[1] < 1 or x.shape[2] < 1:
            raise ShapeError(f"global_avg_pool: bad input shape {x.shape}")
        self.saved["shape"] = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        B, H, W, C = self.saved["shape"]
        g = grad[:, None, None, :] / grad.dtype.type(H * W)
        return (np.broadcast_to(g, (B, H, W, C)).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


# ---------------------------------------------------------------------------
# normalisation and activation


class BatchNorm(Function):
    def forward(self, x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                train: bool):
        C = x.shape[-1]
        if gamma.shape != (C,) or beta.shape != (C,):
            raise ShapeError(f"batchnorm: parameters must have shape ({C},)")
        if train:
            n = x.size // C
            if n < 2:
                raise ShapeError("batchnorm: train mode needs at least 2 values per channel")
            mean = x.mean(axis=(0, 1, 2))
            xc = x - mean
            var = np.mean(np.square(xc), axis=(0, 1, 2))
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = xc * inv_std
            running_mean *= BN_MOMENTUM
            running_mean += (1.0 - BN_MOMENTUM) * mean
            running_var *= BN_MOMENTUM
            running_var += (1.0 - BN_MOMENTUM) * var * (n / (n - 1))
            self.saved.update(xhat=xhat, inv_std=inv_std, gamma=gamma, train=True)
        else:
            inv_std = (1.0 / np.sqrt(running_var + BN_EPS)).astype(x.dtype)
            xhat = (x - running_mean.astype(x.dtype)) * inv_std
            self.saved.update(xhat=xhat, inv_std=inv_std, gamma=gamma, train=False)
        return xhat * gamma + beta

    def backward(self, grad):
        xhat, inv_std, gamma = self.saved["xhat"], self.saved["inv_std"], self.saved["gamma"]
        axes = (0, 1, 2)
        gbeta = grad.sum(axis=axes) if self.needs_grad[2] else None
        ggamma = (grad * xhat).sum(axis=axes) if self.needs_grad[1] else None
        gx = None
        if self.needs_grad[0]:
            gxhat = grad * gamma
            if self.saved["train"]:
                # d/dx of (x - mean) * inv_std with batch statistics
                mean_g = gxhat.mean(axis=axes)
                mean_gx = (gxhat * xhat).mean(axis=axes)
                gx = (gxhat - mean_g - xhat * mean_gx) * inv_std
            else:
                gx = gxhat * inv_std
        return gx, ggamma, gbeta


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | Tensor,
              running_var: np.ndarray | Tensor, mode: str = "train") -> Tensor:
    """Per-channel batch normalisation over (B, H, W).

    ``running_mean``/``running_var`` are updated in place in train mode
    (momentum ``BN_MOMENTUM``); eval mode reads them only.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    rm = running_mean.data if isinstance(running_mean, Tensor) else running_mean
    rv = running_var.data if isinstance(running_var, Tensor) else running_var
    return BatchNorm.apply(x, gamma, beta, running_mean=rm, running_var=rv,
                           train=mode == "train")


class ReLU(Function):
    def forward(self, x):
        mask = x > 0
        self.saved["mask"] = mask
        return x * mask

    def backward(self, grad):
        return (grad * self.saved["mask"],)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


# ---------------------------------------------------------------------------
# fragment plumbing


class ConcatChannels(Function):
    def forward(self, a, b):
        if a.shape[:-1] != b.shape[:-1]:
            raise ShapeError(f"concat_channels: leading dims differ {a.shape} vs {b.shape}")
        self.saved["split"] = a.shape[-1]
        return np.concatenate([a, b], axis=-1)

    def backward(self, grad):
        s = self.saved["split"]
        return grad[..., :s], grad[..., s:]


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return ConcatChannels.apply(a, b)


def _window(spec: Any) -> tuple[int, int, int, int]:
    if hasattr(spec, "x"):
        return int(spec.x), int(spec.y), int(spec.h), int(spec.w)
    x, y, h, w = spec
    return int(x), int(y), int(h), int(w)


def _check_window(shape: tuple[int, ...], win: tuple[int, int, int, int]) -> None:
    x, y, h, w = win
    H, W = shape[1], shape[2]
    if h < 1 or w < 1:
        raise BoundsError(f"crop: empty window h={h}, w={w}")
    if x < 0 or x + h > H:
        raise BoundsError(f"crop: x={x} with h={h} leaves the height range [0, {H})")
    if y < 0 or y + w > W:
        raise BoundsError(f"crop: y={y} with w={w} leaves the width range [0, {W})")


class Crop(Function):
    def forward(self, a, specs: Sequence[tuple[int, int, int, int]]):
        if a.ndim != 4:
            raise ShapeError(f"crop: input must be 4-D, got {a.shape}")
        sizes = {(h, w) for _, _, h, w in specs}
        if len(sizes) != 1:
            raise ShapeError(f"crop: stacked windows must share one size, got {sorted(sizes)}")
        for win in specs:
            _check_window(a.shape, win)
        self.saved["specs"] = specs
        self.saved["shape"] = a.shape
        if len(specs) == 1:
            x, y, h, w = specs[0]
            return a[:, x:x + h, y:y + w, :].copy()
        return np.concatenate([a[:, x:x + h, y:y + w, :] for x, y, h, w in specs], axis=0)

    def backward(self, grad):
        B = self.saved["shape"][0]
        ga = np.zeros(self.saved["shape"], dtype=grad.dtype)
        for n, (x, y, h, w) in enumerate(self.saved["specs"]):
            ga[:, x:x + h, y:y + w, :] += grad[n * B:(n + 1) * B]
        return (ga,)


def crop(a: Tensor, spec: Any) -> Tensor:
    """Spatial window ``(x, y, h, w)``: rows ``x:x+h``, columns ``y:y+w``."""
    return Crop.apply(a, specs=[_window(spec)])


def crop_stack(a: Tensor, specs: Sequence[Any]) -> Tensor:
    """Crop several equally sized windows and stack them on the batch axis.

    Output row ``n * B + b`` is window ``n`` of batch item ``b``.
    """
    if not specs:
        raise ShapeError("crop_stack: no windows given")
    return Crop.apply(a, specs=[_window(s) for s in specs])


# ---------------------------------------------------------------------------
# classifier head


class Linear(Function):
    def forward(self, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"linear: cannot apply {w.shape} weight to input {x.shape}")
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape[1]} outputs")
        self.saved["x"] = x
        self.saved["w"] = w
        return x @ w + b

    def backward(self, grad):
        x, w = self.saved["x"], self.saved["w"]
        gx = grad @ w.T if self.needs_grad[0] else None
        gw = x.T @ grad if self.needs_grad[1] else None
        gb = grad.sum(axis=0) if self.needs_grad[2] else None
        return gx, gw, gb


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weight, bias)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _target_matrix(target: Any, shape: tuple[int, int], dtype: np.dtype) -> np.ndarray:
    B, M = shape
    t = np.asarray(target)
    if t.ndim == 2:
        if t.shape != shape:
            raise ShapeError(f"softmax_cross_entropy: target {t.shape} vs logits {shape}")
        return t.astype(dtype)
    t = np.broadcast_to(t, (B,))
    if t.dtype.kind not in "iu" or (t < 0).any() or (t >= M).any():
        raise ValueError(f"softmax_cross_entropy: class indices must be integers in [0, {M})")
    onehot = np.zeros(shape, dtype=dtype)
    onehot[np.arange(B), t] = 1
    return onehot


class SoftmaxCrossEntropy(Function):
    def forward(self, z, target):
        if z.ndim != 2 or z.shape[1] < 2:
            raise ShapeError(f"softmax_cross_entropy: logits must be B x M with M >= 2, got {z.shape}")
        if not np.isfinite(z).all():
            raise NumericError("softmax_cross_entropy: non-finite logits")
        g = _target_matrix(target, z.shape, z.dtype)
        logp = _log_softmax(z)
        probs = np.exp(logp)
        self.saved["probs"] = probs
        self.saved["target"] = g
        return -(g * logp).sum(axis=1)

    def backward(self, grad):
        probs, g = self.saved["probs"], self.saved["target"]
        # rows of a one-hot/probability target sum to one, so d/dz = probs - target
        return (grad[:, None] * (probs * g.sum(axis=1, keepdims=True) - g),)


def softmax_cross_entropy(logits: Tensor, target: Any) -> tuple[Tensor, np.ndarray]:
    """Per-row cross entropy and the softmax probabilities.

    ``target`` is either an integer class index per row (or one index for all
    rows) or a B x M matrix of target probabilities.
    """
    loss = SoftmaxCrossEntropy.apply(logits, target=target)
    if loss.node is not None:
        probs = loss.node.fn.saved["probs"]
    else:
        probs = np.exp(_log_softmax(logits.data))
    return loss, probs
