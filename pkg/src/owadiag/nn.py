"""Small dense-tensor CNN engine with linguistic OWA pooling.

Tensors are plain float64 numpy arrays laid out as [batch, channels, height,
width].  Each layer keeps whatever it needs from ``forward`` to run
``backward`` exactly once afterwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .quantifiers import Quantifier, rim_weights

Tensor = np.ndarray

CHECKPOINT_FORMAT = "owadiag-checkpoint"
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("Conv2D", "OwaPool", "ReLU", "Flatten", "Dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int | None = None
    kernel: tuple[int, int] | None = None
    stride: int = 1
    padding: str = "same"
    window: tuple[int, int] | None = None
    quantifier: Quantifier | None = None
    units: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "Conv2D":
            if self.out_channels is None or self.out_channels < 1:
                raise ValueError("Conv2D needs out_channels >= 1")
            if self.kernel is None or min(self.kernel) < 1:
                raise ValueError("Conv2D kernel extents must be >= 1")
            if self.stride < 1:
                raise ValueError("stride must be >= 1")
            if self.padding not in ("same", "valid"):
                raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        elif self.kind == "OwaPool":
            if self.window is None or min(self.window) < 1:
                raise ValueError("pool window extents must be >= 1")
            if self.quantifier is None:
                raise ValueError("OwaPool needs a quantifier")
        elif self.kind == "Dense":
            if self.units is None or self.units < 1:
                raise ValueError("Dense needs units >= 1")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "Conv2D":
            d.update(out_channels=self.out_channels, kernel=list(self.kernel),
                     stride=self.stride, padding=self.padding)
        elif self.kind == "OwaPool":
            d.update(window=list(self.window), quantifier=self.quantifier.kind.value,
                     alpha=self.quantifier.alpha)
        elif self.kind == "Dense":
            d.update(units=self.units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        kind = d["kind"]
        if kind == "Conv2D":
            return cls(kind, out_channels=d["out_channels"], kernel=tuple(d["kernel"]),
                       stride=d["stride"], padding=d["padding"])
        if kind == "OwaPool":
            return cls(kind, window=tuple(d["window"]), quantifier=Quantifier(d["quantifier"], d["alpha"]))
        if kind == "Dense":
            return cls(kind, units=d["units"])
        return cls(kind)


# ---------------------------------------------------------------------------
# functional layer primitives


@dataclass
class PoolCache:
    perm: np.ndarray  # [B, C, Ho, Wo, ph*pw]; rank -> flat index inside the patch
    input_shape: tuple[int, int, int, int]
    window: tuple[int, int]
    weights: np.ndarray


def owa_pool_forward(x: Tensor, window, q: Quantifier) -> tuple[Tensor, PoolCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"pooling expects a 4-d tensor, got shape {x.shape}")
    ph, pw = int(window[0]), int(window[1])
    if ph < 1 or pw < 1:
        raise ValueError(f"pool window must be positive, got {window}")
    H, W = x.shape[2:]
    if H < ph or W < pw:
        raise ValueError(f"pool window {ph}x{pw} larger than input {H}x{W}")
    w = rim_weights(q, ph * pw).weights
    out, perm = _kernels.pool_forward(x, w, ph, pw)
    return out, PoolCache(perm, tuple(x.shape), (ph, pw), w)


def owa_pool_backward(grad_out: Tensor, cache: PoolCache, window=None, q: Quantifier | None = None) -> Tensor:
    """Route ``grad_out`` through the cached sort: d out / d a_k = w[rank(k)]."""
    if window is not None and tuple(int(v) for v in window) != cache.window:
        raise ValueError(f"window {window} does not match cached {cache.window}")
    w = cache.weights if q is None else rim_weights(q, cache.window[0] * cache.window[1]).weights
    if w.shape != cache.weights.shape:
        raise ValueError("quantifier weights do not match the cached pooling window")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.perm.shape[:4]:
        raise ValueError(f"grad shape {grad_out.shape} does not match cached output {cache.perm.shape[:4]}")
    B, C, H, W = cache.input_shape
    return _kernels.pool_backward(grad_out, cache.perm, w, cache.window[0], cache.window[1], H, W)


def _same_pads(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


@dataclass
class ConvCache:
    cols: np.ndarray
    kernel: np.ndarray
    padded_shape: tuple[int, int, int, int]
    pads: tuple[int, int, int, int]
    stride: int
    out_hw: tuple[int, int]


def conv2d_forward(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
                   padding: str = "same") -> tuple[Tensor, ConvCache]:
    """Cross-correlation of ``x`` [B, C, H, W] with ``kernel`` [O, C, kh, kw]."""
    x = np.asarray(x, dtype=np.float64)
    O, C, kh, kw = kernel.shape
    if x.ndim != 4 or x.shape[1] != C:
        raise ValueError(f"input has {x.shape[1] if x.ndim == 4 else '?'} channels, kernel expects {C}")
    B, _, H, W = x.shape
    if padding == "same":
        Ho, top, bottom = _same_pads(H, kh, stride)
        Wo, left, right = _same_pads(W, kw, stride)
    elif padding == "valid":
        if H < kh or W < kw:
            raise ValueError(f"kernel {kh}x{kw} larger than input {H}x{W} with valid padding")
        Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1
        top = bottom = left = right = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right))) if (top or bottom or left or right) else x
    cols = _kernels.im2col(xp, kh, kw, stride, Ho, Wo)
    out = cols @ kernel.reshape(O, -1).T + bias
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    cache = ConvCache(cols, kernel, xp.shape, (top, bottom, left, right), stride, (Ho, Wo))
    return np.ascontiguousarray(out), cache


def conv2d_backward(grad_out: Tensor, cache: ConvCache, input_grad: bool = True):
    """Gradients (input, kernel, bias); the input gradient is ``None`` when
    ``input_grad`` is false."""
    O, C, kh, kw = cache.kernel.shape
    B = cache.padded_shape[0]
    Ho, Wo = cache.out_hw
    if grad_out.shape != (B, O, Ho, Wo):
        raise ValueError(f"grad shape {grad_out.shape} does not match conv output {(B, O, Ho, Wo)}")
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, O)
    dk = (g.T @ cache.cols).reshape(cache.kernel.shape)
    db = g.sum(axis=0)
    if not input_grad:
        return None, dk, db
    dcols = g @ cache.kernel.reshape(O, -1)
    dxp = _kernels.col2im(dcols, cache.padded_shape, kh, kw, cache.stride, Ho, Wo)
    top, bottom, left, right = cache.pads
    H, W = cache.padded_shape[2] - top - bottom, cache.padded_shape[3] - left - right
    return dxp[:, :, top : top + H, left : left + W], dk, db


def dense_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense input {x.shape} incompatible with weight {weight.shape}")
    return x @ weight + bias


def dense_backward(grad_out: Tensor, x: Tensor, weight: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    return np.where(x > 0.0, grad_out, 0.0)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / B``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range for {K} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / B


# ---------------------------------------------------------------------------
# layer objects


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, spec: LayerSpec, in_shape, rng):
        super().__init__()
        self.spec = spec
        C = in_shape[0]
        kh, kw = spec.kernel
        O = spec.out_channels
        limit = np.sqrt(6.0 / (C * kh * kw + O * kh * kw))
        self.params = {"kernel": rng.uniform(-limit, limit, size=(O, C, kh, kw)), "bias": np.zeros(O)}
        H, W = in_shape[1:]
        if spec.padding == "same":
            Ho, Wo = -(-H // spec.stride), -(-W // spec.stride)
        else:
            Ho, Wo = (H - kh) // spec.stride + 1, (W - kw) // spec.stride + 1
        self.out_shape = (O, Ho, Wo)
        self.input_grad = True

    def forward(self, x):
        out, self._cache = conv2d_forward(x, self.params["kernel"], self.params["bias"],
                                          self.spec.stride, self.spec.padding)
        return out

    def backward(self, g):
        dx, dk, db = conv2d_backward(g, self._cache, self.input_grad)
        self.grads = {"kernel": dk, "bias": db}
        self._cache = None
        return dx


class OwaPool(Layer):
    def __init__(self, spec: LayerSpec, in_shape, rng=None):
        super().__init__()
        self.spec = spec
        ph, pw = spec.window
        C, H, W = in_shape
        self.out_shape = (C, H // ph, W // pw)

    def forward(self, x):
        out, self._cache = owa_pool_forward(x, self.spec.window, self.spec.quantifier)
        return out

    def backward(self, g):
        dx = owa_pool_backward(g, self._cache)
        self._cache = None
        return dx


class ReLU(Layer):
    def __init__(self, spec: LayerSpec, in_shape, rng=None):
        super().__init__()
        self.out_shape = tuple(in_shape)

    def forward(self, x):
        self._x = x
        return relu_forward(x)

    def backward(self, g):
        dx = relu_backward(g, self._x)
        self._x = None
        return dx


class Flatten(Layer):
    def __init__(self, spec: LayerSpec, in_shape, rng=None):
        super().__init__()
        self.out_shape = (int(np.prod(in_shape)),)

    def forward(self, x):
        self._shape = x.shape
        return flatten(x)

    def backward(self, g):
        return g.reshape(self._shape)


class Dense(Layer):
    def __init__(self, spec: LayerSpec, in_shape, rng):
        super().__init__()
        if len(in_shape) != 1:
            raise ValueError(f"Dense expects a flat input, got shape {in_shape}")
        n_in, n_out = in_shape[0], spec.units
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.params = {"weight": rng.uniform(-limit, limit, size=(n_in, n_out)), "bias": np.zeros(n_out)}
        self.out_shape = (n_out,)

    def forward(self, x):
        self._x = x
        return dense_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, g):
        dx, dw, db = dense_backward(g, self._x, self.params["weight"])
        self.grads = {"weight": dw, "bias": db}
        self._x = None
        return dx


_LAYER_TYPES = {"Conv2D": Conv2D, "OwaPool": OwaPool, "ReLU": ReLU, "Flatten": Flatten, "Dense": Dense}


class Network:
    """A feed-forward stack built from :class:`LayerSpec` objects.

    ``input_shape`` excludes the batch axis: (channels, height, width).
    """

    def __init__(self, specs, input_shape, seed: int = 0):
        self.specs = list(specs)
        self.input_shape = tuple(int(v) for v in input_shape)
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        self.layers: list[Layer] = []
        for i, spec in enumerate(self.specs):
            if spec.kind == "OwaPool":
                ph, pw = spec.window
                if len(shape) != 3 or shape[1] // ph < 1 or shape[2] // pw < 1:
                    raise ValueError(f"layer {i} ({spec.kind} {ph}x{pw}) collapses input of shape {shape}")
            layer = _LAYER_TYPES[spec.kind](spec, shape, rng)
            shape = layer.out_shape
            self.layers.append(layer)
        self.output_shape = shape
        if self.layers and isinstance(self.layers[0], Conv2D):
            # nothing upstream consumes the input gradient during training
            self.layers[0].input_grad = False

    def forward(self, x: Tensor) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def predict_proba(self, x: Tensor, batch_size: int = 256) -> np.ndarray:
        out = [softmax(self.forward(x[i : i + batch_size])) for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0,) + tuple(self.output_shape))
        return np.concatenate(out)

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params.values()]

    def gradients(self) -> list[np.ndarray]:
        return [layer.grads[k] for layer in self.layers for k in layer.params]

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"layer{i}.{name}", p

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise ValueError("parameter names do not match the network")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p[...] = state[k]


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(params, grads, velocities, lr: float, momentum: float = 0.9):
    """In-place momentum SGD: ``v <- momentum*v + g``; ``p <- p - lr*v``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    for p, g, v in zip(params, grads, velocities):
        v *= momentum
        v += g
        p -= lr * v
    return params


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocities = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        sgd_step(self.params, grads, self.velocities, self.lr, self.momentum)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    header: dict
    state: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, net: Network, layout: dict | None = None, extra: dict | None = None) -> Path:
    """Write an ``.npz`` container with a JSON header and one array per parameter."""
    path = Path(path)
    pools = [
        {"layer": i, "quantifier": s.quantifier.kind.value, "alpha": s.quantifier.alpha}
        for i, s in enumerate(net.specs)
        if s.kind == "OwaPool"
    ]
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_shape": list(net.input_shape),
        "layers": [s.to_dict() for s in net.specs],
        "pooling": pools,
        "layout": layout,
        "extra": extra or {},
    }
    arrays = {f"param:{k}": v for k, v in net.named_parameters()}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if "__header__" not in z.files:
            raise ValueError(f"{path} is not an owadiag checkpoint")
        header = json.loads(str(z["__header__"]))
        state = {k[len("param:"):]: z[k] for k in z.files if k.startswith("param:")}
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an owadiag checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    return Checkpoint(header, state)


def load_checkpoint(path) -> tuple[Network, dict]:
    ck = read_checkpoint(path)
    specs = [LayerSpec.from_dict(d) for d in ck.header["layers"]]
    net = Network(specs, ck.header["input_shape"], seed=0)
    net.load_state(ck.state)
    return net, ck.header
