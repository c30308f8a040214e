"""A small numpy CNN with hand-written backward passes.

All learnable tensors are views into one flat parameter vector (and the
gradients into one flat gradient vector), so optimizers, checkpoints and
pruning masks work on a single array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import RngStream


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    type: str  # conv | relu | maxpool | flatten | dense
    out: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    size: int = 2

    def to_dict(self) -> dict:
        if self.type == "conv":
            return {"type": "conv", "out": self.out, "kernel": self.kernel, "stride": self.stride, "pad": self.pad}
        if self.type == "dense":
            return {"type": "dense", "out": self.out}
        if self.type == "maxpool":
            return {"type": "maxpool", "size": self.size}
        return {"type": self.type}


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(d["name"], tuple(d["input_shape"]), int(d["num_classes"]), tuple(LayerSpec(**l) for l in d["layers"]))


def convnet_s(input_shape=(3, 32, 32), num_classes: int = 10) -> ArchSpec:
    layers = (
        LayerSpec("conv", out=16, kernel=3, stride=1, pad=1),
        LayerSpec("relu"),
        LayerSpec("maxpool", size=2),
        LayerSpec("conv", out=32, kernel=3, stride=1, pad=1),
        LayerSpec("relu"),
        LayerSpec("maxpool", size=2),
        LayerSpec("flatten"),
        LayerSpec("dense", out=128),
        LayerSpec("relu"),
        LayerSpec("dense", out=num_classes),
    )
    return ArchSpec("ConvNet-S", tuple(input_shape), num_classes, layers)


def dense_net(input_shape, num_classes: int, hidden: tuple[int, ...] = (16,)) -> ArchSpec:
    layers = [LayerSpec("flatten")]
    for width in hidden:
        layers += [LayerSpec("dense", out=width), LayerSpec("relu")]
    layers.append(LayerSpec("dense", out=num_classes))
    return ArchSpec("Dense-" + "x".join(map(str, hidden)), tuple(input_shape), num_classes, tuple(layers))


ARCHITECTURES = {"ConvNet-S": convnet_s}


def build_arch(name: str, input_shape, num_classes: int) -> ArchSpec:
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[name](tuple(input_shape), num_classes)


# --------------------------------------------------------------------------- layers


class Layer:
    param_shapes: dict[str, tuple[int, ...]] = {}
    fan_in = 0

    def bind(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.p = params
        self.g = grads

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, in_shape, spec: LayerSpec):
        c, h, w = in_shape
        self.k, self.s, self.pad, self.f = spec.kernel, spec.stride, spec.pad, spec.out
        self.ho = (h + 2 * self.pad - self.k) // self.s + 1
        self.wo = (w + 2 * self.pad - self.k) // self.s + 1
        if self.ho < 1 or self.wo < 1:
            raise ShapeError(f"conv kernel {self.k} does not fit input {in_shape}")
        self.in_shape = in_shape
        self.out_shape = (self.f, self.ho, self.wo)
        self.param_shapes = {"weight": (self.f, c, self.k, self.k), "bias": (self.f,)}
        self.fan_in = c * self.k * self.k

    def forward(self, x, train):
        n = x.shape[0]
        p, k, s = self.pad, self.k, self.s
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : s * self.ho : s, : s * self.wo : s]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * self.ho * self.wo, -1)
        wmat = self.p["weight"].reshape(self.f, -1)
        out = cols @ wmat.T
        out += self.p["bias"]
        if train:
            self.cache = (cols, xp.shape)
        return out.reshape(n, self.ho, self.wo, self.f).transpose(0, 3, 1, 2)

    def backward(self, dout):
        cols, xp_shape = self.cache
        n = dout.shape[0]
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.f)
        self.g["weight"][...] = (d2.T @ cols).reshape(self.param_shapes["weight"])
        self.g["bias"][...] = d2.sum(axis=0)
        wmat = self.p["weight"].reshape(self.f, -1)
        dcols = (d2 @ wmat).reshape(n, self.ho, self.wo, self.in_shape[0], self.k, self.k)
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        s = self.s
        for i in range(self.k):
            for j in range(self.k):
                dxp[:, :, i : i + s * self.ho : s, j : j + s * self.wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = self.pad
        h, w = self.in_shape[1:]
        return dxp[:, :, p : p + h, p : p + w] if p else dxp


class ReLU(Layer):
    def __init__(self, in_shape):
        self.in_shape = self.out_shape = in_shape

    def forward(self, x, train):
        mask = x > 0
        if train:
            self.mask = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        return np.where(self.mask, dout, 0).astype(dout.dtype, copy=False)


class MaxPool2D(Layer):
    """Non-overlapping ``size x size`` max pooling; trailing odd rows/cols are dropped."""

    def __init__(self, in_shape, spec: LayerSpec):
        c, h, w = in_shape
        self.size = spec.size
        self.ho, self.wo = h // self.size, w // self.size
        if self.ho < 1 or self.wo < 1:
            raise ShapeError(f"pool size {self.size} does not fit input {in_shape}")
        self.in_shape = in_shape
        self.out_shape = (c, self.ho, self.wo)

    def forward(self, x, train):
        n, c = x.shape[:2]
        k = self.size
        xr = x[:, :, : self.ho * k, : self.wo * k].reshape(n, c, self.ho, k, self.wo, k)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, self.ho, self.wo, k * k)
        idx = xr.argmax(axis=-1)  # first max wins ties, so exactly one input gets the gradient
        if train:
            self.idx = idx
        return np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        n, c = dout.shape[:2]
        k = self.size
        dr = np.zeros((n, c, self.ho, self.wo, k * k), dtype=dout.dtype)
        np.put_along_axis(dr, self.idx[..., None], dout[..., None], axis=-1)
        dr = dr.reshape(n, c, self.ho, self.wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, self.ho * k, self.wo * k)
        h, w = self.in_shape[1:]
        if (h, w) == (self.ho * k, self.wo * k):
            return dr
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        dx[:, :, : self.ho * k, : self.wo * k] = dr
        return dx


class Flatten(Layer):
    def __init__(self, in_shape):
        self.in_shape = in_shape
        self.out_shape = (int(np.prod(in_shape)),)

    def forward(self, x, train):
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape((dout.shape[0],) + tuple(self.in_shape))


class Dense(Layer):
    def __init__(self, in_shape, spec: LayerSpec):
        if len(in_shape) != 1:
            raise ShapeError(f"dense layer needs a flat input, got {in_shape}; add a flatten layer")
        self.in_shape = in_shape
        self.out_shape = (spec.out,)
        self.param_shapes = {"weight": (spec.out, in_shape[0]), "bias": (spec.out,)}
        self.fan_in = in_shape[0]

    def forward(self, x, train):
        if train:
            self.x = x
        out = x @ self.p["weight"].T
        out += self.p["bias"]
        return out

    def backward(self, dout):
        self.g["weight"][...] = dout.T @ self.x
        self.g["bias"][...] = dout.sum(axis=0)
        return dout @ self.p["weight"]


# --------------------------------------------------------------------------- network


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient w.r.t. the logits (log-sum-exp stabilised)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sum_exp)
    loss = -float(log_probs[np.arange(n), labels].astype(np.float64).mean())
    grad = exp / sum_exp
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad


@dataclass(frozen=True)
class ParamSlice:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class Network:
    """Executable form of an :class:`ArchSpec` over a flat parameter vector."""

    def __init__(self, arch: ArchSpec, params: np.ndarray | None = None, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.layers: list[Layer] = []
        self.layer_names: list[str] = []
        shape = tuple(arch.input_shape)
        counts: dict[str, int] = {}
        for spec in arch.layers:
            if spec.type == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"conv layer needs a (C, H, W) input, got {shape}")
                layer = Conv2D(shape, spec)
            elif spec.type == "relu":
                layer = ReLU(shape)
            elif spec.type == "maxpool":
                layer = MaxPool2D(shape, spec)
            elif spec.type == "flatten":
                layer = Flatten(shape)
            elif spec.type == "dense":
                layer = Dense(shape, spec)
            else:
                raise ShapeError(f"unknown layer type {spec.type!r}")
            counts[spec.type] = counts.get(spec.type, 0) + 1
            self.layer_names.append(f"{spec.type}{counts[spec.type]}")
            self.layers.append(layer)
            shape = layer.out_shape
        if shape != (arch.num_classes,):
            raise ShapeError(f"network output {shape} does not match {arch.num_classes} classes")

        self.slices: list[ParamSlice] = []
        offset = 0
        for lname, layer in zip(self.layer_names, self.layers):
            for pname, pshape in layer.param_shapes.items():
                self.slices.append(ParamSlice(f"{lname}.{pname}", offset, tuple(pshape)))
                offset += int(np.prod(pshape))
        self.num_params = offset

        if params is None:
            params = np.zeros(offset, dtype=self.dtype)
        params = np.asarray(params)
        if params.shape != (offset,):
            raise ShapeError(f"parameter vector has {params.size} entries, architecture needs {offset}")
        self.params = np.ascontiguousarray(params, dtype=self.dtype)
        self.grads = np.zeros(offset, dtype=self.dtype)
        self._bind()

    def _bind(self) -> None:
        views = self.views(self.params)
        gviews = self.views(self.grads)
        for lname, layer in zip(self.layer_names, self.layers):
            prefix = lname + "."
            layer.bind(
                {k[len(prefix):]: v for k, v in views.items() if k.startswith(prefix)},
                {k[len(prefix):]: v for k, v in gviews.items() if k.startswith(prefix)},
            )

    def views(self, vector: np.ndarray) -> dict[str, np.ndarray]:
        return {s.name: vector[s.offset : s.offset + s.size].reshape(s.shape) for s in self.slices}

    def init_params(self, seed: int) -> None:
        """Uniform in +-sqrt(6 / fan_in) per weight tensor, zero biases."""
        self.params[...] = 0
        for i, (lname, layer) in enumerate(zip(self.layer_names, self.layers)):
            if "weight" not in layer.param_shapes:
                continue
            w = layer.p["weight"]
            bound = np.sqrt(6.0 / layer.fan_in)
            u = RngStream(seed, "init", i).uniforms(w.size)
            w[...] = ((2.0 * u - 1.0) * bound).reshape(w.shape).astype(self.dtype)

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ShapeError(f"input shape {x.shape[1:]} does not match architecture input {tuple(self.arch.input_shape)}")

    def forward(self, x: np.ndarray, train: bool = False, upto: int | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        layers = self.layers if upto is None else self.layers[:upto]
        for layer in layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = dlogits.astype(self.dtype, copy=False)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return self.grads

    def loss_and_grad(self, x: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        logits = self.forward(x, train=True)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        return loss, self.grads

    def loss(self, x: np.ndarray, labels: np.ndarray) -> float:
        return softmax_cross_entropy(self.forward(x), labels)[0]

    def activation_pattern(self) -> bytes:
        """ReLU masks and pooling winners of the last training-mode forward pass."""
        parts = []
        for layer in self.layers:
            if isinstance(layer, ReLU):
                parts.append(np.packbits(layer.mask).tobytes())
            elif isinstance(layer, MaxPool2D):
                parts.append(layer.idx.astype(np.uint8).tobytes())
        return b"".join(parts)

    def conv_layer_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv2D)]
