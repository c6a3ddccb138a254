"""Layer specifications and the sequential network container.

Networks are declared as a list of :class:`LayerSpec` plus an input shape
(channels-first, no batch dimension).  Weights live in a flat name->Tensor
dict so optimizers and the serializer can treat every network uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from ..errors import ShapeError
from . import tensor as T
from .tensor import Tensor

LAYER_KINDS = (
    "dense",
    "conv2d",
    "conv2d-transpose",
    "batch-norm",
    "reshape",
    "flatten",
    "global-avg-pool",
    "avg-pool",
    "dropout",
    "gaussian-noise",
    "activation",
    "resize",
)

ACTIVATIONS = ("linear", "relu", "leaky-relu", "tanh", "sigmoid")

# which optional fields each kind consumes; anything else set is an error
_FIELDS = {
    "dense": {"units", "spectral_norm"},
    "conv2d": {"filters", "kernel", "stride", "padding", "spectral_norm"},
    "conv2d-transpose": {"filters", "kernel", "stride", "padding", "out_shape", "spectral_norm"},
    "batch-norm": {"momentum"},
    "reshape": {"out_shape"},
    "flatten": set(),
    "global-avg-pool": set(),
    "avg-pool": {"kernel", "stride"},
    "dropout": {"rate"},
    "gaussian-noise": {"std"},
    "activation": {"activation", "alpha"},
    "resize": {"out_shape"},
}


class LayerError(ShapeError):
    """Error attributed to a specific layer of a network."""

    def __init__(self, index: int, kind: str, message: str):
        super().__init__(f"layer {index} ({kind}): {message}")
        self.index = index
        self.kind = kind


@dataclass
class LayerSpec:
    kind: str
    units: int | None = None
    filters: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: int | str | None = None
    out_shape: tuple[int, ...] | None = None
    activation: str | None = None
    alpha: float | None = None
    rate: float | None = None
    std: float | None = None
    spectral_norm: bool = False
    momentum: float | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        allowed = _FIELDS[self.kind]
        for name in ("units", "filters", "kernel", "stride", "padding", "out_shape",
                     "activation", "alpha", "rate", "std", "momentum"):
            value = getattr(self, name)
            if value is not None and name not in allowed:
                raise ShapeError(f"layer kind {self.kind!r} does not take field {name!r}")
        if self.spectral_norm and "spectral_norm" not in allowed:
            raise ShapeError(f"layer kind {self.kind!r} does not take spectral_norm")
        if self.kind == "dense" and (self.units is None or self.units < 1):
            raise ShapeError("dense layer needs units >= 1")
        if self.kind in ("conv2d", "conv2d-transpose"):
            if self.filters is None or self.filters < 1:
                raise ShapeError(f"{self.kind} needs filters >= 1")
            if self.kernel is None or self.kernel < 1:
                raise ShapeError(f"{self.kind} needs kernel >= 1")
            if self.stride is None:
                self.stride = 1
            if self.stride < 1:
                raise ShapeError(f"{self.kind} stride must be >= 1")
            if self.padding is None:
                self.padding = "same"
        if self.kind == "avg-pool":
            if self.kernel is None:
                self.kernel = 2
            if self.stride is None:
                self.stride = self.kernel
            if self.stride != self.kernel:
                raise ShapeError("avg-pool supports stride == kernel only")
        if self.kind == "dropout":
            if self.rate is None or not (0.0 <= self.rate < 1.0):
                raise ShapeError("dropout rate must be in [0, 1)")
        if self.kind == "gaussian-noise" and (self.std is None or self.std < 0):
            raise ShapeError("gaussian-noise needs std >= 0")
        if self.kind == "activation":
            if self.activation not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {self.activation!r}")
            if self.alpha is None:
                self.alpha = 0.2
        if self.kind in ("reshape", "resize") and not self.out_shape:
            raise ShapeError(f"{self.kind} needs out_shape")
        if self.kind == "batch-norm" and self.momentum is None:
            self.momentum = 0.99
        if self.out_shape is not None:
            self.out_shape = tuple(int(s) for s in self.out_shape)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None and v is not False}
        if self.spectral_norm:
            d["spectral_norm"] = True
        d["kind"] = self.kind
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        if "out_shape" in d and d["out_shape"] is not None:
            d["out_shape"] = tuple(d["out_shape"])
        return cls(**d)


def _pads_for(spec: LayerSpec, h: int, w: int) -> tuple[int, int, int, int]:
    k = spec.kernel
    s = spec.stride
    if spec.padding == "same":
        if spec.kind == "conv2d-transpose":
            oh, ow = spec.out_shape[-2], spec.out_shape[-1]
            return T.same_pads(oh, ow, k, k, s, s)
        return T.same_pads(h, w, k, k, s, s)
    p = int(spec.padding)
    return (p, p, p, p)


def spectral_normalize(weight: Tensor, power_iters: int, state: np.ndarray | None,
                       eps: float = 1e-12) -> tuple[Tensor, np.ndarray]:
    """Divide a weight by its estimated top singular value.

    The weight is viewed as (rows, fan_in); ``state`` is the persistent left
    power-iteration vector, reused (and returned updated) across calls.  A zero
    matrix comes back unchanged because the estimate is floored at ``eps``.
    """
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    wmat = weight.data.reshape(weight.shape[0], -1)
    rows, cols = wmat.shape
    if state is None:
        state = np.random.default_rng(0).normal(size=rows).astype(wmat.dtype)
        state /= np.linalg.norm(state) + eps
    u = state
    for _ in range(power_iters):
        v = wmat.T @ u
        v = v / (np.linalg.norm(v) + eps)
        u = wmat @ v
        u = u / (np.linalg.norm(u) + eps)
    u = u.astype(wmat.dtype)
    v = v.astype(wmat.dtype)
    # sigma differentiable w.r.t. the weight; u, v held constant (standard SN)
    u_t = Tensor(u.reshape(1, rows))
    v_t = Tensor(v.reshape(cols, 1))
    w2d = T.reshape(weight, (rows, cols))
    sigma = T.matmul(T.matmul(u_t, w2d), v_t)            # (1,1)
    sigma = T.reshape(sigma, (1,) * weight.ndim)
    # floor keeps a zero matrix unchanged (0 / eps == 0)
    normalized = T.div(weight, T.add(sigma, float(eps)))
    return normalized, u


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Network:
    """Sequential net: LayerSpec list + named weight tensors + mutable state.

    ``forward`` is pure w.r.t. weights when ``training=False`` (batch-norm uses
    running statistics, dropout and noise are inactive) and safe to call from
    several threads on shared weights.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec],
                 seed: int = 0, dtype=np.float32):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}
        self.output_shape = self._build(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------

    def _next_activation(self, index: int) -> str:
        for spec in self.layers[index + 1 :]:
            if spec.kind == "activation":
                return spec.activation
            if spec.kind in ("dense", "conv2d", "conv2d-transpose"):
                break
        return "linear"

    def _build(self, rng: np.random.Generator) -> tuple[int, ...]:
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            name = f"L{i:02d}.{spec.kind}"
            try:
                shape = self._build_layer(i, name, spec, shape, rng)
            except ShapeError as err:
                raise LayerError(i, spec.kind, str(err)) from err
        return shape

    def _build_layer(self, i, name, spec, shape, rng) -> tuple[int, ...]:
        act = self._next_activation(i)
        he = act in ("relu", "leaky-relu")
        if spec.kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"dense expects a flat input, got {shape}")
            fan_in, fan_out = shape[0], spec.units
            init = he_uniform(rng, (fan_in, fan_out), fan_in, self.dtype) if he \
                else glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out, self.dtype)
            self.params[f"{name}.weight"] = Tensor(init, requires_grad=True, name=f"{name}.weight")
            self.params[f"{name}.bias"] = Tensor(np.zeros(fan_out, dtype=self.dtype), requires_grad=True, name=f"{name}.bias")
            if spec.spectral_norm:
                self.state[f"{name}.sn_u"] = np.zeros(0, dtype=self.dtype)
            return (spec.units,)
        if spec.kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"conv2d expects (C,H,W) input, got {shape}")
            c, h, w = shape
            k = spec.kernel
            fan_in = c * k * k
            fan_out = spec.filters * k * k
            wshape = (spec.filters, c, k, k)
            init = he_uniform(rng, wshape, fan_in, self.dtype) if he \
                else glorot_uniform(rng, wshape, fan_in, fan_out, self.dtype)
            self.params[f"{name}.weight"] = Tensor(init, requires_grad=True, name=f"{name}.weight")
            self.params[f"{name}.bias"] = Tensor(np.zeros(spec.filters, dtype=self.dtype), requires_grad=True, name=f"{name}.bias")
            if spec.spectral_norm:
                self.state[f"{name}.sn_u"] = np.zeros(0, dtype=self.dtype)
            pads = _pads_for(spec, h, w)
            oh, ow = T._conv_geometry(h, w, k, k, spec.stride, spec.stride, pads)
            return (spec.filters, oh, ow)
        if spec.kind == "conv2d-transpose":
            if len(shape) != 3:
                raise ShapeError(f"conv2d-transpose expects (C,H,W) input, got {shape}")
            c, h, w = shape
            k = spec.kernel
            if spec.out_shape is None:
                spec.out_shape = (h * spec.stride, w * spec.stride)
            oh, ow = spec.out_shape[-2], spec.out_shape[-1]
            fan_in = c * k * k
            fan_out = spec.filters * k * k
            wshape = (c, spec.filters, k, k)
            init = he_uniform(rng, wshape, fan_in, self.dtype) if he \
                else glorot_uniform(rng, wshape, fan_in, fan_out, self.dtype)
            self.params[f"{name}.weight"] = Tensor(init, requires_grad=True, name=f"{name}.weight")
            self.params[f"{name}.bias"] = Tensor(np.zeros(spec.filters, dtype=self.dtype), requires_grad=True, name=f"{name}.bias")
            if spec.spectral_norm:
                self.state[f"{name}.sn_u"] = np.zeros(0, dtype=self.dtype)
            pads = _pads_for(spec, h, w)
            got = T._conv_geometry(oh, ow, k, k, spec.stride, spec.stride, pads)
            if got != (h, w):
                raise ShapeError(f"out_shape {spec.out_shape} inconsistent with input {h}x{w} at stride {spec.stride}")
            return (spec.filters, oh, ow)
        if spec.kind == "batch-norm":
            c = shape[0]
            self.params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=self.dtype), requires_grad=True, name=f"{name}.gamma")
            self.params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=self.dtype), requires_grad=True, name=f"{name}.beta")
            self.state[f"{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
            self.state[f"{name}.running_var"] = np.ones(c, dtype=self.dtype)
            return shape
        if spec.kind == "reshape":
            want = int(np.prod(spec.out_shape))
            have = int(np.prod(shape))
            if want != have:
                raise ShapeError(f"reshape to {spec.out_shape} incompatible with input {shape}")
            return spec.out_shape
        if spec.kind == "flatten":
            return (int(np.prod(shape)),)
        if spec.kind == "global-avg-pool":
            if len(shape) != 3:
                raise ShapeError(f"global-avg-pool expects (C,H,W), got {shape}")
            return (shape[0],)
        if spec.kind == "avg-pool":
            c, h, w = shape
            k = spec.kernel
            if h % k or w % k:
                raise ShapeError(f"avg-pool {k}x{k} needs divisible spatial dims, got {h}x{w}")
            return (c, h // k, w // k)
        if spec.kind in ("dropout", "gaussian-noise", "activation"):
            return shape
        if spec.kind == "resize":
            if len(shape) != 3:
                raise ShapeError(f"resize expects (C,H,W), got {shape}")
            return (shape[0], spec.out_shape[-2], spec.out_shape[-1])
        raise ShapeError(f"unhandled layer kind {spec.kind!r}")

    # -- forward --------------------------------------------------------------

    def forward(self, x: Tensor | np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None,
                taps: dict[int, Tensor] | None = None) -> Tensor:
        """Run the net. ``taps`` collects outputs of the given layer indices."""
        x = T.astensor(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match declared {self.input_shape}")
        if training and rng is None and any(s.kind in ("dropout", "gaussian-noise") for s in self.layers):
            raise ValueError("training-mode forward through stochastic layers needs an rng")
        for i, spec in enumerate(self.layers):
            name = f"L{i:02d}.{spec.kind}"
            try:
                x = self._forward_layer(name, spec, x, training, rng)
            except ShapeError as err:
                raise LayerError(i, spec.kind, str(err)) from err
            if taps is not None and i in taps:
                taps[i] = x
        return x

    def __call__(self, x, **kwargs) -> Tensor:
        return self.forward(x, **kwargs)

    def _weight(self, name: str, spec: LayerSpec, training: bool) -> Tensor:
        w = self.params[f"{name}.weight"]
        if spec.spectral_norm:
            key = f"{name}.sn_u"
            state = self.state.get(key)
            if state is not None and state.size == 0:
                state = None
            iters = 3 if state is None else 1
            w, u = spectral_normalize(w, power_iters=iters, state=state)
            if training:
                self.state[key] = u
            elif state is None:
                self.state[key] = u
        return w

    def _forward_layer(self, name, spec, x, training, rng) -> Tensor:
        if spec.kind == "dense":
            w = self._weight(name, spec, training)
            b = self.params[f"{name}.bias"]
            if x.ndim != 2:
                raise ShapeError(f"dense expects (B,F) input, got {x.shape}")
            return T.add(T.matmul(x, w), b)
        if spec.kind == "conv2d":
            w = self._weight(name, spec, training)
            b = self.params[f"{name}.bias"]
            pads = _pads_for(spec, x.shape[2], x.shape[3])
            return T.conv2d(x, w, b, stride=spec.stride, pads=pads)
        if spec.kind == "conv2d-transpose":
            w = self._weight(name, spec, training)
            b = self.params[f"{name}.bias"]
            oh, ow = spec.out_shape[-2], spec.out_shape[-1]
            pads = _pads_for(spec, x.shape[2], x.shape[3])
            return T.conv2d_transpose(x, w, b, stride=spec.stride, pads=pads, out_hw=(oh, ow))
        if spec.kind == "batch-norm":
            return self._batch_norm(name, spec, x, training)
        if spec.kind == "reshape":
            return T.reshape(x, (x.shape[0],) + spec.out_shape)
        if spec.kind == "flatten":
            return T.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        if spec.kind == "global-avg-pool":
            return T.global_avg_pool(x)
        if spec.kind == "avg-pool":
            return T.avg_pool2d(x, spec.kernel)
        if spec.kind == "dropout":
            if not training or spec.rate == 0.0:
                return x
            keep = 1.0 - spec.rate
            mask = (rng.random(x.shape) < keep).astype(x.data.dtype) / keep
            return T.mul(x, Tensor(mask))
        if spec.kind == "gaussian-noise":
            if not training or spec.std == 0.0:
                return x
            noise = rng.normal(0.0, spec.std, size=x.shape).astype(x.data.dtype)
            return T.add(x, Tensor(noise))
        if spec.kind == "activation":
            if spec.activation == "linear":
                return x
            if spec.activation == "relu":
                return T.relu(x)
            if spec.activation == "leaky-relu":
                return T.leaky_relu(x, spec.alpha)
            if spec.activation == "tanh":
                return T.tanh(x)
            if spec.activation == "sigmoid":
                return T.sigmoid(x)
        if spec.kind == "resize":
            return T.resize_nearest(x, (spec.out_shape[-2], spec.out_shape[-1]))
        raise ShapeError(f"unhandled layer kind {spec.kind!r}")

    def _batch_norm(self, name, spec, x, training) -> Tensor:
        gamma = self.params[f"{name}.gamma"]
        beta = self.params[f"{name}.beta"]
        eps = 1e-5
        if x.ndim == 4:
            axes = (0, 2, 3)
            view = (1, -1, 1, 1)
        elif x.ndim == 2:
            axes = (0,)
            view = (1, -1)
        else:
            raise ShapeError(f"batch-norm expects 2-D or 4-D input, got {x.shape}")
        c = x.shape[1]
        gshape = tuple(c if v == -1 else 1 for v in view)
        if training:
            mean = T.tmean(x, axis=axes, keepdims=True)
            centered = T.sub(x, mean)
            var = T.tmean(T.mul(centered, centered), axis=axes, keepdims=True)
            m = spec.momentum
            rm, rv = self.state[f"{name}.running_mean"], self.state[f"{name}.running_var"]
            self.state[f"{name}.running_mean"] = (m * rm + (1 - m) * mean.data.reshape(c)).astype(rm.dtype)
            self.state[f"{name}.running_var"] = (m * rv + (1 - m) * var.data.reshape(c)).astype(rv.dtype)
            inv = T.power(T.add(var, eps), -0.5)
            xhat = T.mul(centered, inv)
        else:
            rm = Tensor(self.state[f"{name}.running_mean"].reshape(gshape))
            rv = Tensor(self.state[f"{name}.running_var"].reshape(gshape))
            xhat = T.mul(T.sub(x, rm), T.power(T.add(rv, eps), -0.5))
        return T.add(T.mul(xhat, T.reshape(gamma, gshape)), T.reshape(beta, gshape))

    # -- parameter access -------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy_weights_from(self, other: "Network") -> None:
        for k, v in other.params.items():
            self.params[k].data = v.data.copy()
        for k, v in other.state.items():
            self.state[k] = v.copy()

    def snapshot(self) -> dict:
        return {
            "params": {k: v.data.copy() for k, v in self.params.items()},
            "state": {k: v.copy() for k, v in self.state.items()},
        }

    def restore(self, snap: dict) -> None:
        for k, v in snap["params"].items():
            self.params[k].data = v.copy()
        self.state = {k: v.copy() for k, v in snap["state"].items()}
