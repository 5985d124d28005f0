"""Minimal feedforward neural network engine.

Tensors are shape + flat row-major float32 buffers. All parameter storage and
wire/file formats are float32; internal accumulation (matmuls, reductions,
optimizer state) runs in float64 for stability, with results cast back to
float32 at each layer boundary so runs are bit-reproducible.

Weight initialization uses a seeded xorshift64* generator (see Xorshift64Star)
drawing uniformly from +/- sqrt(6 / (fan_in + fan_out)); biases start at zero.
Two networks built from the same layer specs and seed have identical bytes.

Model file format "TCN1": magic bytes 54 43 4E 31, u32 little-endian layer
count, then per layer a u8 kind tag (0=dense, 1=relu, 2=softmax), u32 in_dim,
u32 out_dim; followed by, for each dense layer in order, row-major f32
little-endian weights then the bias vector.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

F32 = np.float32

MAGIC = b"TCN1"
_KIND_TAGS = {"dense": 0, "relu": 1, "softmax": 2}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}

_U64_MASK = (1 << 64) - 1


class DimensionError(ValueError):
    """Shape or dimension-chain mismatch."""


class StateError(RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class FormatError(ValueError):
    """Malformed model file; message carries the byte offset."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite gradients or losses)."""


class InvalidTemperatureError(ValueError):
    """Softmax temperature must be strictly positive."""


class Tensor:
    """Shape plus a flat row-major float32 buffer.

    Invariants: the buffer length equals the product of the dims, and every
    element is finite.
    """

    __slots__ = ("shape", "data")

    def __init__(self, shape, data):
        shape = tuple(int(s) for s in shape)
        if not shape or any(s <= 0 for s in shape):
            raise DimensionError(f"invalid tensor shape {shape}")
        buf = np.ascontiguousarray(data, dtype=F32).reshape(-1)
        expect = math.prod(shape)
        if buf.size != expect:
            raise DimensionError(
                f"buffer has {buf.size} elements, shape {shape} needs {expect}"
            )
        if not np.all(np.isfinite(buf)):
            raise ValueError("tensor contains non-finite values")
        self.shape = shape
        self.data = buf

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        arr = np.asarray(arr)
        return cls(arr.shape, arr.astype(F32, copy=False).ravel())

    def view(self) -> np.ndarray:
        """Read-only-by-convention ndarray view with the tensor's shape."""
        return self.data.reshape(self.shape)

    def copy(self) -> "Tensor":
        return Tensor(self.shape, self.data.copy())

    def tobytes(self) -> bytes:
        return self.data.astype("<f4", copy=False).tobytes()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Xorshift64Star:
    """xorshift64* PRNG: x ^= x>>12; x ^= x<<25; x ^= x>>27; out = x * M.

    M = 0x2545F4914F6CDD1D. Uniform doubles in [0, 1) take the top 53 bits.
    A zero seed is remapped to a fixed odd constant (zero is absorbing).
    """

    MULT = 0x2545F4914F6CDD1D

    def __init__(self, seed: int):
        self.state = int(seed) & _U64_MASK
        if self.state == 0:
            self.state = 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _U64_MASK
        x ^= x >> 27
        self.state = x
        return (x * self.MULT) & _U64_MASK

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform_array(self, n: int, lo: float, hi: float) -> np.ndarray:
        span = hi - lo
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = lo + span * self.uniform()
        return out


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.kind not in _KIND_TAGS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise DimensionError(f"layer dims must be positive: {self}")
        if self.kind in ("relu", "softmax") and self.in_dim != self.out_dim:
            raise DimensionError(f"{self.kind} layer must have in_dim == out_dim")

    @property
    def param_count(self) -> int:
        if self.kind == "dense":
            return self.in_dim * self.out_dim + self.out_dim
        return 0


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("dense", in_dim, out_dim)


def relu(dim: int) -> LayerSpec:
    return LayerSpec("relu", dim, dim)


def softmax(dim: int) -> LayerSpec:
    return LayerSpec("softmax", dim, dim)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not (0.0 < self.learning_rate <= 1.0):
            raise ValueError("learning_rate must be in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Network:
    """Ordered layer stack with per-dense-layer weights and biases.

    Parameters are only mutated through optimizer steps. forward() caches
    activations for a subsequent backward() on the same batch.
    """

    def __init__(self, layers, seed: int = 0, params=None):
        layers = list(layers)
        if not layers:
            raise DimensionError("network needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].out_dim != layers[i + 1].in_dim:
                raise DimensionError(
                    f"layer {i} out_dim {layers[i].out_dim} != "
                    f"layer {i + 1} in_dim {layers[i + 1].in_dim}"
                )
        self.layers = layers
        self.rng_seed = int(seed) & _U64_MASK
        if params is None:
            params = self._init_params()
        else:
            params = [None if p is None else (np.array(p[0], dtype=F32),
                                              np.array(p[1], dtype=F32))
                      for p in params]
            self._check_param_shapes(params)
        self.params = params
        self._cache = None

    def _init_params(self):
        rng = Xorshift64Star(self.rng_seed)
        params = []
        for spec in self.layers:
            if spec.kind != "dense":
                params.append(None)
                continue
            limit = math.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            w = rng.uniform_array(spec.in_dim * spec.out_dim, -limit, limit)
            w = w.reshape(spec.in_dim, spec.out_dim).astype(F32)
            b = np.zeros(spec.out_dim, dtype=F32)
            params.append((w, b))
        return params

    def _check_param_shapes(self, params):
        if len(params) != len(self.layers):
            raise DimensionError("params list does not match layer count")
        for i, spec in enumerate(self.layers):
            if spec.kind == "dense":
                w, b = params[i]
                if w.shape != (spec.in_dim, spec.out_dim) or b.shape != (spec.out_dim,):
                    raise DimensionError(f"bad parameter shapes at layer {i}")
            elif params[i] is not None:
                raise DimensionError(f"layer {i} ({spec.kind}) takes no params")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "Network":
        return Network(self.layers, self.rng_seed,
                       [None if p is None else (p[0].copy(), p[1].copy())
                        for p in self.params])

    def param_bytes(self) -> bytes:
        chunks = []
        for p in self.params:
            if p is not None:
                chunks.append(p[0].astype("<f4", copy=False).tobytes())
                chunks.append(p[1].astype("<f4", copy=False).tobytes())
        return b"".join(chunks)

    def forward(self, x: Tensor) -> Tensor:
        a = x.view()
        if a.ndim != 2:
            raise DimensionError(f"expected 2-d input, got shape {x.shape}")
        cache = []
        for i, spec in enumerate(self.layers):
            if a.shape[1] != spec.in_dim:
                raise DimensionError(
                    f"layer {i} ({spec.kind}) expects width {spec.in_dim}, "
                    f"got {a.shape[1]}"
                )
            if spec.kind == "dense":
                w, b = self.params[i]
                cache.append(("dense", a))
                a = (a.astype(np.float64) @ w.astype(np.float64)
                     + b.astype(np.float64)).astype(F32)
            elif spec.kind == "relu":
                cache.append(("relu", a))
                a = np.maximum(a, F32(0.0))
            else:  # softmax
                z = a.astype(np.float64)
                z = z - z.max(axis=1, keepdims=True)
                e = np.exp(z)
                p = (e / e.sum(axis=1, keepdims=True)).astype(F32)
                cache.append(("softmax", p))
                a = p
        self._cache = cache
        return Tensor.from_array(a)

    def backward(self, upstream: Tensor, from_logits: bool = False):
        """Backpropagate upstream gradient through the cached activations.

        Returns (grads, input_grad): grads is a per-layer list of (dW, db)
        tuples (None for parameterless layers), input_grad the gradient with
        respect to the network input. With from_logits=True a trailing softmax
        layer is skipped, i.e. upstream is already the gradient on the logits.
        """
        if self._cache is None:
            raise StateError("backward called before forward")
        g = upstream.view().astype(np.float64)
        grads = [None] * len(self.layers)
        stop = len(self.layers)
        if from_logits and self.layers[-1].kind == "softmax":
            stop -= 1
        for i in range(stop - 1, -1, -1):
            kind, cached = self._cache[i]
            if kind == "dense":
                w, _ = self.params[i]
                a64 = cached.astype(np.float64)
                dw = a64.T @ g
                db = g.sum(axis=0)
                grads[i] = (dw.astype(F32), db.astype(F32))
                g = g @ w.astype(np.float64).T
            elif kind == "relu":
                g = g * (cached > 0)
            else:  # softmax; cached is the output p
                p = cached.astype(np.float64)
                g = p * (g - (g * p).sum(axis=1, keepdims=True))
        return grads, Tensor.from_array(g)


def softmax_temperature(z: Tensor, temperature: float) -> Tensor:
    """Row-wise softmax of logits divided by a temperature.

    temperature 1 is the plain softmax; larger values flatten the rows.
    """
    if temperature <= 0:
        raise InvalidTemperatureError(f"temperature must be > 0, got {temperature}")
    a = z.view().astype(np.float64) / float(temperature)
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return Tensor.from_array(e / e.sum(axis=1, keepdims=True))


def mse_loss(d: Tensor, d_hat: Tensor):
    """Mean squared error over all samples and dimensions.

    Returns (loss, grad) with grad taken with respect to d_hat. The mean runs
    over batch * width so losses stay comparable across chunk sizes.
    """
    if d.shape != d_hat.shape:
        raise DimensionError(f"shape mismatch {d.shape} vs {d_hat.shape}")
    a = d.view().astype(np.float64)
    b = d_hat.view().astype(np.float64)
    diff = b - a
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, Tensor.from_array(grad)


def cross_entropy_loss(y: Tensor, y_hat: Tensor):
    """Negative log-likelihood of one-hot targets under predicted probabilities.

    Returns (loss, grad_logits): the gradient is taken with respect to the
    logits feeding the softmax that produced y_hat (the fused, stable path).
    Probabilities for the true class are clamped at 1e-12.
    """
    if y.shape != y_hat.shape:
        raise DimensionError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    t = y.view().astype(np.float64)
    p = y_hat.view().astype(np.float64)
    m = t.shape[0]
    picked = np.clip((p * t).sum(axis=1), 1e-12, None)
    loss = float(-np.log(picked).mean())
    grad_logits = (p - t) / m
    return loss, Tensor.from_array(grad_logits)


def bce_with_logits(logits: Tensor, target: float | np.ndarray):
    """Binary cross-entropy on raw logits (sigmoid fused for stability).

    target may be a scalar label applied to the whole batch or a per-sample
    array. Returns (loss, grad_logits) with the mean taken over the batch.
    """
    z = logits.view().astype(np.float64).reshape(-1)
    y = np.broadcast_to(np.asarray(target, dtype=np.float64), z.shape)
    # max(z,0) - z*y + log(1 + exp(-|z|))
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    grad = ((p - y) / z.size).reshape(logits.shape)
    return loss, Tensor.from_array(grad)


def _finite_or_raise(grads, context: str):
    for i, g in enumerate(grads):
        if g is None:
            continue
        if not (np.all(np.isfinite(g[0])) and np.all(np.isfinite(g[1]))):
            raise TrainingError(f"non-finite gradient at layer {i} ({context})")


class SgdOptimizer:
    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate

    def step(self, net: Network, grads):
        _finite_or_raise(grads, "sgd step")
        for i, g in enumerate(grads):
            if g is None:
                continue
            w, b = net.params[i]
            dw, db = g
            w64 = w.astype(np.float64) - self.lr * dw.astype(np.float64)
            b64 = b.astype(np.float64) - self.lr * db.astype(np.float64)
            net.params[i] = (w64.astype(F32), b64.astype(F32))


class AdamOptimizer:
    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, net: Network, grads):
        _finite_or_raise(grads, "adam step")
        self.t += 1
        b1, b2 = self.BETA1, self.BETA2
        for i, g in enumerate(grads):
            if g is None:
                continue
            updated = list(net.params[i])
            for j in range(2):
                key = (i, j)
                g64 = g[j].astype(np.float64)
                m = self.m.get(key)
                v = self.v.get(key)
                if m is None:
                    m = np.zeros_like(g64)
                    v = np.zeros_like(g64)
                m = b1 * m + (1 - b1) * g64
                v = b2 * v + (1 - b2) * g64 * g64
                self.m[key] = m
                self.v[key] = v
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                new = (updated[j].astype(np.float64)
                       - self.lr * mhat / (np.sqrt(vhat) + self.EPS))
                updated[j] = new.astype(F32)
            net.params[i] = tuple(updated)


def make_optimizer(cfg: TrainConfig):
    return AdamOptimizer(cfg) if cfg.optimizer == "adam" else SgdOptimizer(cfg)


def optimizer_step(net: Network, grads, cfg: TrainConfig, opt=None):
    """Apply one optimizer update in place; returns the optimizer for reuse."""
    if opt is None:
        opt = make_optimizer(cfg)
    opt.step(net, grads)
    return opt


def fit(net: Network, x: Tensor, target: Tensor, cfg: TrainConfig,
        loss: str = "cross_entropy"):
    """Minibatch-train a network in place; returns the per-epoch loss curve.

    loss is "cross_entropy" (target one-hot, softmax head assumed) or "mse"
    (target a regression tensor). Batch order is drawn from a generator seeded
    with cfg.seed, so runs are bit-reproducible.
    """
    if loss not in ("cross_entropy", "mse"):
        raise ValueError(f"unknown loss {loss!r}")
    n = x.shape[0]
    if target.shape[0] != n:
        raise DimensionError("input and target batch sizes differ")
    xv = x.view()
    tv = target.view()
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    curve = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb = Tensor.from_array(xv[idx])
            tb = Tensor.from_array(tv[idx])
            out = net.forward(xb)
            if loss == "cross_entropy":
                batch_loss, grad = cross_entropy_loss(tb, out)
                grads, _ = net.backward(grad, from_logits=True)
            else:
                batch_loss, grad = mse_loss(tb, out)
                grads, _ = net.backward(grad)
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss {batch_loss} in epoch {len(curve)}")
            opt.step(net, grads)
            total += batch_loss * len(idx)
        curve.append(total / n)
    return curve


def save_network(net: Network, path) -> None:
    """Write a network in the TCN1 format (see module docstring)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(net.layers)))
        for spec in net.layers:
            f.write(struct.pack("<BII", _KIND_TAGS[spec.kind],
                                spec.in_dim, spec.out_dim))
        for spec, p in zip(net.layers, net.params):
            if spec.kind == "dense":
                w, b = p
                f.write(w.astype("<f4", copy=False).tobytes())
                f.write(b.astype("<f4", copy=False).tobytes())


def load_network(path) -> Network:
    """Read a TCN1 model file; raises FormatError with a byte offset on damage."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic bytes at offset 0: {blob[:4]!r}")
    off = 4
    if len(blob) < off + 4:
        raise FormatError(f"truncated header at offset {off}")
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    if count == 0:
        raise FormatError("layer count is zero at offset 4")
    specs = []
    for i in range(count):
        if len(blob) < off + 9:
            raise FormatError(f"truncated layer table at offset {off}")
        tag, ind, outd = struct.unpack_from("<BII", blob, off)
        if tag not in _TAG_KINDS:
            raise FormatError(f"unknown layer tag {tag} at offset {off}")
        try:
            specs.append(LayerSpec(_TAG_KINDS[tag], ind, outd))
        except (DimensionError, ValueError) as exc:
            raise FormatError(f"invalid layer at offset {off}: {exc}") from exc
        off += 9
    for i in range(count - 1):
        if specs[i].out_dim != specs[i + 1].in_dim:
            raise FormatError(
                f"dimension chain broken between layers {i} and {i + 1}"
            )
    params = []
    for spec in specs:
        if spec.kind != "dense":
            params.append(None)
            continue
        wn = spec.in_dim * spec.out_dim
        need = 4 * (wn + spec.out_dim)
        if len(blob) < off + need:
            raise FormatError(f"truncated parameters at offset {off}")
        w = np.frombuffer(blob, dtype="<f4", count=wn, offset=off)
        off += 4 * wn
        b = np.frombuffer(blob, dtype="<f4", count=spec.out_dim, offset=off)
        off += 4 * spec.out_dim
        params.append((w.reshape(spec.in_dim, spec.out_dim).copy(), b.copy()))
    if off != len(blob):
        raise FormatError(f"trailing bytes at offset {off}")
    return Network(specs, seed=0, params=params)
