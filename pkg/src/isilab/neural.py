"""Dense MLPs, parameter store, Adam optimizer and checkpoint container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient turns non-finite; carries the seed."""

    def __init__(self, message, seed=None):
        super().__init__(message if seed is None else f"{message} (batch seed {seed})")
        self.seed = seed


def glorot_init(fan_in, fan_out, rng):
    """Normal Glorot matrix of shape (fan_out, fan_in), variance 2/(fan_in+fan_out)."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan dimensions must be positive, got ({fan_in}, {fan_out})")
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_out, fan_in))


class ParameterStore:
    """Flat name -> leaf Tensor registry shared by model, optimizer and I/O."""

    def __init__(self):
        self._params: dict[str, ad.Tensor] = {}

    def add(self, name, array):
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = ad.Tensor(np.array(array, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def as_arrays(self):
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_arrays(self, arrays, strict=True):
        for k, v in self._params.items():
            if k in arrays:
                a = np.asarray(arrays[k], dtype=np.float64)
                if a.shape != v.data.shape:
                    raise ValueError(f"shape mismatch for {k}: {a.shape} vs {v.data.shape}")
                v.data = a.copy()
            elif strict:
                raise KeyError(f"checkpoint is missing parameter {k}")

    def num_parameters(self):
        return sum(v.data.size for v in self._params.values())


class Mlp:
    """Fully connected network: ReLU hidden layers, linear output.

    Weight matrices are stored output-major, shape (dims[k+1], dims[k]).
    """

    def __init__(self, layer_dims, store: ParameterStore, name, rng):
        if any(d < 1 for d in layer_dims) or len(layer_dims) < 2:
            raise ValueError(f"bad layer dims {layer_dims}")
        self.layer_dims = list(layer_dims)
        self.weights = []
        self.biases = []
        for k in range(len(layer_dims) - 1):
            w = store.add(f"{name}.w{k}", glorot_init(layer_dims[k], layer_dims[k + 1], rng))
            b = store.add(f"{name}.b{k}", np.zeros(layer_dims[k + 1]))
            self.weights.append(w)
            self.biases.append(b)

    def __call__(self, x):
        """Forward pass; x is a Tensor or array of shape (..., layer_dims[0])."""
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != self.layer_dims[0]:
            raise ValueError(
                f"input width {x.shape[-1]} does not match layer dims {self.layer_dims}"
            )
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, ad.transpose2d(w)), b)
            if k != last:
                h = ad.relu(h)
        return h

    def forward_terms(self, terms):
        """Forward pass with the first layer split over input blocks.

        ``terms``: iterable of (tensor, column_offset) pairs; each tensor
        multiplies the matching column slice of the first weight matrix.
        Algebraically identical to concatenating the blocks, but lets
        broadcastable blocks (shared attributes) stay small.
        """
        h = None
        for t, off in terms:
            w = ad.transpose2d(ad.slice_cols(self.weights[0], off, off + t.shape[-1]))
            part = ad.matmul(t, w)
            h = part if h is None else ad.add(h, part)
        h = ad.add(h, self.biases[0])
        last = len(self.weights) - 1
        if last > 0:
            h = ad.relu(h)
        for k in range(1, last + 1):
            h = ad.add(ad.matmul(h, ad.transpose2d(self.weights[k])), self.biases[k])
            if k != last:
                h = ad.relu(h)
        return h

    def num_parameters(self):
        return sum(w.data.size + b.data.size for w, b in zip(self.weights, self.biases))


def mlp_forward(mlp: Mlp, x):
    """Plain-array forward pass (no tape), for oracles and inference."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != mlp.layer_dims[0]:
        raise ValueError("input width mismatch")
    last = len(mlp.weights) - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.data.T + b.data
        if k != last:
            h = np.maximum(h, 0.0)
    return h


@dataclass
class GradientRecord:
    """Loss value plus one gradient array per trainable parameter."""

    loss_value: float
    gradients: dict[str, np.ndarray]


def backward(loss: ad.Tensor, store: ParameterStore, batch_seed=None) -> GradientRecord:
    """Run reverse mode from a scalar loss over every parameter in the store.

    Parameters not reached by the loss get zero gradients so the record is
    always complete.
    """
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergedError("non-finite loss", seed=batch_seed)
    store.zero_grad()
    loss.backward()
    grads = {}
    for name, t in store.items():
        grads[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
    return GradientRecord(loss_value=value, gradients=grads)


@dataclass
class AdamState:
    """Adam moments; created lazily to match parameter shapes."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(state: AdamState, store: ParameterStore, record: GradientRecord):
    """One bias-corrected Adam update, in place on the store."""
    for name, g in record.gradients.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, param in store.items():
        g = record.gradients[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        param.data = param.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return state


def finite_difference_check(loss_fn, store: ParameterStore, eps=1e-4, rng=None,
                            max_coords_per_param=8, margin_factor=10.0):
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` re-evaluates the scalar loss from the current parameter
    values.  Returns the worst relative error over the probed coordinates.
    Raises if any ReLU preactivation sits within ``margin_factor * eps``
    of its kink, since finite differences are meaningless there; callers
    should pick a different seed in that case.
    """
    with ad.track_relu_margin() as tracker:
        loss_fn()
    margin = tracker.margin
    if margin < margin_factor * eps:
        raise ValueError(
            f"ReLU preactivation within {margin:.2e} of a kink; "
            "resample the test point before finite differencing"
        )
    record = backward(loss_fn(), store)
    worst = 0.0
    for name, tensor in store.items():
        flat = tensor.data.ravel()
        n = flat.size
        if rng is None or n <= max_coords_per_param:
            idxs = range(min(n, max_coords_per_param))
        else:
            idxs = rng.choice(n, size=max_coords_per_param, replace=False)
        g = record.gradients[name].ravel()
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            denom = max(abs(fd), abs(g[i]), 1e-6)
            worst = max(worst, abs(fd - g[i]) / denom)
    return worst


# -- checkpoint container -------------------------------------------------

CHECKPOINT_MAGIC = b"ISILABCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict):
    """Write named float64 arrays to a versioned binary container."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype=np.float64)
            nm = name.encode("utf-8")
            f.write(struct.pack("<I", len(nm)))
            f.write(nm)
            f.write(struct.pack("<I", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<Q", d))
            f.write(a.astype("<f8").tobytes(order="C"))


def load_checkpoint(path):
    """Read a container written by :func:`save_checkpoint`."""
    arrays = {}
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            hdr = f.read(4)
            if not hdr:
                break
            (nlen,) = struct.unpack("<I", hdr)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays
