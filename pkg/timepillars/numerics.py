"""
Dense numeric kernels for the detection network.

Arrays are plain numpy ndarrays laid out batch x height x width x channels
(NHWC). Point features use (N, C). Every kernel comes as a forward function
that returns ``(output, cache)`` and a matching ``*_backward`` function, and
the layer classes at the bottom of the module wrap those pairs around named
parameters held in a :class:`ParamStore`.

32-bit floats are the default; wrap model construction in
``precision(np.float64)`` for finite-difference verification.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True

CHECKPOINT_FORMAT = "timepillars-checkpoint"
CHECKPOINT_VERSION = 1


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for freshly created parameters."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextmanager
def no_grad():
    """Forward passes inside this block record no backward caches."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled():
    return _GRAD_ENABLED


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def same_padding(size, kernel, stride):
    """
    Padding (before, after) so that a strided convolution yields ceil(size / stride).

    The odd pixel, when there is one, goes after.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _pads(height, width, kh, kw, stride, padding):
    if padding == "same":
        return same_padding(height, kh, stride), same_padding(width, kw, stride)
    if padding == "valid":
        return (0, 0), (0, 0)
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _check_conv(x, w, stride, in_axis):
    if x.ndim != 4:
        raise ValueError(f"expected a 4D NHWC array, got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"expected a 4D kernel (kh, kw, c_in, c_out), got shape {w.shape}")
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    if x.shape[-1] != w.shape[in_axis]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[-1]} channels, kernel expects {w.shape[in_axis]}"
        )


def _window(array, i, j, stride, out_h, out_w):
    return array[:, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride, :]


def _correlate(xp, w, stride, out_h, out_w):
    kh, kw, _, c_out = w.shape
    out = np.zeros((xp.shape[0], out_h, out_w, c_out), dtype=np.result_type(xp, w))
    # fixed (i, j) order keeps the reduction order deterministic
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, stride, out_h, out_w) @ w[i, j]
    return out


def _correlate_adjoint(dout, w, stride, padded_shape):
    kh, kw = w.shape[:2]
    out_h, out_w = dout.shape[1:3]
    dxp = np.zeros(padded_shape, dtype=np.result_type(dout, w))
    for i in range(kh):
        for j in range(kw):
            _window(dxp, i, j, stride, out_h, out_w)[...] += dout @ w[i, j].T
    return dxp


def _kernel_grad(xp, dout, stride, kh, kw):
    out_h, out_w = dout.shape[1:3]
    dw = np.zeros((kh, kw, xp.shape[-1], dout.shape[-1]), dtype=np.result_type(xp, dout))
    for i in range(kh):
        for j in range(kw):
            dw[i, j] = np.tensordot(_window(xp, i, j, stride, out_h, out_w), dout, axes=([0, 1, 2], [0, 1, 2]))
    return dw


def conv2d(x, w, b=None, stride=1, padding="same"):
    """
    2D cross-correlation in NHWC layout.

    Args:
        x: Input, shape (B, H, W, C_in)
        w: Kernel, shape (kh, kw, C_in, C_out)
        b: Optional bias, shape (C_out,)
        stride: Step of the sliding window (>= 1)
        padding: "same" (output ceil(H / stride)) or "valid"

    Returns:
        (output, cache) where output has shape (B, H_out, W_out, C_out)
    """
    _check_conv(x, w, stride, in_axis=2)
    if b is not None and b.shape != (w.shape[3],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[3]} output channels")
    kh, kw = w.shape[:2]
    (top, bottom), (left, right) = _pads(x.shape[1], x.shape[2], kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    out_h = (xp.shape[1] - kh) // stride + 1
    out_w = (xp.shape[2] - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"kernel {kh}x{kw} is larger than the padded input {xp.shape[1:3]}")
    out = _correlate(xp, w, stride, out_h, out_w)
    if b is not None:
        out += b
    return out, (xp, w, stride, (top, left), x.shape)


def conv2d_backward(dout, cache):
    """Returns (dx, dw, db) for :func:`conv2d`."""
    xp, w, stride, (top, left), x_shape = cache
    kh, kw = w.shape[:2]
    dxp = _correlate_adjoint(dout, w, stride, xp.shape)
    dx = dxp[:, top:top + x_shape[1], left:left + x_shape[2], :]
    dw = _kernel_grad(xp, dout, stride, kh, kw)
    db = dout.sum(axis=(0, 1, 2))
    return dx, dw, db


def conv2d_transpose(y, w, b=None, stride=1, padding="same", output_size=None):
    """
    Transposed convolution, the adjoint of :func:`conv2d` with the same kernel.

    The kernel keeps the conv2d layout (kh, kw, C_out, C_in): it maps the
    C_in channels of ``y`` to C_out output channels, so that
    <conv2d(x, w), y> == <x, conv2d_transpose(y, w)> with matching stride and
    padding (bias excluded).

    Args:
        y: Input, shape (B, H, W, C_in)
        w: Kernel, shape (kh, kw, C_out, C_in)
        b: Optional bias, shape (C_out,)
        stride: Upsampling factor
        padding: "same" or "valid", interpreted as for the forward convolution
        output_size: (H_out, W_out); defaults to (H * stride, W * stride) for
            "same" and ((H - 1) * stride + kh, ...) for "valid"

    Returns:
        (output, cache)
    """
    _check_conv(y, w, stride, in_axis=3)
    if b is not None and b.shape != (w.shape[2],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[2]} output channels")
    kh, kw = w.shape[:2]
    if output_size is None:
        if padding == "same":
            output_size = (y.shape[1] * stride, y.shape[2] * stride)
        else:
            output_size = ((y.shape[1] - 1) * stride + kh, (y.shape[2] - 1) * stride + kw)
    out_h, out_w = output_size
    (top, bottom), (left, right) = _pads(out_h, out_w, kh, kw, stride, padding)
    padded_shape = (y.shape[0], out_h + top + bottom, out_w + left + right, w.shape[2])
    if (padded_shape[1] - kh) // stride + 1 != y.shape[1] or (padded_shape[2] - kw) // stride + 1 != y.shape[2]:
        raise ValueError(
            f"output size {output_size} is inconsistent with input {y.shape[1:3]} at stride {stride}"
        )
    dxp = _correlate_adjoint(y, w, stride, padded_shape)
    out = dxp[:, top:top + out_h, left:left + out_w, :]
    if b is not None:
        out = out + b
    return out, (y, w, stride, ((top, bottom), (left, right)))


def conv2d_transpose_backward(dout, cache):
    """Returns (dy, dw, db) for :func:`conv2d_transpose`."""
    y, w, stride, ((top, bottom), (left, right)) = cache
    kh, kw = w.shape[:2]
    dp = np.pad(dout, ((0, 0), (top, bottom), (left, right), (0, 0)))
    dy = _correlate(dp, w, stride, y.shape[1], y.shape[2])
    dw = _kernel_grad(dp, y, stride, kh, kw)
    db = dout.sum(axis=(0, 1, 2))
    return dy, dw, db


# ---------------------------------------------------------------------------
# Normalization and activations
# ---------------------------------------------------------------------------

def batchnorm(x, gamma, beta, running_mean, running_var, mode="train", eps=1e-5, momentum=0.1):
    """
    Batch normalization over every axis but the last (channels).

    In train mode the batch statistics are used and the running statistics
    are updated in place; in infer mode the running statistics are used.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise ValueError(f"batchnorm expects {gamma.shape[0]} channels, got {x.shape[-1]}")
    axes = tuple(range(x.ndim - 1))
    count = x.size // x.shape[-1] if x.shape[-1] else 0
    if mode == "train":
        if count == 0:
            raise ValueError("batchnorm in train mode needs at least one element per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    elif mode == "infer":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, gamma, inv_std, axes, count, mode)


def batchnorm_backward(dout, cache):
    """Returns (dx, dgamma, dbeta) for :func:`batchnorm`."""
    xhat, gamma, inv_std, axes, count, mode = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    dx = (inv_std / count) * (
        count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
    )
    return dx, dgamma, dbeta


ACTIVATIONS = ("relu", "sigmoid", "tanh", "softmax_channels")


def activation(x, kind):
    """Elementwise relu / sigmoid / tanh, or softmax over the last axis."""
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return expit(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softmax_channels":
        return softmax(x, axis=-1)
    raise ValueError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")


def activation_backward(dout, out, kind):
    """Gradient of :func:`activation` given its output (relu subgradient at 0 is 0)."""
    if kind == "relu":
        return dout * (out > 0)
    if kind == "sigmoid":
        return dout * out * (1.0 - out)
    if kind == "tanh":
        return dout * (1.0 - out * out)
    if kind == "softmax_channels":
        return out * (dout - (dout * out).sum(axis=-1, keepdims=True))
    raise ValueError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# Scatter-max
# ---------------------------------------------------------------------------

INVALID_CELL = -1


def scatter_max(features, cell_index, grid_shape):
    """
    Per-cell, per-channel maximum of point features on a 2D grid.

    Args:
        features: Point features, shape (N, C)
        cell_index: Flat cell index row * W + col per point, or INVALID_CELL
        grid_shape: (L, W)

    Returns:
        (grid, cache): grid has shape (L, W, C); empty cells hold 0
    """
    length, width = grid_shape
    n_cells = length * width
    features = np.asarray(features)
    idx = np.asarray(cell_index, dtype=np.int64)
    if features.ndim != 2:
        raise ValueError(f"point features must be (N, C), got shape {features.shape}")
    if idx.shape != (features.shape[0],):
        raise ValueError(f"cell_index shape {idx.shape} does not match {features.shape[0]} points")
    bad = (idx < INVALID_CELL) | (idx >= n_cells)
    if bad.any():
        raise ValueError(f"{int(bad.sum())} cell indices fall outside the {length}x{width} grid")

    n_points, channels = features.shape
    points = np.flatnonzero(idx != INVALID_CELL)
    cells = idx[points]
    feats = features[points]

    grid = np.full((n_cells, channels), -np.inf, dtype=features.dtype)
    np.maximum.at(grid, cells, feats)

    # lowest point index wins the gradient on exact ties
    winners = np.full((n_cells, channels), n_points, dtype=np.int64)
    rows, chans = np.nonzero(feats == grid[cells])
    np.minimum.at(winners, (cells[rows], chans), points[rows])

    occupied = np.bincount(cells, minlength=n_cells) > 0
    grid[~occupied] = 0
    winners[~occupied] = INVALID_CELL
    return grid.reshape(length, width, channels), (winners, n_points)


def scatter_max_backward(dgrid, cache):
    """Routes each cell's gradient to its argmax point."""
    winners, n_points = cache
    flat = dgrid.reshape(winners.shape)
    dfeat = np.zeros((n_points, winners.shape[1]), dtype=dgrid.dtype)
    cells, chans = np.nonzero(winners != INVALID_CELL)
    dfeat[winners[cells, chans], chans] = flat[cells, chans]
    return dfeat


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(forward, backward, arrays, eps=1e-6, samples=None, seed=0, floor=1e-2):
    """
    Compare analytic gradients against central finite differences.

    The scalar checked is sum(forward() * R) for a fixed random R; ``backward``
    receives R and must return the analytic gradient of every entry in
    ``arrays``. Arrays are perturbed in place, so ``forward`` has to read them
    by reference.

    Args:
        forward: Callable returning the output array
        backward: Callable mapping dout to {name: gradient}
        arrays: {name: float64 array} to perturb
        eps: Finite-difference step
        samples: Entries sampled per array (None = all)
        seed: Seed for R and for entry sampling
        floor: Norm below which the error is measured absolutely

    Returns:
        Max relative error over all arrays (inf when anything is non-finite)
    """
    rng = np.random.default_rng(seed)
    out = forward()
    proj = rng.standard_normal(np.shape(out))
    analytic = backward(proj)

    worst = 0.0
    for name, array in arrays.items():
        if array.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 arrays, {name!r} is {array.dtype}")
        flat = array.reshape(-1)
        if not np.shares_memory(flat, array):
            raise ValueError(f"array {name!r} must be contiguous to be perturbed in place")
        if samples is None or samples >= flat.size:
            entries = np.arange(flat.size)
        else:
            entries = rng.choice(flat.size, size=samples, replace=False)

        numeric = np.empty(len(entries))
        with no_grad():
            for n, i in enumerate(entries):
                original = flat[i]
                flat[i] = original + eps
                plus = float(np.sum(forward() * proj))
                flat[i] = original - eps
                minus = float(np.sum(forward() * proj))
                flat[i] = original
                numeric[n] = (plus - minus) / (2 * eps)

        exact = np.asarray(analytic[name]).reshape(-1)[entries]
        if not (np.all(np.isfinite(exact)) and np.all(np.isfinite(numeric))):
            return float("inf")
        scale = max(np.linalg.norm(exact), np.linalg.norm(numeric), floor)
        worst = max(worst, float(np.linalg.norm(exact - numeric) / scale))
    return worst


# ---------------------------------------------------------------------------
# Parameters and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    """A named tensor plus its gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray | None = None
    trainable: bool = True
    buffer: bool = False

    def accumulate(self, grad):
        if grad.shape != self.value.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match {self.name} {self.value.shape}")
        if self.buffer or not self.trainable:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.value.dtype)
        else:
            self.grad += grad

    def zero_grad(self):
        self.grad = None


class ParamStore:
    """Ordered collection of named parameters and buffers (the checkpoint keys)."""

    def __init__(self):
        self._params = {}

    def add(self, name, value, trainable=True, buffer=False):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        param = Parameter(name, np.ascontiguousarray(value), trainable=trainable and not buffer, buffer=buffer)
        self._params[name] = param
        return param

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def trainable(self):
        return [p for p in self._params.values() if p.trainable]

    def zero_grad(self):
        for param in self._params.values():
            param.zero_grad()

    def set_trainable(self, prefixes, trainable):
        """Freeze or unfreeze every non-buffer parameter under the given name prefixes."""
        touched = []
        for param in self._params.values():
            if not param.buffer and any(param.name.startswith(p) for p in prefixes):
                param.trainable = trainable
                touched.append(param.name)
        return touched

    def is_frozen(self, prefix):
        params = [p for p in self._params.values() if p.name.startswith(prefix) and not p.buffer]
        return bool(params) and not any(p.trainable for p in params)

    def state_dict(self):
        return {name: param.value.copy() for name, param in self._params.items()}

    def load_state_dict(self, state, strict=True):
        """
        Copy tensors by name.

        Returns:
            (missing, unexpected) name lists; with strict=True any mismatch,
            including shape mismatches, raises ValueError.
        """
        missing = [n for n in self._params if n not in state]
        unexpected = [n for n in state if n not in self._params]
        wrong_shape = [
            f"{n}: checkpoint {tuple(state[n].shape)} vs model {self._params[n].value.shape}"
            for n in state if n in self._params and tuple(state[n].shape) != self._params[n].value.shape
        ]
        if wrong_shape or (strict and (missing or unexpected)):
            problems = wrong_shape + [f"missing {n}" for n in missing if strict] + [f"unexpected {n}" for n in unexpected if strict]
            raise ValueError("checkpoint does not match the model:\n  " + "\n  ".join(problems))
        for name, value in state.items():
            if name in self._params:
                target = self._params[name].value
                target[...] = np.asarray(value, dtype=target.dtype)
        return missing, unexpected


def _checkpoint_paths(path):
    path = Path(path)
    return path.with_suffix(".json"), path.with_suffix(".bin")


def write_checkpoint(path, tensors, meta=None):
    """
    Write named tensors as one little-endian blob plus a JSON index.

    Args:
        path: Checkpoint path; ``.json`` and ``.bin`` siblings are written
        tensors: {name: ndarray}
        meta: JSON-serialisable metadata stored in the index

    Returns:
        (index_path, blob_path)
    """
    index_path, blob_path = _checkpoint_paths(path)
    index_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(blob_path, "wb") as blob:
        for name, value in tensors.items():
            array = np.ascontiguousarray(value)
            little = array.astype(array.dtype.newbyteorder("<"), copy=False)
            data = little.tobytes()
            blob.write(data)
            entries.append({
                "name": name,
                "shape": list(array.shape),
                "dtype": little.dtype.str,
                "offset": offset,
                "nbytes": len(data),
            })
            offset += len(data)
    index = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "blob": blob_path.name,
        "tensors": entries,
        "meta": meta or {},
    }
    with open(index_path, "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    return index_path, blob_path


def read_checkpoint(path):
    """Returns (tensors, meta) written by :func:`write_checkpoint`."""
    index_path, blob_path = _checkpoint_paths(path)
    if not index_path.exists():
        raise FileNotFoundError(f"checkpoint index not found: {index_path}")
    with open(index_path, "r", encoding="utf-8") as f:
        index = json.load(f)
    if index.get("format") != CHECKPOINT_FORMAT or index.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{index_path} is not a version {CHECKPOINT_VERSION} checkpoint index")
    raw = (index_path.parent / index["blob"]).read_bytes()
    tensors = {}
    for entry in index["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(raw):
            raise ValueError(f"checkpoint blob {blob_path} is truncated at tensor {entry['name']!r}")
        array = np.frombuffer(raw[start:stop], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = array.reshape(entry["shape"]).astype(array.dtype.newbyteorder("="))
    return tensors, index["meta"]


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Layer:
    """
    Base for layers that cache forward state for their backward pass.

    Caches form a stack so a layer can run several times (recurrent steps)
    and be back-propagated in reverse order.
    """

    def __init__(self):
        self._caches = []

    def _push(self, cache):
        if grad_enabled():
            self._caches.append(cache)

    def _pop(self):
        if not self._caches:
            raise RuntimeError(f"{type(self).__name__}.backward() called without a recorded forward pass")
        return self._caches.pop()

    def clear(self):
        self._caches.clear()


class Conv2D(Layer):
    def __init__(self, store, name, in_channels, out_channels, kernel=3, stride=1,
                 padding="same", bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.in_channels, self.out_channels = in_channels, out_channels
        self.stride, self.padding = stride, padding
        shape = (kernel, kernel, in_channels, out_channels)
        self.kernel = store.add(f"{name}.kernel", he_uniform(rng, shape, kernel * kernel * in_channels))
        self.bias = store.add(f"{name}.bias", np.zeros(out_channels, dtype=default_dtype())) if bias else None

    def forward(self, x):
        out, cache = conv2d(x, self.kernel.value, None if self.bias is None else self.bias.value,
                            self.stride, self.padding)
        self._push(cache)
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._pop())
        self.kernel.accumulate(dw)
        if self.bias is not None:
            self.bias.accumulate(db)
        return dx


class ConvTranspose2D(Layer):
    def __init__(self, store, name, in_channels, out_channels, kernel=2, stride=2,
                 padding="same", bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.stride, self.padding = stride, padding
        shape = (kernel, kernel, out_channels, in_channels)
        self.kernel = store.add(f"{name}.kernel", he_uniform(rng, shape, kernel * kernel * in_channels))
        self.bias = store.add(f"{name}.bias", np.zeros(out_channels, dtype=default_dtype())) if bias else None

    def forward(self, y, output_size=None):
        out, cache = conv2d_transpose(y, self.kernel.value, None if self.bias is None else self.bias.value,
                                      self.stride, self.padding, output_size)
        self._push(cache)
        return out

    def backward(self, dout):
        dy, dw, db = conv2d_transpose_backward(dout, self._pop())
        self.kernel.accumulate(dw)
        if self.bias is not None:
            self.bias.accumulate(db)
        return dy


class BatchNorm(Layer):
    """Batch norm with learnable scale/shift; frozen layers always use running statistics."""

    def __init__(self, store, name, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.name = name
        self.eps, self.momentum = eps, momentum
        self.training = True
        dtype = default_dtype()
        self.gamma = store.add(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = store.add(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = store.add(f"{name}.running_mean", np.zeros(channels, dtype=dtype), buffer=True)
        self.running_var = store.add(f"{name}.running_var", np.ones(channels, dtype=dtype), buffer=True)

    @property
    def mode(self):
        frozen = not (self.gamma.trainable or self.beta.trainable)
        return "train" if self.training and not frozen else "infer"

    def forward(self, x):
        out, cache = batchnorm(x, self.gamma.value, self.beta.value, self.running_mean.value,
                               self.running_var.value, self.mode, self.eps, self.momentum)
        self._push(cache)
        return out

    def backward(self, dout):
        dx, dgamma, dbeta = batchnorm_backward(dout, self._pop())
        self.gamma.accumulate(dgamma)
        self.beta.accumulate(dbeta)
        return dx


class Activation(Layer):
    def __init__(self, kind):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")
        self.kind = kind

    def forward(self, x):
        out = activation(x, self.kind)
        self._push(out)
        return out

    def backward(self, dout):
        return activation_backward(dout, self._pop(), self.kind)


class ScatterMax(Layer):
    def __init__(self, grid_shape):
        super().__init__()
        self.grid_shape = tuple(grid_shape)

    def forward(self, features, cell_index):
        grid, cache = scatter_max(features, cell_index, self.grid_shape)
        self._push(cache)
        return grid

    def backward(self, dgrid):
        return scatter_max_backward(dgrid, self._pop())


class ConvBNReLU:
    """Conv2D -> BatchNorm -> ReLU, the backbone's building block."""

    def __init__(self, store, name, in_channels, out_channels, kernel=3, stride=1, rng=None):
        self.conv = Conv2D(store, f"{name}.conv", in_channels, out_channels, kernel, stride, rng=rng)
        self.bn = BatchNorm(store, f"{name}.bn", out_channels)
        self.relu = Activation("relu")

    def layers(self):
        return [self.conv, self.bn, self.relu]

    def forward(self, x):
        return self.relu.forward(self.bn.forward(self.conv.forward(x)))

    def backward(self, dout):
        return self.conv.backward(self.bn.backward(self.relu.backward(dout)))
