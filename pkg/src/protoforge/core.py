"""Dense array ops with hand-written backward passes, a parameter store and a
finite-difference gradient checker.

Arrays are plain numpy arrays. Every forward op has a matching ``*_backward``
that takes the upstream gradient and returns gradients for its inputs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True


class ParamStore:
    """Named trainable arrays with gradient accumulators."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: Dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> np.ndarray:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=self.dtype)
        self._entries[name] = Param(value, np.zeros_like(value), trainable)
        return value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> Param:
        return self._entries[name]

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def accumulate(self, name: str, g: np.ndarray) -> None:
        p = self._entries[name]
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {p.value.shape}")
        p.grad += g

    def set_trainable(self, name: str, flag: bool) -> None:
        self._entries[name].trainable = flag

    def names(self) -> List[str]:
        return list(self._entries)

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad.fill(0)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for name, p in self._entries.items():
            out.add(name, p.value, p.trainable)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def checksum(self) -> int:
        crc = 0
        for name in sorted(self._entries):
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(self._entries[name].value).tobytes(), crc)
        return crc


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def embedding_lookup(table: np.ndarray, ids) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size:
        bad = ids[(ids < 0) | (ids >= table.shape[0])]
        if bad.size:
            raise IndexError(f"embedding id {int(bad.flat[0])} out of range for table with {table.shape[0]} rows")
    return table[ids]


def embedding_lookup_backward(dout: np.ndarray, ids, n_rows: int) -> np.ndarray:
    ids = np.asarray(ids)
    dtable = np.zeros((n_rows, dout.shape[-1]), dtype=dout.dtype)
    # np.add.at accumulates repeated ids
    np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, dout.shape[-1]))
    return dtable


def _check_window(u: int) -> None:
    if u < 1 or u % 2 == 0:
        raise ConfigError(f"convolution window must be a positive odd number, got {u}")


def _im2col(x: np.ndarray, u: int) -> np.ndarray:
    half = (u - 1) // 2
    T = x.shape[1]
    xpad = np.pad(x, ((0, 0), (half, half), (0, 0)))
    return np.concatenate([xpad[:, k:k + T, :] for k in range(u)], axis=-1)


def conv1d_same(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray], u: int) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-padded 1-d convolution over the token axis.

    ``x`` is (T, d) or (B, T, d); ``kernel`` is (u*d, d_h) with row block k
    acting on token offset k - (u-1)/2. Returns the output and the im2col
    buffer needed for the backward pass.
    """
    _check_window(u)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if kernel.shape[0] != u * x.shape[2]:
        raise ShapeError(f"kernel has {kernel.shape[0]} rows, expected u*d = {u * x.shape[2]}")
    cols = _im2col(x, u)
    out = cols @ kernel
    if bias is not None:
        out = out + bias
    if squeeze:
        return out[0], cols[0]
    return out, cols


def conv1d_same_backward(dout: np.ndarray, cols: np.ndarray, kernel: np.ndarray, u: int):
    """Returns (dx, dkernel, dbias)."""
    squeeze = dout.ndim == 2
    if squeeze:
        dout, cols = dout[None], cols[None]
    B, T, dh = dout.shape
    d = kernel.shape[0] // u
    half = (u - 1) // 2
    dkernel = cols.reshape(-1, u * d).T @ dout.reshape(-1, dh)
    dbias = dout.reshape(-1, dh).sum(axis=0)
    dcols = dout @ kernel.T
    dxpad = np.zeros((B, T + 2 * half, d), dtype=dout.dtype)
    for k in range(u):
        dxpad[:, k:k + T, :] += dcols[:, :, k * d:(k + 1) * d]
    dx = dxpad[:, half:half + T, :]
    if squeeze:
        dx = dx[0]
    return dx, dkernel, dbias


def max_over_time(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Max over the token axis of (T, d_h) or (B, T, d_h); ties go to the lowest row."""
    if x.shape[-2] == 0:
        raise ShapeError("max_over_time needs at least one row")
    idx = np.argmax(x, axis=-2)
    out = np.take_along_axis(x, idx[..., None, :], axis=-2)[..., 0, :]
    return out, idx


def max_over_time_backward(dout: np.ndarray, idx: np.ndarray, T: int) -> np.ndarray:
    shape = dout.shape[:-1] + (T,) + dout.shape[-1:]
    dx = np.zeros(shape, dtype=dout.dtype)
    np.put_along_axis(dx, idx[..., None, :], dout[..., None, :], axis=-2)
    return dx


def pairwise_sq_euclidean(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ShapeError(f"cannot compare rows of shapes {A.shape} and {B.shape}")
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def pairwise_sq_euclidean_backward(dD: np.ndarray, A: np.ndarray, B: np.ndarray):
    dA = 2.0 * (dD.sum(axis=1)[:, None] * A - dD @ B)
    dB = 2.0 * (dD.sum(axis=0)[:, None] * B - dD.T @ A)
    return dA, dB


def sigmoid(x):
    """Overflow-free logistic function, clamped to the open interval (0, 1)."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    x = x.astype(dtype, copy=False)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(dtype)
    finfo = np.finfo(dtype)
    return np.clip(out, finfo.tiny, 1.0 - finfo.epsneg)


def sigmoid_backward(dout, out):
    return dout * out * (1.0 - out)


def log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax_nll(scores: np.ndarray, labels) -> Tuple[float, np.ndarray, np.ndarray]:
    """Summed negative log-likelihood of ``labels`` under row-softmax of ``scores``.

    Returns (loss, dscores, probabilities).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, C = scores.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    bad = labels[(labels < 0) | (labels >= C)]
    if bad.size:
        raise IndexError(f"label {int(bad[0])} out of range for {C} classes")
    logp = log_softmax(scores)
    rows = np.arange(n)
    loss = -float(logp[rows, labels].sum())
    probs = np.exp(logp)
    dscores = probs.copy()
    dscores[rows, labels] -= 1.0
    return loss, dscores, probs


def linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    if x.shape[-1] != weight.shape[0] or (bias is not None and bias.shape[-1] != weight.shape[1]):
        raise ShapeError(f"linear: input {x.shape}, weight {weight.shape}, bias {None if bias is None else bias.shape}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def linear_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Returns (dx, dweight, dbias) for a 2-d input."""
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def dropout(x: np.ndarray, rate: float, train: bool, rng: Optional[np.random.Generator] = None):
    """Inverted dropout. Returns (output, mask); the mask is None when nothing was dropped."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return dout if mask is None else dout * mask


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream keyed by (seed, name), so adding a parameter never shifts another's draw."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    excluded: int
    worst_index: Optional[Tuple[int, ...]] = None
    worst: Tuple[float, float] = (0.0, 0.0)  # (analytic, numeric) at the worst coordinate
    excluded_indices: List[Tuple[int, ...]] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _call(loss_fn, params):
    res = loss_fn(params)
    if isinstance(res, tuple):
        return float(res[0]), res[1]
    return float(res), None


def grad_check(
    loss_fn: Callable,
    params: ParamStore,
    eps: float = 1e-3,
    tol: float = 1e-4,
    coords_per_param: int = 100,
    names: Optional[Sequence[str]] = None,
    seed: int = 0,
    floor: float = 1e-7,
) -> Dict[str, GradCheckResult]:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must zero-and-fill ``params`` gradients and return
    either the loss or ``(loss, signature)``. The signature is any comparable
    summary of the discrete choices made during the forward pass (argmax rows,
    active hinges, ...). A coordinate whose +eps or -eps perturbation changes
    the signature sits on a non-smooth point and is excluded.

    Returns per-parameter results; relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if params.dtype != np.float64:
        raise ConfigError("gradient checks require a float64 ParamStore")
    f0, sig0 = _call(loss_fn, params)
    f1, sig1 = _call(loss_fn, params)
    if f0 != f1 or sig0 != sig1:
        raise DeterminismError(f"loss_fn is not deterministic: {f0!r} != {f1!r}")
    analytic = {name: params.grad(name).copy() for name in params.names()}
    rng = np.random.default_rng(seed)
    results = {}
    for name in names if names is not None else params.names():
        value = params[name]
        n = value.size
        if n <= coords_per_param:
            flat_idx = np.arange(n)
        else:
            flat_idx = np.sort(rng.choice(n, size=coords_per_param, replace=False))
        res = GradCheckResult(name, 0.0, 0, 0)
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), value.shape)
            orig = value[idx]
            value[idx] = orig + eps
            fp, sp = _call(loss_fn, params)
            value[idx] = orig - eps
            fm, sm = _call(loss_fn, params)
            value[idx] = orig
            if sp != sig0 or sm != sig0:
                res.excluded += 1
                res.excluded_indices.append(tuple(int(i) for i in idx))
                continue
            num = (fp - fm) / (2.0 * eps)
            a = float(analytic[name][idx])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            res.checked += 1
            if err > res.max_rel_error or res.worst_index is None:
                res.max_rel_error = max(err, res.max_rel_error)
                res.worst_index = tuple(int(i) for i in idx)
                res.worst = (a, num)
        results[name] = res
    # leave the store holding the analytic gradient at the base point
    _call(loss_fn, params)
    return results
