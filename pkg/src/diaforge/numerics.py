"""Dense float64 tensors, seeded randomness, the DiffOp contract and gradient oracles.

Tensors are plain ``numpy.ndarray`` values of dtype float64. Every
differentiable stage in the package exposes ``forward(x)`` and
``vjp(x, cotangent)``; the helpers here check that contract numerically.
"""

from __future__ import annotations

import struct
from typing import Callable, Protocol, Sequence

import numpy as np

DFT1_MAGIC = b"DFT1"


class NumericsError(ValueError):
    pass


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a float64 array, rejecting empty or non-finite input."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.size == 0 or 0 in arr.shape:
        raise NumericsError(f"{name} has a zero extent: shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(x)))[0])
        raise NumericsError(f"{name} has a non-finite entry at flat index {bad}")
    return x


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if np.shape(a) != np.shape(b):
        raise NumericsError(f"shape mismatch between {what}: {np.shape(a)} vs {np.shape(b)}")


class DiffOp(Protocol):
    """A differentiable map: ``forward`` plus its vector-Jacobian product."""

    def forward(self, x: np.ndarray) -> np.ndarray: ...

    def vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray: ...


class FunctionOp:
    """Wrap a pair of callables as a DiffOp."""

    def __init__(self, forward: Callable, vjp: Callable):
        self._forward = forward
        self._vjp = vjp

    def forward(self, x):
        return self._forward(x)

    def vjp(self, x, cotangent):
        return self._vjp(x, cotangent)


class Rng:
    """Counter-based, splittable random stream.

    Backed by numpy's Philox bit generator keyed through a ``SeedSequence``
    so that ``Rng(7).split("img", 3)`` yields the same stream no matter
    which worker asks for it or in what order.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def split(self, *labels) -> "Rng":
        return Rng(self.seed, self.key + tuple(_label_to_int(lab) for lab in labels))

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, low: float, high: float, shape=None):
        return self.generator.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self.generator.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    # stable across processes, unlike hash()
    data = str(label).encode()
    h = 2166136261
    for byte in data:
        h = ((h ^ byte) * 16777619) & 0xFFFFFFFF
    return h


def sample_gaussian(rng: Rng, shape) -> np.ndarray:
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise NumericsError(f"cannot sample a tensor of shape {shape}")
    return rng.normal(shape)


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise NumericsError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(f"non-finite function value when perturbing index {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def max_rel_error(actual: np.ndarray, expected: np.ndarray, floor: float = 1e-12) -> float:
    """Largest absolute deviation scaled by the reference's max magnitude."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    check_same_shape(actual, expected, "actual and expected")
    scale = max(float(np.max(np.abs(expected))), floor)
    return float(np.max(np.abs(actual - expected))) / scale


def vjp_selftest(op: DiffOp, x, rng: Rng, h: float = 1e-5, cotangent=None) -> float:
    """Compare ``op.vjp`` against finite differences of ``<g, op.forward>``."""
    x = as_tensor(x, "x")
    y = op.forward(x)
    g = rng.normal(np.shape(y)) if cotangent is None else np.asarray(cotangent, dtype=np.float64)
    if np.shape(g) != np.shape(y):
        raise NumericsError(f"cotangent shape {np.shape(g)} does not match output shape {np.shape(y)}")
    analytic = op.vjp(x, g)
    if np.shape(analytic) != x.shape:
        raise NumericsError(f"vjp returned shape {np.shape(analytic)}, expected {x.shape}")
    numeric = finite_difference_grad(lambda v: float(np.sum(g * op.forward(v))), x, h)
    if np.max(np.abs(numeric)) < 1e-300 and np.max(np.abs(analytic)) < 1e-300:
        return 0.0
    return max_rel_error(analytic, numeric)


# -- DFT1 raw tensor files ---------------------------------------------------

def tensor_to_bytes(x) -> bytes:
    arr = np.ascontiguousarray(np.asarray(x, dtype="<f8"))
    if arr.ndim == 0:
        arr = arr.reshape(1)
    head = DFT1_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != DFT1_MAGIC:
        raise NumericsError("not a DFT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    offset = 8 + 4 * rank
    if len(buf) < offset:
        raise NumericsError("truncated DFT1 header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(shape)) if rank else 0
    if len(buf) != offset + 8 * count:
        raise NumericsError(f"DFT1 payload is {len(buf) - offset} bytes, expected {8 * count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(shape)


def save_tensor(path, x) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


class MemoryMeter:
    """Counts live tensors and scalars held by stage activation caches.

    Stored trajectory latents are tracked on their own counters so the
    intra-stage peak can be reported without them.
    """

    def __init__(self):
        self.live_tensors = 0
        self.live_scalars = 0
        self.peak_tensors = 0
        self.peak_scalars = 0
        self.stored_tensors = 0
        self.stored_scalars = 0

    def acquire(self, arrays) -> None:
        for a in arrays:
            self.live_tensors += 1
            self.live_scalars += int(np.size(a))
        self.peak_tensors = max(self.peak_tensors, self.live_tensors)
        self.peak_scalars = max(self.peak_scalars, self.live_scalars)

    def release(self, arrays) -> None:
        for a in arrays:
            self.live_tensors -= 1
            self.live_scalars -= int(np.size(a))
        if self.live_tensors < 0 or self.live_scalars < 0:
            raise NumericsError("memory meter released more than it acquired")

    def store(self, x) -> None:
        self.stored_tensors += 1
        self.stored_scalars += int(np.size(x))


class Cache:
    """Activations saved by a forward pass for its matching vjp."""

    __slots__ = ("arrays", "meta", "children")

    def __init__(self, arrays=(), children=(), **meta):
        self.arrays = list(arrays)
        self.children = list(children)
        self.meta = meta

    def all_arrays(self) -> list:
        out = list(self.arrays)
        for child in self.children:
            out.extend(child.all_arrays())
        return out
