"""Dense float64 linear algebra and the seeded generator used for initialization.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Inputs are
row vectors, so a linear layer computes ``y = x @ W`` with ``W`` shaped
``(d_in, d_out)``.

Random numbers come from SplitMix64 used in counter mode: draw ``k``
(1-based) of a stream with seed ``s`` is ``mix(s + k * 0x9E3779B97F4A7C15)``
modulo 2**64, where ``mix`` is the SplitMix64 finalizer. A uniform double is
``(z >> 11) * 2**-53``. Reference outputs for seed 0::

    0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1

# sqrt(6 / fan_in): He gain sqrt(2) times the uniform-variance factor sqrt(3).
KAIMING_NUMERATOR = 6.0


class ShapeError(ValueError):
    """Raised when matrix operands have incompatible shapes."""


def _shape(a) -> str:
    return "x".join(str(s) for s in np.shape(a))


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {_shape(m)}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {_shape(a)} by {_shape(b)}")
    return a @ b


def chain_product(mats, size: int | None = None, dtype=np.float64) -> np.ndarray:
    """Left-to-right product of ``mats``; the ``size``-square identity if empty."""
    mats = list(mats)
    if not mats:
        if size is None:
            raise ShapeError("empty product needs an explicit size")
        return np.eye(size, dtype=dtype)
    out = mats[0]
    for m in mats[1:]:
        out = matmul(out, m)
    return out


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


def max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch: {_shape(a)} vs {_shape(b)}")
    if np.size(a) == 0:
        return 0.0
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class RngState:
    """Counter-mode SplitMix64 stream.

    The only mutable part is ``counter``, the number of 64-bit words drawn so
    far. Two states with equal ``(seed, counter)`` produce identical draws.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, counter={self.counter})"

    def __eq__(self, other) -> bool:
        return isinstance(other, RngState) and (self.seed, self.counter) == (other.seed, other.counter)

    def copy(self) -> RngState:
        return RngState(self.seed, self.counter)

    def next_uint64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * np.uint64(GOLDEN_GAMMA)
            return _mix64(z)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """``n`` doubles on ``[low, high)`` with 53 random bits each."""
        u = (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws by Box-Muller; consumes ``2 * n`` words."""
        u = self.uniform(2 * n)
        u1, u2 = 1.0 - u[:n], u[n:]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for idx, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[idx] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def derive(self, *keys: int) -> RngState:
        """Independent child stream; does not advance ``self``."""
        s = self.seed
        for key in keys:
            s = _mix64_int(s ^ _mix64_int(((int(key) + 1) * GOLDEN_GAMMA) & _MASK64))
        return RngState(s)


def _mix64_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def kaiming_bound(fan_in: int) -> float:
    return float(np.sqrt(KAIMING_NUMERATOR / fan_in))


def kaiming_uniform(rows: int, cols: int, rng: RngState) -> np.ndarray:
    """``rows x cols`` matrix with entries uniform on ``[-b, b]``, ``b = sqrt(6 / rows)``.

    ``rows`` is the fan-in under the row-vector convention. Draws fill the
    matrix in row-major order.
    """
    if rows < 1 or cols < 1:
        raise ShapeError(f"kaiming_uniform needs positive dims, got {rows}x{cols}")
    b = kaiming_bound(rows)
    return rng.uniform(rows * cols, -b, b).reshape(rows, cols)
