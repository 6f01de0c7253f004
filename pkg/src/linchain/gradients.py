"""Closed-form adapter gradients, a central-difference oracle and a checker.

With ``Delta = dL/dy`` and ``G = x.T @ Delta`` (summed over the batch), the
gradient of the adapted layer with respect to each trainable matrix is::

    dA  = s * G @ (C @ B).T                       C = W1 @ ... @ Wn
    dB  = s * (A @ C).T @ G
    dWi = s * P_i.T @ A.T @ G @ B.T @ S_i.T       P_i = W1..W(i-1), S_i = W(i+1)..Wn

``G`` is never formed; the products are taken through the rank-r activations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdaptedLinear, forward
from .linalg import ShapeError, chain_product, matmul

LOSS_KINDS = ("mse", "softmax-cross-entropy")


@dataclass
class LossSpec:
    kind: str
    target: np.ndarray

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.kind == "mse":
            self.target = np.asarray(self.target, dtype=np.float64)
            if self.target.ndim != 2:
                raise ShapeError(f"mse target must be a matrix, got shape {self.target.shape}")
        else:
            self.target = np.asarray(self.target, dtype=np.int64)
            if self.target.ndim != 1:
                raise ShapeError(f"cross-entropy labels must be 1-D, got shape {self.target.shape}")

    def _check(self, y: np.ndarray) -> None:
        if self.kind == "mse":
            if y.shape != self.target.shape:
                raise ShapeError(f"output shape {y.shape} does not match target {self.target.shape}")
        else:
            if y.ndim != 2 or y.shape[0] != self.target.shape[0]:
                raise ShapeError(f"{y.shape[0]} rows of logits for {self.target.shape[0]} labels")
            if self.target.size and (self.target.min() < 0 or self.target.max() >= y.shape[1]):
                raise ShapeError(f"labels must lie in [0, {y.shape[1]})")


def _log_softmax(y: np.ndarray) -> np.ndarray:
    z = y - y.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_value(loss: LossSpec, y: np.ndarray):
    """Mean squared error over all entries, or cross-entropy averaged over the batch.

    Returns a scalar of ``y``'s dtype so the oracle can run in extended precision.
    """
    loss._check(y)
    if loss.kind == "mse":
        diff = y - loss.target.astype(y.dtype)
        return (diff * diff).sum() / diff.size
    logp = _log_softmax(y)
    return -logp[np.arange(y.shape[0]), loss.target].sum() / y.shape[0]


def output_delta(loss: LossSpec, y: np.ndarray) -> np.ndarray:
    """``dL/dy`` for :func:`loss_value`."""
    loss._check(y)
    m = y.shape[0]
    if loss.kind == "mse":
        return 2.0 * (y - loss.target) / y.size
    p = np.exp(_log_softmax(y))
    p[np.arange(m), loss.target] -= 1.0
    return p / m


def loss_difference(loss: LossSpec, y_plus: np.ndarray, y_minus: np.ndarray):
    """``loss_value(y_plus) - loss_value(y_minus)`` without cancelling large terms.

    Entries where the two outputs agree contribute exactly zero, which keeps
    finite differences meaningful for gradients many orders of magnitude
    below the loss itself (saturated softmax classes, for instance).
    """
    loss._check(y_plus)
    loss._check(y_minus)
    dy = y_plus - y_minus
    m = y_plus.shape[0]
    if loss.kind == "mse":
        t = loss.target.astype(y_plus.dtype)
        return (dy * ((y_plus - t) + (y_minus - t))).sum() / dy.size
    rows = np.arange(m)
    z = y_minus - y_minus.max(axis=1, keepdims=True)
    e = np.exp(z)
    # lse(y+) - lse(y-) = log1p(sum(e * expm1(dy)) / sum(e))
    lse_diff = np.log1p((e * np.expm1(dy)).sum(axis=1) / e.sum(axis=1))
    return (lse_diff - dy[rows, loss.target]).sum() / m


@dataclass
class GradientSet:
    d_a: np.ndarray
    d_b: np.ndarray
    d_chain: list[np.ndarray] = field(default_factory=list)

    def groups(self) -> dict[str, np.ndarray]:
        out = {"A": self.d_a}
        for i, g in enumerate(self.d_chain, start=1):
            out[f"W{i}"] = g
        out["B"] = self.d_b
        return out

    def norms(self) -> dict[str, float]:
        return {name: float(np.linalg.norm(g)) for name, g in self.groups().items()}


def backward_analytic(ad: AdaptedLinear, x: np.ndarray, delta: np.ndarray, *, literal_eq11: bool = False) -> GradientSet:
    """Exact gradients of the adapter parameters given ``delta = dL/dy``.

    ``literal_eq11`` swaps in the transcription-style chain gradient
    ``A.T G B.T (Wn..W(i+1)).T (W(i-1)..W1).T``, which is wrong for n >= 2. It
    exists so the checker can be shown to catch it.
    """
    cfg = ad.config
    m = x.shape[0]
    if x.ndim != 2 or x.shape[1] != cfg.d_in:
        raise ShapeError(f"input has shape {x.shape}, expected (m, {cfg.d_in})")
    if delta.shape != (m, cfg.d_out):
        raise ShapeError(f"delta has shape {delta.shape}, expected {(m, cfg.d_out)}")
    s = cfg.scaling
    n = len(ad.chain)
    r0 = ad.a.shape[1]

    # forward activations h[i] = x A W1..Wi and backward ones g[i] = Delta (W(i+1)..Wn B).T
    h = [x @ ad.a]
    for w in ad.chain:
        h.append(h[-1] @ w)
    g = [None] * (n + 1)
    g[n] = delta @ ad.b.T
    for i in range(n - 1, -1, -1):
        g[i] = g[i + 1] @ ad.chain[i].T

    d_a = s * (x.T @ g[0])
    d_b = s * (h[n].T @ delta)
    if literal_eq11:
        core = ad.a.T @ (x.T @ delta) @ ad.b.T
        d_chain = []
        for i in range(n):
            post = chain_product(ad.chain[:i:-1] if i < n - 1 else [], size=core.shape[1])
            pre = chain_product(ad.chain[i - 1::-1] if i > 0 else [], size=r0)
            d_chain.append(s * matmul(matmul(core, post.T), pre.T))
    else:
        d_chain = [s * (h[i].T @ g[i + 1]) for i in range(n)]
    return GradientSet(d_a=d_a, d_b=d_b, d_chain=d_chain)


def gradients(ad: AdaptedLinear, x: np.ndarray, loss: LossSpec) -> tuple[float, GradientSet]:
    """Loss and analytic gradients in one forward/backward pass."""
    y = forward(ad, x)
    return float(loss_value(loss, y)), backward_analytic(ad, x, output_delta(loss, y))


def _extended_dtype():
    # 80-bit x87 where available; fall back to float64 elsewhere.
    if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps:
        return np.longdouble
    return np.float64


def finite_difference_grad(ad: AdaptedLinear, x: np.ndarray, loss: LossSpec, *, dtype=None) -> GradientSet:
    """Central differences ``(L(t+h) - L(t-h)) / (2h)`` for every trainable scalar.

    ``h = 1e-6 * max(1, |t|)``. Outputs come from :func:`forward` in extended
    precision (``numpy.longdouble`` by default) and the two losses are
    subtracted with :func:`loss_difference`, so rounding noise stays far below
    the gradient entries being checked.
    """
    dtype = dtype or _extended_dtype()
    work = ad.astype(dtype)
    xw = np.asarray(x).astype(dtype)
    params = work.params()
    grads = {}
    for name, p in params.items():
        gp = np.zeros(p.shape, dtype=np.float64)
        flat = p.reshape(-1)
        for k in range(flat.size):
            theta = flat[k]
            h = dtype(1e-6) * max(dtype(1), abs(theta))
            flat[k] = theta + h
            y_up = forward(work, xw)
            hi = flat[k]
            flat[k] = theta - h
            y_down = forward(work, xw)
            lo = flat[k]
            flat[k] = theta
            gp.reshape(-1)[k] = float(loss_difference(loss, y_up, y_down) / (hi - lo))
        grads[name] = gp
    n = len(ad.chain)
    return GradientSet(d_a=grads["A"], d_b=grads["B"], d_chain=[grads[f"W{i}"] for i in range(1, n + 1)])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.shape != numeric.shape:
        return math.inf
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class CheckReport:
    tolerance: float
    errors: dict[str, float]
    label: str = ""

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "max_relative_error": self.max_error,
            "groups": dict(self.errors),
        }


def grad_check(ad: AdaptedLinear, x: np.ndarray, loss: LossSpec, tol: float, *, literal_eq11: bool = False, label: str = "") -> CheckReport:
    """Compare :func:`backward_analytic` against :func:`finite_difference_grad` per group.

    A chain group whose mutated gradient cannot even be formed (shape error)
    is reported with infinite error.
    """
    if not tol > 0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    numeric = finite_difference_grad(ad, x, loss).groups()
    y = forward(ad, x)
    delta = output_delta(loss, y)
    try:
        analytic = backward_analytic(ad, x, delta, literal_eq11=literal_eq11).groups()
    except ShapeError:
        # mutated chain gradient does not conform on rectangular chains
        exact = backward_analytic(ad, x, delta)
        analytic = {"A": exact.d_a, "B": exact.d_b}
    errors = {}
    for name, g_fd in numeric.items():
        g_a = analytic.get(name)
        errors[name] = math.inf if g_a is None else relative_error(g_a, g_fd)
    return CheckReport(tolerance=tol, errors=errors, label=label)


@dataclass
class DependencyReport:
    n: int
    depends_on: dict[str, list[str]]

    @property
    def total_occurrences(self) -> int:
        return sum(len(v) for v in self.depends_on.values())

    def to_dict(self) -> dict:
        return {"n": self.n, "depends_on": self.depends_on, "total_occurrences": self.total_occurrences}


def trace_dependencies(n: int) -> DependencyReport:
    """Which other parameter matrices appear as factors in each gradient.

    Read off the closed forms above: ``dA`` involves ``C`` and ``B``, ``dB``
    involves ``A`` and ``C``, and ``dWi`` involves ``A``, ``B`` and every
    ``Wj`` with ``j != i`` through its prefix and suffix products.
    """
    if n < 0:
        raise ValueError(f"chain length must be >= 0, got {n}")
    chain = [f"W{i}" for i in range(1, n + 1)]
    deps = {"A": ["B", *chain], "B": ["A", *chain]}
    for i, w in enumerate(chain):
        deps[w] = ["A", "B", *chain[:i], *chain[i + 1:]]
    ordered = {"A": deps["A"], **{w: deps[w] for w in chain}, "B": deps["B"]}
    return DependencyReport(n=n, depends_on=ordered)
