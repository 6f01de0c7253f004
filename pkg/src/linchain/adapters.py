"""LoRA, MoSLoRA and LinChain adapters over a frozen linear layer.

All three methods share one representation: ``delta = scaling * A @ W1 @ ... @ Wn @ B``
with ``A`` of shape ``(d_in, r0)``, ``Wi`` of shape ``(r(i-1), ri)`` and ``B`` of
shape ``(rk, d_out)``. LoRA is the empty chain, MoSLoRA a single square mixer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import RngState, ShapeError, chain_product, kaiming_uniform

METHODS = ("lora", "moslora", "linchain")


class LowRankWarning(UserWarning):
    """A chain dimension is not much smaller than the layer dimensions."""


@dataclass(frozen=True)
class AdapterConfig:
    method: str
    d_in: int
    d_out: int
    chain_dims: tuple[int, ...]
    scaling: float = 1.0
    seed: int = 0
    # Diagnostic: start every chain matrix at the (rectangular) identity
    # instead of Kaiming. Used for collapse-at-init comparisons only.
    identity_chain: bool = False

    def __post_init__(self):
        object.__setattr__(self, "chain_dims", tuple(int(r) for r in self.chain_dims))
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.d_in < 1 or self.d_out < 1:
            raise ValueError(f"d_in and d_out must be positive, got {self.d_in}, {self.d_out}")
        dims = self.chain_dims
        if not dims or any(r < 1 for r in dims):
            raise ValueError(f"chain_dims must be non-empty positive integers, got {list(dims)}")
        if self.method == "lora" and len(dims) != 1:
            raise ValueError(f"lora takes chain_dims=[r], got {list(dims)}")
        if self.method == "moslora" and (len(dims) != 2 or dims[0] != dims[1]):
            raise ValueError(f"moslora takes chain_dims=[r, r], got {list(dims)}")
        if self.method == "linchain" and len(dims) < 2:
            raise ValueError(f"linchain needs at least one chain matrix, got chain_dims={list(dims)}")
        limit = min(self.d_in, self.d_out)
        if max(dims) > limit:
            raise ValueError(f"chain_dims {list(dims)} exceed min(d_in, d_out) = {limit}")
        if not self.scaling > 0:
            raise ValueError(f"scaling must be positive, got {self.scaling}")
        if 2 * max(dims) > limit:
            warnings.warn(
                f"chain_dims {list(dims)} are not small relative to min(d_in, d_out) = {limit}",
                LowRankWarning,
                stacklevel=3,
            )

    @property
    def n_chain(self) -> int:
        return len(self.chain_dims) - 1

    @property
    def label(self) -> str:
        dims = self.chain_dims
        if self.method == "lora":
            return f"lora-r{dims[0]}"
        if self.method == "moslora":
            return f"moslora-r{dims[0]}"
        if len(set(dims)) == 1:
            return f"linchain-{self.n_chain}-{dims[0]}"
        return "linchain-" + "x".join(str(r) for r in dims)

    def group_names(self) -> list[str]:
        return ["A"] + [f"W{i}" for i in range(1, self.n_chain + 1)] + ["B"]


@dataclass
class AdaptedLinear:
    config: AdapterConfig
    w0: np.ndarray
    a: np.ndarray
    chain: list[np.ndarray] = field(default_factory=list)
    b: np.ndarray | None = None

    def params(self) -> dict[str, np.ndarray]:
        """Trainable matrices keyed by group name, in A, W1..Wn, B order."""
        out = {"A": self.a}
        for i, w in enumerate(self.chain, start=1):
            out[f"W{i}"] = w
        out["B"] = self.b
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> AdaptedLinear:
        n = len(self.chain)
        return replace(
            self,
            a=params["A"],
            chain=[params[f"W{i}"] for i in range(1, n + 1)],
            b=params["B"],
        )

    def copy(self) -> AdaptedLinear:
        return AdaptedLinear(
            self.config, self.w0.copy(), self.a.copy(), [w.copy() for w in self.chain], self.b.copy()
        )

    def astype(self, dtype) -> AdaptedLinear:
        return AdaptedLinear(
            self.config,
            self.w0.astype(dtype),
            self.a.astype(dtype),
            [w.astype(dtype) for w in self.chain],
            self.b.astype(dtype),
        )


def expected_shapes(config: AdapterConfig) -> dict[str, tuple[int, int]]:
    dims = config.chain_dims
    shapes = {"A": (config.d_in, dims[0])}
    for i in range(1, len(dims)):
        shapes[f"W{i}"] = (dims[i - 1], dims[i])
    shapes["B"] = (dims[-1], config.d_out)
    return shapes


def check_shapes(ad: AdaptedLinear) -> None:
    cfg = ad.config
    if ad.w0.shape != (cfg.d_in, cfg.d_out):
        raise ShapeError(f"w0 has shape {ad.w0.shape}, config wants {(cfg.d_in, cfg.d_out)}")
    if len(ad.chain) != cfg.n_chain:
        raise ShapeError(f"adapter has {len(ad.chain)} chain matrices, config wants {cfg.n_chain}")
    for name, shape in expected_shapes(cfg).items():
        got = ad.params()[name].shape
        if got != shape:
            raise ShapeError(f"{name} has shape {got}, config wants {shape}")


def init_adapter(config: AdapterConfig, w0: np.ndarray, rng: RngState | None = None) -> AdaptedLinear:
    """Fresh adapter around ``w0``: Kaiming ``A`` then ``W1..Wn``, zero ``B``.

    ``rng`` defaults to a stream seeded with ``config.seed``. Because ``B`` is
    zero the adapter starts out as the identity on the base layer.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.shape != (config.d_in, config.d_out):
        raise ShapeError(f"w0 has shape {w0.shape}, config wants {(config.d_in, config.d_out)}")
    if rng is None:
        rng = RngState(config.seed)
    dims = config.chain_dims
    a = kaiming_uniform(config.d_in, dims[0], rng)
    chain = []
    for r_prev, r_next in zip(dims[:-1], dims[1:]):
        if config.identity_chain:
            chain.append(np.eye(r_prev, r_next))
        else:
            chain.append(kaiming_uniform(r_prev, r_next, rng))
    b = np.zeros((dims[-1], config.d_out))
    return AdaptedLinear(config, w0.copy(), a, chain, b)


def chain_matrix(ad: AdaptedLinear) -> np.ndarray:
    """``W1 @ ... @ Wn``, or the ``r0``-identity for LoRA."""
    return chain_product(ad.chain, size=ad.a.shape[1], dtype=ad.a.dtype)


def delta_weight(ad: AdaptedLinear) -> np.ndarray:
    return ad.config.scaling * (chain_product([ad.a, *ad.chain]) @ ad.b)


def merge(ad: AdaptedLinear) -> np.ndarray:
    return ad.w0 + delta_weight(ad)


def forward(ad: AdaptedLinear, x: np.ndarray) -> np.ndarray:
    """``x @ w0 + scaling * x @ A @ W1 ... @ Wn @ B`` through the rank-r path."""
    if x.ndim != 2 or x.shape[1] != ad.config.d_in:
        raise ShapeError(f"input has shape {x.shape}, expected (m, {ad.config.d_in})")
    h = x @ ad.a
    for w in ad.chain:
        h = h @ w
    return x @ ad.w0 + ad.config.scaling * (h @ ad.b)


def param_count(config: AdapterConfig) -> int:
    dims = config.chain_dims
    return config.d_in * dims[0] + dims[-1] * config.d_out + chain_param_count(config)


def chain_param_count(config: AdapterConfig) -> int:
    dims = config.chain_dims
    return sum(p * q for p, q in zip(dims[:-1], dims[1:]))


def collapse_to_lora(ad: AdaptedLinear) -> AdaptedLinear:
    """Fold the chain into ``B``; the result has the same ``delta_weight``."""
    if ad.config.method == "lora":
        return ad.copy()
    b = chain_matrix(ad) @ ad.b
    config = replace(ad.config, method="lora", chain_dims=(ad.config.chain_dims[0],), identity_chain=False)
    return AdaptedLinear(config, ad.w0.copy(), ad.a.copy(), [], b)
