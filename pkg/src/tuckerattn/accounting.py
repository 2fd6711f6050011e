"""Parameter and KV-cache accounting for the attention variants.

Counts cover the query, key, value and output weights only (no biases).
Sizes are reported in decimal megabytes (10**6 bytes), truncated to two
decimals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

METHODS = (
    "dense", "mha", "mqa", "gqa",
    "mla_separated", "mla_shared",
    "tucker_separated", "tucker_shared",
)

DTYPE_BYTES = {"bf16": 2, "f16": 2, "f32": 4, "f64": 8}


@dataclass(frozen=True)
class ModelDims:
    """Model dimensions for accounting.

    ``ranks`` are the Tucker ranks ``(r1, r2, r3)`` shared by both tensors;
    ``d_cq`` defaults to ``d_c`` for MLA.
    """

    n_heads: int
    d_model: int
    n_tokens: int = 0
    layers: int = 1
    n_kv: int = 1
    d_c: int = 0
    d_cq: int | None = None
    ranks: tuple = (1, 1, 1)
    bytes_per_value: int = 2

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def with_(self, **kw) -> "ModelDims":
        return replace(self, **kw)


GPT2 = ModelDims(n_heads=12, d_model=768, n_tokens=1024, layers=12, bytes_per_value=2)


def param_count(method: str, dims: ModelDims, phase: str = "train") -> int:
    """Attention weight count for one layer."""
    if phase not in ("train", "inference"):
        raise ValueError(f"unknown phase {phase!r}")
    d, n_h, d_h = dims.d_model, dims.n_heads, dims.d_head
    d_c = dims.d_c
    d_cq = d_c if dims.d_cq is None else dims.d_cq
    r1, r2, r3 = dims.ranks
    if method == "dense":
        return 4 * n_h * d * d if phase == "train" else 4 * d * d
    if method == "mha":
        return 4 * d * d
    if method == "mqa":
        return 2 * d * d + 2 * d_h * d
    if method == "gqa":
        return 2 * d * d + 2 * dims.n_kv * d_h * d
    if method in ("mla_separated", "mla_shared"):
        value_downs = 1 if method == "mla_separated" else 0
        if phase == "train":
            # W^O, W^DQ, W^UQ, W^DKV, W^UK, W^UV (+ W^DV)
            return d * d + 2 * d * d_cq + (3 + value_downs) * d * d_c
        if d_cq != d_c:
            raise ValueError("inference counts assume a single latent dimension d_c")
        return d * d + (4 if value_downs else 2) * d * d_c
    if method == "tucker_separated":
        return 2 * (n_h * r1 + r2 * d + r3 * d + r1 * r2 * r3)
    if method == "tucker_shared":
        return 2 * n_h * r1 + 2 * r2 * d + r3 * d + 2 * r1 * r2 * r3
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def kv_cache_count(method: str, dims: ModelDims) -> int:
    """Cached values for one layer at sequence length ``dims.n_tokens``."""
    n, d = dims.n_tokens, dims.d_model
    r3 = dims.ranks[2]
    table = {
        "dense": 4 * n * dims.n_heads * d,
        "mha": 2 * n * d,
        "mqa": 2 * n * dims.d_head,
        "gqa": 2 * n * dims.n_kv * dims.d_head,
        "mla_separated": 2 * n * dims.d_c,
        "mla_shared": n * dims.d_c,
        "tucker_separated": 2 * n * r3,
        "tucker_shared": n * r3,
    }
    if method not in table:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return table[method]


def to_megabytes(n_values: int, bytes_per_value: int) -> float:
    return n_values * bytes_per_value / 1e6


def format_mb(n_bytes: int) -> str:
    """Decimal megabytes truncated (not rounded) to two decimals."""
    hundredths = (n_bytes * 100) // 10**6
    return f"{hundredths // 100}.{hundredths % 100:02d}"


@dataclass(frozen=True)
class AccountingRow:
    method: str
    phase: str
    params_per_layer: int
    params_total: int
    params_bytes: int
    kv_per_layer: int
    kv_total: int
    kv_bytes: int

    @property
    def params_mb(self) -> str:
        return format_mb(self.params_bytes)

    @property
    def kv_mb(self) -> str:
        return format_mb(self.kv_bytes)


def account(method: str, dims: ModelDims, phase: str = "train") -> AccountingRow:
    p = param_count(method, dims, phase)
    kv = kv_cache_count(method, dims)
    return AccountingRow(
        method, phase, p, p * dims.layers, p * dims.layers * dims.bytes_per_value,
        kv, kv * dims.layers, kv * dims.layers * dims.bytes_per_value,
    )
