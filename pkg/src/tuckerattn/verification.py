"""Oracle suites behind ``tuckerattn verify``.

Each suite returns a list of :class:`Check` records; a suite passes when
every check's maximum error is within its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention_reference import MhaWeights, mha_forward, stack_attention_tensors, tensor_mha_forward
from .conversion import mha_to_tucker
from .grad_training import gradient_check
from .rope import RopeConfig, latent_rope_scores, rope_matrix
from .streaming_softmax import naive_attention, streaming_attention
from .tensor_core import matricize, numerical_rank, relative_error
from .tucker import KvCache, decode_step, materialize, random_params, tucker_forward
from .variants import (
    GqaWeights,
    MlaWeights,
    gqa_lift,
    mla_forward_fused,
    mla_forward_unfused,
    mla_fuse,
    mla_lift,
    theoretical_ranks,
)


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite}/{self.name} max_error={self.max_error:.3e} tol={self.tol:.0e}"


def mode_ranks(t, tol: float = 1e-8) -> tuple:
    return tuple(numerical_rank(matricize(t, mode), tol) for mode in (1, 2, 3))


def suite_equivalence(seed: int = 0, instances: int = 10) -> list:
    rng = np.random.default_rng(seed)
    dense = factored = 0.0
    grid = [(1, 4, 3), (2, 8, 5), (4, 8, 7), (4, 16, 9), (3, 12, 1)]
    for k in range(instances):
        n_h, d, n = grid[k % len(grid)]
        w = MhaWeights.random(n_h, d, rng=rng)
        x = rng.standard_normal((n, d))
        for causal in (False, True):
            ref = mha_forward(w, x, causal=causal)
            got = tensor_mha_forward(stack_attention_tensors(w), x, w.d_head, causal=causal)
            dense = max(dense, relative_error(got, ref))
        p = random_params(n_h, d, (n_h, max(1, d // 2), max(1, d // 2)), rng=rng)
        ref = tensor_mha_forward(materialize(p), x, p.scale_dim)
        factored = max(factored, relative_error(tucker_forward(p, x), ref))
        full = mha_to_tucker(w, (n_h, d, d))
        lossless = relative_error(tucker_forward(full, x), mha_forward(w, x))
        factored = max(factored, lossless)
    return [
        Check("equivalence", "mha_vs_tensor", dense, 1e-10),
        Check("equivalence", "tucker_vs_materialized", factored, 1e-10),
    ]


def suite_ranks(seed: int = 0, seeds: int = 3) -> list:
    n_h, d, d_h = 4, 16, 4
    worst = 0
    for s in range(seeds):
        rng = np.random.default_rng(seed + s)
        cases = [
            ("mha", stack_attention_tensors(MhaWeights.random(n_h, d, rng=rng)), {}),
            ("mqa", gqa_lift(GqaWeights.random(n_h, 1, d, rng=rng)), {}),
            ("gqa", gqa_lift(GqaWeights.random(n_h, 2, d, rng=rng)), {"n_kv": 2}),
            ("mla", mla_lift(MlaWeights.random(n_h, d, 6, 5, rng=rng)), {"d_cq": 6, "d_ck": 5}),
        ]
        for kind, pair, kw in cases:
            pre, post = theoretical_ranks(kind, n_h, d, d_h, **kw)
            got = mode_ranks(pair.w_pre) + mode_ranks(pair.w_post)
            worst = max(worst, int(np.max(np.abs(np.subtract(got, pre + post)))))
    return [Check("ranks", "mode_ranks_vs_theory", float(worst), 0.0)]


def suite_rope(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    cfg = RopeConfig(8)
    q, k = rng.standard_normal((2, 6, 8)), rng.standard_normal((6, 8))
    base = latent_rope_scores(q, k, cfg)
    shift = 0.0
    for s in (1, 3, 17):
        pos = np.arange(6) + s
        shift = max(shift, float(np.max(np.abs(latent_rope_scores(q, k, cfg, pos, pos) - base))))
    rel = 0.0
    for m in range(-5, 6):
        for n in range(-5, 6):
            diff = rope_matrix(cfg, m) @ rope_matrix(cfg, n).T - rope_matrix(cfg, m - n)
            rel = max(rel, float(np.max(np.abs(diff))))
    w = MlaWeights.random(2, 8, 4, 6, rng=rng)
    x = rng.standard_normal((7, 8))
    lat = RopeConfig(6)
    fused = relative_error(mla_forward_fused(mla_fuse(w), x, rope=lat, causal=True),
                           mla_forward_unfused(w, x, "latent", lat, causal=True))
    return [
        Check("rope", "shift_invariance", shift, 1e-12),
        Check("rope", "relative_rotation", rel, 1e-12),
        Check("rope", "mla_fused_vs_unfused", fused, 1e-10),
    ]


def decode_error(params, x, rope=None) -> float:
    """Largest relative row error of incremental decoding against the causal forward."""
    full = tucker_forward(params, x, causal=True, rope=rope)
    cache = KvCache.for_params(params)
    worst = 0.0
    for t in range(x.shape[0]):
        row, cache = decode_step(params, cache, x[t], t, rope=rope)
        worst = max(worst, relative_error(row, full[t]))
    return worst


def suite_decode(seed: int = 0, n_tokens: int = 32) -> list:
    rng = np.random.default_rng(seed)
    checks = []
    for shared in (False, True):
        p = random_params(4, 16, (4, 8, 6), shared_kv=shared, rng=rng)
        x = rng.standard_normal((n_tokens, 16))
        for rope in (None, RopeConfig(6)):
            name = f"{'shared' if shared else 'separated'}_{'rope' if rope else 'norope'}"
            checks.append(Check("decode", name, decode_error(p, x, rope), 1e-10))
    return checks


def suite_streaming(seed: int = 0, n: int = 19) -> list:
    rng = np.random.default_rng(seed)
    q, k, v = rng.standard_normal((3, n, 5)), rng.standard_normal((n, 5)), rng.standard_normal((n, 4))
    worst = 0.0
    for causal in (False, True):
        ref = naive_attention(q, k, v, scale=0.5, causal=causal)
        for chunk in (1, 2, 7, n - 1, n, n + 3):
            got = streaming_attention(q, k, v, chunk, scale=0.5, causal=causal)
            worst = max(worst, float(np.max(np.abs(got - ref))))
    return [Check("streaming", "chunked_vs_naive", worst, 1e-12)]


def suite_grad(seed: int = 0, seeds: int = 2) -> list:
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(seed + s)
        shared = bool(s % 2)
        p = random_params(2, 6, (2, 3, 4), shared_kv=shared, rng=rng)
        x, up = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        errs = gradient_check(p, x, up, causal=True, rope=RopeConfig(4))
        worst = max(worst, max(errs.values()))
    return [Check("grad", "analytic_vs_finite_difference", worst, 1e-4)]


SUITES = {
    "equivalence": suite_equivalence,
    "ranks": suite_ranks,
    "rope": suite_rope,
    "decode": suite_decode,
    "streaming": suite_streaming,
    "grad": suite_grad,
}


def run_suites(names=None, seed: int = 0) -> list:
    names = list(SUITES) if names is None else list(names)
    checks = []
    for name in names:
        if name not in SUITES:
            raise KeyError(name)
        checks.extend(SUITES[name](seed=seed))
    return checks
