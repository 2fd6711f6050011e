"""Analytic gradients of Tucker attention and a small training loop.

Gradients are for the scalar ``<upstream, tucker_forward(params, x)>`` with
respect to every core, factor and the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention_reference import softmax_rows
from .rope import RopeConfig, rotate_rows, unrotate_rows
from .tensor_core import mode_product
from .tucker import TuckerAttentionParams, random_params


def _forward_with_cache(params: TuckerAttentionParams, x, causal, rope):
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    pos = np.arange(n)
    xu2 = x @ params.u2
    a = mode_product(params.core_pre, params.u1, 1)           # (n_H, r2, r3)
    q_hat = np.einsum("ibc,nb->inc", a, xu2)
    k = x @ params.u3
    v = x @ params.value_factor
    q_r, k_r = q_hat, k
    if rope is not None:
        q_r = rotate_rows(q_hat, rope, pos)
        k_r = rotate_rows(k, rope, pos)
    inv = 1.0 / np.sqrt(params.scale_dim)
    p = softmax_rows(inv * np.einsum("inc,mc->inm", q_r, k_r), causal)
    z = np.einsum("inm,mc->inc", p, v)
    g = mode_product(params.core_post, params.ut1, 1)         # (n_H, rt2, rt3)
    y = np.einsum("inc,ibc->nb", z, g)
    out = y @ params.ut2.T
    cache = dict(x=x, pos=pos, xu2=xu2, a=a, k_r=k_r, q_r=q_r, v=v, p=p, z=z, g=g, y=y, inv=inv)
    return out, cache


def tucker_backward(params: TuckerAttentionParams, x, upstream, causal: bool = False,
                    rope: RopeConfig | None = None) -> dict:
    """Gradients keyed like :meth:`TuckerAttentionParams.arrays`, plus ``"x"``.

    In shared mode the value path's contribution is folded into ``u3``.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    out, c = _forward_with_cache(params, x, causal, rope)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream has shape {upstream.shape}, output is {out.shape}")
    x = c["x"]

    grads = {}
    grads["ut2"] = upstream.T @ c["y"]
    d_y = upstream @ params.ut2
    d_z = np.einsum("nb,ibc->inc", d_y, c["g"])
    d_g = np.einsum("inc,nb->ibc", c["z"], d_y)
    grads["ut1"] = np.einsum("ibc,abc->ia", d_g, params.core_post)
    grads["core_post"] = np.einsum("ia,ibc->abc", params.ut1, d_g)

    d_p = np.einsum("inc,mc->inm", d_z, c["v"])
    d_v = np.einsum("inm,inc->mc", c["p"], d_z)
    p = c["p"]
    d_s = p * (d_p - np.sum(d_p * p, axis=2, keepdims=True)) * c["inv"]
    d_qr = np.einsum("inm,mc->inc", d_s, c["k_r"])
    d_kr = np.einsum("inm,inc->mc", d_s, c["q_r"])
    if rope is not None:
        d_q = unrotate_rows(d_qr, rope, c["pos"])
        d_k = unrotate_rows(d_kr, rope, c["pos"])
    else:
        d_q, d_k = d_qr, d_kr

    d_a = np.einsum("inc,nb->ibc", d_q, c["xu2"])
    d_xu2 = np.einsum("inc,ibc->nb", d_q, c["a"])
    grads["u1"] = np.einsum("ibc,abc->ia", d_a, params.core_pre)
    grads["core_pre"] = np.einsum("ia,ibc->abc", params.u1, d_a)
    grads["u2"] = x.T @ d_xu2
    grads["u3"] = x.T @ d_k
    d_x = d_xu2 @ params.u2.T + d_k @ params.u3.T + d_v @ params.value_factor.T
    if params.shared_kv:
        grads["u3"] = grads["u3"] + x.T @ d_v
    else:
        grads["ut3"] = x.T @ d_v
    grads["x"] = d_x
    return grads


def finite_difference_gradients(params: TuckerAttentionParams, x, upstream, causal=False,
                                rope=None, step: float = 1e-5) -> dict:
    """Central differences of ``<upstream, forward>`` for every entry of every block."""
    from .tucker import tucker_forward

    upstream = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)

    def loss(p, xx):
        return float(np.sum(upstream * tucker_forward(p, xx, causal=causal, rope=rope)))

    grads = {}
    for name, arr in list(params.arrays().items()) + [("x", x)]:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = arr.copy()
                pert[idx] += sign * step
                if name == "x":
                    vals.append(loss(params, pert))
                else:
                    vals.append(loss(params.replace(**{name: pert}), x))
            g[idx] = (vals[0] - vals[1]) / (2 * step)
        grads[name] = g
    return grads


def gradient_check(params, x, upstream, causal=False, rope=None, step=1e-5) -> dict:
    """Relative Frobenius error of the analytic gradient per block."""
    analytic = tucker_backward(params, x, upstream, causal=causal, rope=rope)
    numeric = finite_difference_gradients(params, x, upstream, causal=causal, rope=rope, step=step)
    errors = {}
    for name, fd in numeric.items():
        denom = np.linalg.norm(fd)
        diff = np.linalg.norm(analytic[name] - fd)
        errors[name] = float(diff / denom) if denom > 0 else float(diff)
    return errors


class Adam:
    """Adam over a dict of arrays."""

    def __init__(self, lr=1e-2, betas=(0.9, 0.95), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, arrays: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for name, val in arrays.items():
            g = grads[name]
            m = self.b1 * self.m.get(name, np.zeros_like(g)) + (1 - self.b1) * g
            v = self.b2 * self.v.get(name, np.zeros_like(g)) + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            out[name] = val - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


@dataclass
class ToyConfig:
    d_model: int = 32
    n_heads: int = 4
    ranks: tuple = (4, 16, 16)
    n_tokens: int = 16
    vocab: int = 16
    batch: int = 8
    steps: int = 200
    lr: float = 1e-2
    seed: int = 0
    shared_kv: bool = False
    init: str = "random"


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    diverged: bool = False
    params: TuckerAttentionParams | None = None

    @property
    def reduction(self) -> float:
        return 1.0 - self.losses[-1] / self.losses[0]


class CopyPreviousTask:
    """Regress each token's output onto the previous token's embedding.

    Token embeddings occupy the first ``d/2`` coordinates and fixed
    positional codes the remaining ``d/2``, so attending one step back and
    keeping the content coordinates solves the task exactly.
    """

    def __init__(self, cfg: ToyConfig, rng):
        half = cfg.d_model // 2
        if cfg.n_tokens > cfg.d_model - half:
            raise ValueError("positional codes need n_tokens <= d_model - d_model // 2")
        emb = rng.standard_normal((cfg.vocab, half))
        self.embed = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        self.positions = np.eye(cfg.d_model - half)[: cfg.n_tokens]
        self.cfg = cfg
        self.half = half

    def sample(self, rng):
        tokens = rng.integers(0, self.cfg.vocab, size=self.cfg.n_tokens)
        x = np.concatenate([self.embed[tokens], self.positions], axis=1)
        target = np.zeros_like(x)
        target[1:, : self.half] = self.embed[tokens[:-1]]
        return x, target

    def loss_and_grad(self, out, target):
        diff = out[1:] - target[1:]
        n = diff.shape[0]
        grad = np.zeros_like(out)
        grad[1:] = 2.0 * diff / n
        return float(np.sum(diff * diff) / n), grad


def _initial_params(cfg: ToyConfig, rng) -> TuckerAttentionParams:
    if cfg.init == "random":
        return random_params(cfg.n_heads, cfg.d_model, cfg.ranks, shared_kv=cfg.shared_kv, rng=rng)
    if cfg.init == "mha":
        from .attention_reference import MhaWeights
        from .conversion import mha_to_tucker

        mha = MhaWeights.random(cfg.n_heads, cfg.d_model, rng=rng)
        return mha_to_tucker(mha, cfg.ranks, shared_kv=cfg.shared_kv)
    raise ValueError(f"unknown init {cfg.init!r}")


def toy_train(cfg: ToyConfig | None = None, **overrides) -> TrainResult:
    """Full-batch Adam on ``cfg.batch`` fixed :class:`CopyPreviousTask` sequences.

    Deterministic for a given seed. A non-finite loss stops training and sets
    ``diverged``.
    """
    cfg = ToyConfig(**overrides) if cfg is None else cfg
    if cfg.steps < 1:
        raise ValueError("steps must be positive")
    rng = np.random.default_rng(cfg.seed)
    task = CopyPreviousTask(cfg, rng)
    params = _initial_params(cfg, rng)
    opt = Adam(lr=cfg.lr)
    data = [task.sample(rng) for _ in range(cfg.batch)]
    result = TrainResult()
    for _ in range(cfg.steps):
        total = 0.0
        grads = {name: np.zeros_like(a) for name, a in params.arrays().items()}
        for x, target in data:
            out, _ = _forward_with_cache(params, x, True, None)
            loss, upstream = task.loss_and_grad(out, target)
            total += loss / cfg.batch
            for name, g in tucker_backward(params, x, upstream / cfg.batch, causal=True).items():
                if name in grads:
                    grads[name] += g
        result.losses.append(total)
        if not np.isfinite(total):
            result.diverged = True
            break
        params = params.replace(**opt.step(params.arrays(), grads))
    result.params = params
    return result
