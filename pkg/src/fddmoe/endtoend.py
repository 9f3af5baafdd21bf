"""The end-to-end pipeline: learnable pilots, binary user feedback, MoE-Transformer precoder.

All forward functions are batched: a channel batch has shape (S, K, n_tx) and
every intermediate keeps the leading sample axis. Users are tokens; there is
no positional encoding, so the BS side is permutation-equivariant in users.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .channels import TaskConfig
from .diffcore import ComplexMatrix, Tensor

# When True every pilot/precoder normalization asserts its power constraint.
CHECK_CONSTRAINTS = False


class ConstraintViolation(AssertionError):
    pass


class DegeneratePrecoderError(ArithmeticError):
    pass


class UnknownTaskError(KeyError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_heads: int = 8
    n_experts: int = 8
    top_k: int = 3
    n_blocks: int = 5
    expert_ff: int = 256
    enc_hidden: int = 128
    enc_layers: int = 3
    dropout: float = 0.05
    ln_eps: float = 1e-5
    dsc_hidden: tuple[int, ...] = (512, 512)
    est_layers: int = 3

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        object.__setattr__(self, "dsc_hidden", tuple(int(v) for v in self.dsc_hidden))

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dsc_hidden"] = list(self.dsc_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "full": ModelConfig(),
    "desk": ModelConfig(d_model=64, n_heads=4, n_experts=4, top_k=2, n_blocks=2, expert_ff=128,
                        enc_hidden=128, dsc_hidden=(256, 256)),
    "tiny": ModelConfig(d_model=8, n_heads=2, n_experts=2, top_k=1, n_blocks=1, expert_ff=8,
                        enc_hidden=8, enc_layers=1, dsc_hidden=(16,), est_layers=1),
}


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _linear(params: dict, prefix: str, n_in: int, n_out: int, rng, dtype, zero_bias=False):
    params[f"{prefix}.w"] = dc.parameter(_uniform(rng, (n_in, n_out), n_in, dtype), dtype=dtype)
    b = np.zeros(n_out, dtype) if zero_bias else _uniform(rng, (n_out,), n_in, dtype)
    params[f"{prefix}.b"] = dc.parameter(b, dtype=dtype)


def init_trunk(arch: ModelConfig, rng: np.random.Generator, dtype=None) -> dict[str, Tensor]:
    dtype = dtype or dc.get_dtype()
    d, ff = arch.d_model, arch.expert_ff
    p: dict[str, Tensor] = {}
    for i in range(arch.n_blocks):
        pre = f"block{i}"
        for m in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.{m}"] = dc.parameter(_uniform(rng, (d, d), d, dtype), dtype=dtype)
        for ln in ("ln1", "ln2"):
            p[f"{pre}.{ln}.g"] = dc.parameter(np.ones(d, dtype), dtype=dtype)
            p[f"{pre}.{ln}.b"] = dc.parameter(np.zeros(d, dtype), dtype=dtype)
        _linear(p, f"{pre}.router", d, arch.n_experts, rng, dtype, zero_bias=True)
        for j in range(arch.n_experts):
            _linear(p, f"{pre}.expert{j}.l1", d, ff, rng, dtype)
            _linear(p, f"{pre}.expert{j}.l2", ff, d, rng, dtype)
    return p


def _init_pilot(cfg: TaskConfig, rng, dtype) -> Tensor:
    L = cfg.pilot_len
    z = rng.standard_normal((2, cfg.n_tx, L))
    z *= math.sqrt(cfg.pilot_symbol_energy) / np.sqrt((z ** 2).sum(axis=(0, 1), keepdims=True))
    return dc.parameter(z.astype(dtype), dtype=dtype)


def _mlp_params(p: dict, prefix: str, widths: list[int], rng, dtype):
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        _linear(p, f"{prefix}{i}", a, b, rng, dtype)


@dataclass
class TaskHead:
    """Task-specific parameters: pilot, user-side network and BS input/output maps."""

    config: TaskConfig
    kind: str
    params: dict[str, Tensor] = field(default_factory=dict)


def init_task(cfg: TaskConfig, arch: ModelConfig, rng, kind: str = "e2e", dtype=None) -> TaskHead:
    dtype = dtype or dc.get_dtype()
    L, B = cfg.pilot_len, cfg.feedback_bits
    n_tx, K, d = cfg.n_tx, cfg.n_users, arch.d_model
    p: dict[str, Tensor] = {"pilot": _init_pilot(cfg, rng, dtype)}
    if kind in ("e2e", "dsc"):
        _mlp_params(p, "enc.", [2 * L] + [arch.enc_hidden] * arch.enc_layers + [B], rng, dtype)
    if kind == "e2e":
        _linear(p, "in", B, d, rng, dtype)
        _linear(p, "out", d, 2 * n_tx, rng, dtype)
    elif kind == "dsc":
        _mlp_params(p, "dsc.", [B * K] + list(arch.dsc_hidden) + [2 * n_tx * K], rng, dtype)
    elif kind == "cep":
        _mlp_params(p, "est.", [2 * L] + [arch.enc_hidden] * arch.est_layers + [2 * n_tx], rng, dtype)
        _linear(p, "in", 2 * n_tx, d, rng, dtype)
        _linear(p, "out", d, 2 * n_tx, rng, dtype)
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return TaskHead(cfg, kind, p)


def _task_rng(seed: int, task_id: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, 1, zlib.crc32(task_id.encode())])


class ModelBundle:
    """Shared trunk parameters plus a map of task-specific heads."""

    def __init__(self, arch: ModelConfig, trunk: dict[str, Tensor], tasks: dict[str, TaskHead] | None = None):
        self.arch = arch
        self.trunk = trunk
        self.tasks: dict[str, TaskHead] = dict(tasks or {})

    @classmethod
    def create(cls, arch: ModelConfig, configs=(), seed: int = 0, kind: str = "e2e", dtype=None) -> "ModelBundle":
        trunk = {} if kind == "dsc" else init_trunk(arch, np.random.default_rng([seed & 0xFFFFFFFF, 0]), dtype)
        b = cls(arch, trunk)
        for cfg in configs:
            b.add_task(cfg, seed=seed, kind=kind, dtype=dtype)
        return b

    def add_task(self, cfg: TaskConfig, seed: int = 0, kind: str = "e2e", dtype=None) -> TaskHead:
        if cfg.task_id in self.tasks:
            raise ValueError(f"task {cfg.task_id!r} already registered")
        dtype = dtype or self.dtype
        head = init_task(cfg, self.arch, _task_rng(seed, cfg.task_id), kind, dtype)
        self.tasks[cfg.task_id] = head
        return head

    def task(self, task_id: str) -> TaskHead:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise UnknownTaskError(f"task {task_id!r} is not registered in this model") from None

    @property
    def dtype(self):
        for t in self.trunk.values():
            return t.dtype
        for h in self.tasks.values():
            for t in h.params.values():
                return t.dtype
        return dc.get_dtype()

    def trunk_parameters(self) -> dict[str, Tensor]:
        return {f"trunk.{k}": v for k, v in self.trunk.items()}

    def task_parameters(self, task_id: str) -> dict[str, Tensor]:
        return {f"task.{task_id}.{k}": v for k, v in self.task(task_id).params.items()}

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.trunk_parameters()
        for tid in self.tasks:
            out.update(self.task_parameters(tid))
        return out

    def freeze_trunk(self, frozen: bool = True) -> None:
        for t in self.trunk.values():
            t.requires_grad = not frozen
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None


# ---------------------------------------------------------------------------
# pipeline stages


def _check(norm2: np.ndarray, target: float, what: str):
    if not CHECK_CONSTRAINTS:
        return
    tol = 1e-9 if norm2.dtype == np.float64 else 1e-5
    err = np.max(np.abs(norm2 / target - 1.0))
    if err > tol:
        raise ConstraintViolation(f"{what} power off by relative {err:.3e} (tolerance {tol})")


def normalize_pilot(X: Tensor, energy: float) -> ComplexMatrix:
    """Rescale each pilot column to squared norm ``energy`` (differentiable)."""
    norm2 = (X * X).sum(axis=(0, 1))  # (L,)
    s = dc.sqrt(norm2 / energy)
    Xn = X / s
    _check((Xn.data ** 2).sum(axis=(0, 1)), energy, "pilot column")
    return ComplexMatrix(Xn[0], Xn[1])


def _as_channel(H, dtype) -> ComplexMatrix:
    if isinstance(H, ComplexMatrix):
        return H
    H = np.asarray(H)
    return ComplexMatrix(Tensor._wrap(H.real.astype(dtype)), Tensor._wrap(H.imag.astype(dtype)))


def complex_noise(shape, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """Circularly-symmetric complex Gaussian with per-entry variance ``sigma2``."""
    s = math.sqrt(sigma2 / 2.0)
    return s * rng.standard_normal(shape) + 1j * s * rng.standard_normal(shape)


def pilot_forward(H, X: Tensor, sigma2: float, energy: float = 1.0, rng=None, noise=None) -> ComplexMatrix:
    """Received pilots ``y_k = h_k^H X + z_k`` for every user; shape (..., K, L)."""
    Hc = _as_channel(H, X.dtype)
    if Hc.shape[-1] != X.shape[1]:
        raise dc.ShapeError(f"channel width {Hc.shape[-1]} does not match pilot rows {X.shape[1]}")
    Y = Hc @ normalize_pilot(X, energy)
    if noise is None and sigma2 > 0:
        if rng is None:
            raise ValueError("noisy pilot transmission needs an rng or explicit noise")
        noise = complex_noise(Y.shape, sigma2, rng)
    if noise is not None:
        noise = np.asarray(noise)
        if noise.shape != Y.shape:
            raise dc.ShapeError(f"noise shape {noise.shape} does not match received pilots {Y.shape}")
        Y = ComplexMatrix(Y.re + noise.real.astype(X.dtype), Y.im + noise.imag.astype(X.dtype))
    return Y


def binarize(x: Tensor, mode: str = "ste") -> Tensor:
    """Sign quantizer with ``sign(0) = +1``.

    Backward is straight-through gated by ``|x| <= 1``. ``mode="surrogate"``
    swaps the forward for hard-tanh, which has exactly that gradient, so the
    upstream path can be checked against finite differences.
    """
    if mode == "surrogate":
        return dc.hardtanh(x)
    if mode != "ste":
        raise ValueError(f"unknown quantizer mode {mode!r}")
    mask = np.abs(x.data) <= 1
    out = np.where(x.data >= 0, 1, -1).astype(x.dtype)
    return dc._make(out, (x,), lambda g, needs: (g * mask,))


def mlp(x: Tensor, params: dict, prefix: str, n_layers: int) -> Tensor:
    """ReLU MLP over the last axis; the final layer is linear."""
    for i in range(n_layers):
        w, b = params[f"{prefix}{i}.w"], params[f"{prefix}{i}.b"]
        if x.shape[-1] != w.shape[0]:
            raise dc.ShapeError(f"{prefix}{i}: input width {x.shape[-1]} but layer expects {w.shape[0]}")
        x = x @ w + b
        if i < n_layers - 1:
            x = dc.relu(x)
    return x


def _n_layers(params: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}{n}.w" in params:
        n += 1
    return n


def _pilot_features(Y: ComplexMatrix) -> Tensor:
    return dc.concat([Y.re, Y.im], axis=-1)


def encode_feedback(Y: ComplexMatrix, params: dict, quantizer: str = "ste") -> Tensor:
    """Shared user encoder: ``[re(y_k); im(y_k)]`` -> MLP -> ``{-1, +1}^B``; shape (..., K, B)."""
    x = _pilot_features(Y)
    return binarize(mlp(x, params, "enc.", _n_layers(params, "enc.")), quantizer)


def aggregate(qs) -> Tensor:
    """Stack per-user feedback vectors (each length B) as the columns of a B x K matrix."""
    qs = [dc.as_tensor(q) for q in qs]
    if not qs:
        raise dc.ShapeError("no feedback vectors")
    B = qs[0].shape[-1]
    for q in qs:
        if q.shape != (B,):
            raise dc.ShapeError(f"ragged feedback: expected length {B}, got shape {q.shape}")
    return dc.concat([q.reshape(B, 1) for q in qs], axis=1)


def input_proj(Q: Tensor, params: dict) -> Tensor:
    """Tokens ``Q^T W_in + 1 b_in^T`` from a (..., B, K) feedback matrix."""
    w = params["in.w"]
    if Q.shape[-2] != w.shape[0]:
        raise dc.ShapeError(f"feedback length {Q.shape[-2]} does not match input projection {w.shape}")
    return Q.T @ w + params["in.b"]


def mhsa_sublayer(Z: Tensor, trunk: dict, block: int, arch: ModelConfig,
                  training: bool = False, rng=None) -> Tensor:
    pre = f"block{block}"
    H, dh = arch.n_heads, arch.d_head
    lead = Z.shape[:-2]
    K, d = Z.shape[-2:]

    def heads(t: Tensor) -> Tensor:
        t = t.reshape(lead + (K, H, dh))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return t.transpose(axes)

    q = heads(Z @ trunk[f"{pre}.wq"])
    k = heads(Z @ trunk[f"{pre}.wk"])
    v = heads(Z @ trunk[f"{pre}.wv"])
    att = dc.softmax(dc.scale(q @ k.T, 1.0 / math.sqrt(dh)))
    x = att @ v  # (..., H, K, dh)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    x = x.transpose(axes).reshape(lead + (K, d))
    mha = x @ trunk[f"{pre}.wo"]
    mha = dc.dropout(mha, arch.dropout, training, rng)
    return dc.layer_norm(Z + mha, trunk[f"{pre}.ln1.g"], trunk[f"{pre}.ln1.b"], arch.ln_eps)


def route(logits: np.ndarray, top_k: int) -> np.ndarray:
    """Boolean (T, E) mask of the top-k experts per row; ties go to the lower index."""
    E = logits.shape[-1]
    if not 1 <= top_k <= E:
        raise ValueError(f"top_k={top_k} must lie in [1, {E}]")
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :top_k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def expert_forward(x: Tensor, trunk: dict, block: int, j: int) -> Tensor:
    pre = f"block{block}.expert{j}"
    h = dc.relu(x @ trunk[f"{pre}.l1.w"] + trunk[f"{pre}.l1.b"])
    return h @ trunk[f"{pre}.l2.w"] + trunk[f"{pre}.l2.b"]


def moe_ffn_sublayer(Zb: Tensor, trunk: dict, block: int, arch: ModelConfig,
                     training: bool = False, rng=None, stats: dict | None = None) -> Tensor:
    pre = f"block{block}"
    shape = Zb.shape
    d = shape[-1]
    tokens = Zb.reshape(-1, d)
    T = tokens.shape[0]
    logits = tokens @ trunk[f"{pre}.router.w"] + trunk[f"{pre}.router.b"]
    mask = route(logits.data, arch.top_k)
    gates = dc.softmax(logits, mask)
    parts = []
    for j in range(arch.n_experts):
        rows = np.flatnonzero(mask[:, j])
        if rows.size == 0:
            continue
        y = expert_forward(dc.take_rows(tokens, rows), trunk, block, j)
        g = dc.getitem(gates, (rows, j)).reshape(-1, 1)
        parts.append((y * g, rows))
    moe = dc.scatter_rows(T, parts).reshape(shape)
    if stats is not None:
        counts = stats.setdefault("expert_counts", {})
        counts[block] = counts.get(block, 0) + mask.sum(axis=0)
        stats.setdefault("gates", {})[block] = gates.data
    moe = dc.dropout(moe, arch.dropout, training, rng)
    return dc.layer_norm(Zb + moe, trunk[f"{pre}.ln2.g"], trunk[f"{pre}.ln2.b"], arch.ln_eps)


def trunk_forward(Z0: Tensor, trunk: dict, arch: ModelConfig, mode: str = "eval",
                  rng=None, stats: dict | None = None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    Z = Z0
    for i in range(arch.n_blocks):
        Z = mhsa_sublayer(Z, trunk, i, arch, training, rng)
        Z = moe_ffn_sublayer(Z, trunk, i, arch, training, rng, stats)
    return Z


def _split_precoder(rows: Tensor, n_tx: int) -> ComplexMatrix:
    # rows: (..., K, 2 n_tx) -> V_raw (..., n_tx, K)
    return ComplexMatrix(rows[..., :n_tx].T, rows[..., n_tx:].T)


def output_head(ZL: Tensor, params: dict, n_tx: int) -> ComplexMatrix:
    w = params["out.w"]
    if w.shape[1] != 2 * n_tx:
        raise dc.ShapeError(f"output head width {w.shape[1]} != 2 * n_tx = {2 * n_tx}")
    return _split_precoder(ZL @ w + params["out.b"], n_tx)


def power_normalize(V: ComplexMatrix, P: float) -> ComplexMatrix:
    """Scale each precoder (trailing n_tx x K block) to Frobenius norm sqrt(P)."""
    norm2 = V.abs2().sum(axis=(-2, -1), keepdims=True)
    if np.any(norm2.data <= 0):
        raise DegeneratePrecoderError("precoder has zero Frobenius norm")
    s = dc.sqrt(norm2 / P)
    out = ComplexMatrix(V.re / s, V.im / s)
    _check((out.re.data ** 2 + out.im.data ** 2).sum(axis=(-2, -1)), P, "precoder")
    return out


def dsc_decoder_forward(Q: Tensor, params: dict, n_tx: int) -> ComplexMatrix:
    """Plain MLP decoder over the flattened (..., B, K) feedback matrix."""
    lead = Q.shape[:-2]
    B, K = Q.shape[-2:]
    w0 = params["dsc.0.w"]
    if B * K != w0.shape[0]:
        raise dc.ShapeError(f"DSC decoder expects {w0.shape[0]} feedback bits, got B*K = {B * K}")
    x = Q.T.reshape(lead + (1, K * B))
    y = mlp(x, params, "dsc.", _n_layers(params, "dsc."))
    return _split_precoder(y.reshape(lead + (K, 2 * n_tx)), n_tx)


def estimate_channels(Y: ComplexMatrix, params: dict) -> Tensor:
    """CEP user-side estimator: received pilots -> ``[re; im]`` of the channel row, (..., K, 2 n_tx)."""
    return mlp(_pilot_features(Y), params, "est.", _n_layers(params, "est."))


def forward_end_to_end(H, bundle: ModelBundle, task_id: str, mode: str = "eval", rng=None,
                       noise=None, quantizer: str = "ste", stats: dict | None = None,
                       sigma2: float | None = None) -> ComplexMatrix:
    """Channel batch (S, K, n_tx) -> normalized precoders (S, n_tx, K).

    ``rng`` drives both pilot noise and dropout; pass ``noise`` to pin the
    pilot noise realization explicitly.
    """
    head = bundle.task(task_id)
    cfg, p = head.config, head.params
    Hc = _as_channel(H, bundle.dtype)
    if Hc.shape[-2:] != (cfg.n_users, cfg.n_tx):
        raise dc.ShapeError(f"channel shape {Hc.shape} does not match task {task_id!r} "
                            f"(K={cfg.n_users}, n_tx={cfg.n_tx})")
    s2 = cfg.sigma2 if sigma2 is None else sigma2
    Y = pilot_forward(Hc, p["pilot"], s2, cfg.pilot_symbol_energy, rng=rng, noise=noise)
    if head.kind == "cep":
        with dc.no_grad():
            est = estimate_channels(Y, p).detach()
        Z0 = est @ p["in.w"] + p["in.b"]
        V_raw = output_head(trunk_forward(Z0, bundle.trunk, bundle.arch, mode, rng, stats), p, cfg.n_tx)
        return power_normalize(V_raw, cfg.power)
    q = encode_feedback(Y, p, quantizer)
    Q = q.T  # (..., B, K): column k is user k's message
    if head.kind == "dsc":
        V_raw = dsc_decoder_forward(Q, p, cfg.n_tx)
    else:
        Z0 = input_proj(Q, p)
        V_raw = output_head(trunk_forward(Z0, bundle.trunk, bundle.arch, mode, rng, stats), p, cfg.n_tx)
    return power_normalize(V_raw, cfg.power)
