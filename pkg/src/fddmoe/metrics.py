"""Spectral-efficiency evaluation, parameter/FLOP counters, domain gaps and scaling sweeps.

FLOP convention: a (m x k)(k x n) product costs 2mkn, bias adds / ReLU /
residual adds cost one per element, softmax four per element and layer norm
eight per element. Only the top-k activated experts are counted per token.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import baselines
from . import diffcore as dc
from .channels import ChannelDataset, TaskConfig
from .endtoend import ModelBundle, ModelConfig, complex_noise, forward_end_to_end
from .objectives import rates


@dataclass
class MetricsRecord:
    task_id: str
    scheme: str
    snr_db: float
    spectral_efficiency: float
    param_count: int = 0
    flops_forward: int = 0
    wall_time: float = 0.0
    seed: int = 0


@dataclass
class DomainGap:
    l_source: float
    l_target: float
    d_sub: float
    d_div: float


def domain_gap(l_source: float, l_target: float) -> DomainGap:
    if l_source <= 0:
        raise ValueError("source performance must be positive")
    d_sub = l_source - l_target
    return DomainGap(l_source, l_target, d_sub, d_sub / l_source)


# ---------------------------------------------------------------------------
# schemes: callables (H batch, sample indices) -> V batch (complex numpy)

Scheme = Callable[[np.ndarray, np.ndarray], np.ndarray]


def eval_noise(cfg: TaskConfig, indices, seed: int, sigma2: float) -> np.ndarray:
    """Pilot noise per sample from a stream keyed by (seed, sample index)."""
    L = cfg.pilot_len
    return np.stack([complex_noise((cfg.n_users, L), sigma2, np.random.default_rng([seed, int(i)]))
                     for i in indices])


def model_scheme(bundle: ModelBundle, task_id: str, seed: int = 0, sigma2: float | None = None) -> Scheme:
    cfg = bundle.task(task_id).config
    s2 = cfg.sigma2 if sigma2 is None else sigma2

    def run(H, idx):
        with dc.no_grad():
            V = forward_end_to_end(H, bundle, task_id, "eval", noise=eval_noise(cfg, idx, seed, s2), sigma2=s2)
        return V.numpy()
    return run


def baseline_scheme(name: str, P: float, sigma2: float, seed: int = 0, **kw) -> Scheme:
    if name == "zf":
        return lambda H, idx: np.stack([baselines.zf_precoder(h, P) for h in H])
    if name == "wmmse":
        return lambda H, idx: np.stack([baselines.wmmse_precoder(h, P, sigma2, **kw)[0] for h in H])
    if name == "random":
        return lambda H, idx: np.stack([baselines.random_precoder(H.shape[2], H.shape[1], P, seed=[seed, int(i)])
                                        for i in idx])
    raise ValueError(f"unknown baseline scheme {name!r}")


def evaluate(scheme: Scheme, test: ChannelDataset, sigma2: float | None = None, name: str = "model",
             seed: int = 0, batch: int = 1024, config: TaskConfig | None = None,
             param_count: int = 0, flops: int = 0) -> MetricsRecord:
    """Mean sum rate over the test samples, in bits/s/Hz."""
    cfg = test.config
    if config is not None and (config.n_users, config.n_tx) != (cfg.n_users, cfg.n_tx):
        raise ValueError(f"scheme built for K={config.n_users}, n_tx={config.n_tx} but data has "
                         f"K={cfg.n_users}, n_tx={cfg.n_tx}")
    s2 = cfg.sigma2 if sigma2 is None else sigma2
    t0 = time.perf_counter()
    per_sample = np.empty(len(test))
    for start in range(0, len(test), batch):
        idx = np.arange(start, min(start + batch, len(test)))
        H = test.samples[idx]
        V = scheme(H, idx)
        per_sample[idx] = rates(H.astype(np.complex128), V.astype(np.complex128), s2).sum(axis=-1)
    wall = time.perf_counter() - t0
    snr = 10 * np.log10(cfg.power / s2)
    return MetricsRecord(cfg.task_id, name, float(round(snr, 10)), float(per_sample.mean()),
                         int(param_count), int(flops), wall, seed)


# ---------------------------------------------------------------------------
# counters


def count_params(obj) -> dict[str, int]:
    """Exact scalar-parameter counts: ``trunk``, ``task:<id>`` and ``total``."""
    if isinstance(obj, ModelBundle):
        out = {"trunk": sum(t.size for t in obj.trunk.values())}
        for tid, head in obj.tasks.items():
            out[f"task:{tid}"] = sum(t.size for t in head.params.values())
        out["total"] = sum(out.values())
        return out
    if isinstance(obj, dict):
        n = sum(int(np.prod(t.shape)) for t in obj.values())
        return {"total": n}
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")


def mlp_param_count(widths) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def trunk_param_formula(arch: ModelConfig) -> int:
    d, E, ff = arch.d_model, arch.n_experts, arch.expert_ff
    per_block = 4 * d * d + 2 * (2 * d) + d * E + E + E * (2 * d * ff + ff + d)
    return arch.n_blocks * per_block


def matmul_flops(m, k, n) -> int:
    return 2 * m * k * n


def _linear_flops(m, k, n, bias=True) -> int:
    return matmul_flops(m, k, n) + (m * n if bias else 0)


def _mlp_flops(m, widths) -> int:
    total = 0
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        total += _linear_flops(m, a, b)
        if i < len(widths) - 2:
            total += m * b
    return total


def count_flops(arch: ModelConfig, cfg: TaskConfig, kind: str = "e2e", batch: int = 1) -> dict[str, int]:
    """Forward FLOPs per component for ``batch`` channel samples, plus ``total``."""
    K, n_tx, L, B = cfg.n_users, cfg.n_tx, cfg.pilot_len, cfg.feedback_bits
    d, H, dh, E, k, ff = arch.d_model, arch.n_heads, arch.d_head, arch.n_experts, arch.top_k, arch.expert_ff
    c: dict[str, int] = {}
    c["pilot"] = 4 * 2 * K * n_tx * L + 2 * K * L  # four real products + noise add
    if kind in ("e2e", "dsc"):
        c["user_encoder"] = _mlp_flops(K, [2 * L] + [arch.enc_hidden] * arch.enc_layers + [B]) + K * B
    else:
        c["user_encoder"] = _mlp_flops(K, [2 * L] + [arch.enc_hidden] * arch.est_layers + [2 * n_tx])
    if kind == "dsc":
        c["decoder"] = _mlp_flops(1, [B * K] + list(arch.dsc_hidden) + [2 * n_tx * K])
    else:
        width_in = B if kind == "e2e" else 2 * n_tx
        c["input_proj"] = _linear_flops(K, width_in, d)
        nb = arch.n_blocks
        c["attention"] = nb * (4 * 2 * K * d * d + 2 * 2 * H * K * K * dh + 4 * H * K * K + H * K * K + K * d)
        c["router"] = nb * (_linear_flops(K, d, E) + 4 * K * k)
        c["experts"] = nb * K * k * ff * (4 * d + 2)
        c["moe_combine"] = nb * 3 * K * k * d
        c["layernorm"] = nb * 2 * (8 * K * d + K * d)
        c["output_head"] = _linear_flops(K, d, 2 * n_tx)
    c["power_norm"] = 2 * 2 * n_tx * K + 2 * n_tx * K
    c = {key: v * batch for key, v in c.items()}
    c["total"] = sum(c.values())
    return c


def dense_expert_flops(arch: ModelConfig, cfg: TaskConfig, batch: int = 1) -> int:
    """Expert FLOPs if every token visited all experts (reference for sparsity)."""
    return batch * arch.n_blocks * cfg.n_users * arch.n_experts * arch.expert_ff * (4 * arch.d_model + 2)


# ---------------------------------------------------------------------------
# scaling sweep


def scaled_arch(base: ModelConfig, axis: str, value: int) -> ModelConfig:
    if axis == "experts":
        return replace(base, n_experts=int(value), top_k=min(base.top_k, int(value)))
    if axis == "width":
        ratio = base.expert_ff / base.d_model
        return replace(base, d_model=int(value), expert_ff=int(round(value * ratio)))
    raise ValueError(f"unknown scaling axis {axis!r}")


def scaling_study(cfg: TaskConfig, base: ModelConfig, axis: str, grid, train: ChannelDataset,
                  test: ChannelDataset, plan, seed: int = 0) -> list[dict]:
    """Train and evaluate one model per grid point; rows of (value, params, flops, SE)."""
    from .training import train_stl

    grid = list(grid)
    if not grid:
        raise ValueError("empty scaling grid")
    rows = []
    for value in grid:
        arch = scaled_arch(base, axis, value)
        bundle, _, _ = train_stl(cfg, train, plan, arch)
        rec = evaluate(model_scheme(bundle, cfg.task_id, seed), test, name=f"{axis}={value}", seed=seed)
        rows.append({"axis": axis, "value": value, "params": count_params(bundle)["total"],
                     "flops": count_flops(arch, cfg)["total"], "spectral_efficiency": rec.spectral_efficiency,
                     "n_experts": arch.n_experts, "top_k": arch.top_k, "d_model": arch.d_model})
    return rows


# ---------------------------------------------------------------------------
# export

CSV_FIELDS = ("scheme", "task_id", "snr_db", "spectral_efficiency", "params", "flops_m", "seed", "wall_ms")


def record_row(r: MetricsRecord) -> dict:
    return {"scheme": r.scheme, "task_id": r.task_id, "snr_db": r.snr_db,
            "spectral_efficiency": repr(r.spectral_efficiency), "params": r.param_count,
            "flops_m": repr(r.flops_forward / 1e6), "seed": r.seed, "wall_ms": repr(r.wall_time * 1e3)}


def write_metrics_csv(records, path, config: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(record_row(r))
    if config is not None:
        with open(f"{path}.json", "w") as fh:
            json.dump(config, fh, indent=2, sort_keys=True)


def read_metrics_csv(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(MetricsRecord(
                task_id=row["task_id"], scheme=row["scheme"], snr_db=float(row["snr_db"]),
                spectral_efficiency=float(row["spectral_efficiency"]), param_count=int(row["params"]),
                flops_forward=int(round(float(row["flops_m"]) * 1e6)),
                wall_time=float(row["wall_ms"]) / 1e3, seed=int(row["seed"])))
    return out


def records_to_json(records) -> list[dict]:
    return [asdict(r) for r in records]
