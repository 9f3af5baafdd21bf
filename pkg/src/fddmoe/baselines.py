"""Full-CSIT reference precoders: zero-forcing, WMMSE and a random control."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .objectives import rates

COND_LIMIT = 1e12


class SingularChannelError(np.linalg.LinAlgError):
    pass


def _power_normalize(V: np.ndarray, P: float) -> np.ndarray:
    return V * np.sqrt(P) / np.linalg.norm(V)


def zf_precoder(H: np.ndarray, P: float = 1.0) -> np.ndarray:
    """``gamma * H^H (H H^H)^-1`` scaled to total power ``P``."""
    H = np.asarray(H, dtype=np.complex128)
    K, n_tx = H.shape
    if K > n_tx:
        raise SingularChannelError(f"zero-forcing needs K <= n_tx, got K={K}, n_tx={n_tx}")
    gram = H @ H.conj().T
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularChannelError(f"H H^H is singular (condition number estimate {cond:.3e})")
    W = np.linalg.solve(gram, H).conj().T  # H^H (H H^H)^-1 since gram is Hermitian
    return _power_normalize(W, P)


def matched_filter(H: np.ndarray, P: float = 1.0) -> np.ndarray:
    return _power_normalize(np.asarray(H, dtype=np.complex128).conj().T, P)


def random_precoder(n_tx: int, K: int, P: float = 1.0, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n_tx, K)) + 1j * rng.standard_normal((n_tx, K))
    return _power_normalize(V, P)


@dataclass
class WmmseState:
    u: np.ndarray
    w: np.ndarray
    V: np.ndarray
    iterations: int = 0
    trace: list = field(default_factory=list)
    converged: bool = False


def _solve_power(A: np.ndarray, Bm: np.ndarray, P: float, rtol: float = 1e-12) -> np.ndarray:
    """Columns of ``(A + mu I)^-1 Bm`` with the smallest ``mu >= 0`` meeting power ``P``,
    rescaled so the total power is exactly ``P``.

    Uses the eigendecomposition of the Hermitian PSD matrix ``A`` so each power
    evaluation is O(n); ``mu`` is bracketed geometrically and bisected.
    """
    lam, U = np.linalg.eigh(A)
    lam = np.clip(lam, 0.0, None)
    c = np.sum(np.abs(U.conj().T @ Bm) ** 2, axis=1)

    def power(mu):
        return float(np.sum(c / (lam + mu) ** 2))

    def build(mu):
        return U @ ((U.conj().T @ Bm) / (lam + mu)[:, None])

    well_posed = lam.min() > lam.max() * 1e-12
    if well_posed and power(0.0) <= P:
        # spending the slack scales every SINR up, so the rate cannot drop
        return build(0.0) * np.sqrt(P / power(0.0))
    lo, hi = 0.0, max(float(lam.max()), 1e-12)
    while power(hi) > P:
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if power(mid) > P:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rtol * hi:
            break
    V = build(hi)
    # hi keeps power <= P; remove the residual bisection gap exactly
    return V * np.sqrt(P / power(hi))


def wmmse_precoder(H: np.ndarray, P: float, sigma2: float, max_iters: int = 100,
                   tol: float = 1e-5, V0: np.ndarray | None = None) -> tuple[np.ndarray, WmmseState]:
    """Weighted-MMSE block-coordinate ascent on the sum rate.

    Receivers ``u_k = h_k^H v_k / (sum_j |h_k^H v_j|^2 + sigma2)``, weights
    ``w_k = 1 / e_k`` with ``e_k`` the MMSE, and precoders
    ``v_k = (sum_j w_j |u_j|^2 h_j h_j^H + mu I)^-1 h_k u_k w_k``.
    Returns the best iterate; ``state.converged`` is False if ``max_iters`` ran out.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    H = np.asarray(H, dtype=np.complex128)
    K, n_tx = H.shape
    if V0 is None:
        try:
            V = zf_precoder(H, P) if K <= n_tx else matched_filter(H, P)
        except SingularChannelError:
            V = matched_filter(H, P)
    else:
        V = _power_normalize(np.asarray(V0, dtype=np.complex128), P)
    hcols = H.conj().T  # column k = h_k
    rate = float(rates(H, V, sigma2).sum())
    state = WmmseState(np.zeros(K, complex), np.ones(K), V, 0, [rate])
    best_V, best_rate = V, rate
    for it in range(1, max_iters + 1):
        G = H @ V
        total = np.sum(np.abs(G) ** 2, axis=1) + sigma2
        d = np.diagonal(G)
        u = d / total
        e = 1.0 - np.abs(d) ** 2 / total
        w = 1.0 / e
        coef = w * np.abs(u) ** 2
        A = (hcols * coef) @ hcols.conj().T
        Bm = hcols * (u * w)
        V = _solve_power(A, Bm, P)
        new_rate = float(rates(H, V, sigma2).sum())
        state.u, state.w, state.V, state.iterations = u, w, V, it
        state.trace.append(new_rate)
        if new_rate > best_rate:
            best_V, best_rate = V, new_rate
        if new_rate - rate < tol:
            state.converged = True
            break
        rate = new_rate
    state.V = best_V
    return best_V, state


def zf_batch(H: np.ndarray, P: float = 1.0) -> np.ndarray:
    return np.stack([zf_precoder(h, P) for h in H])


def wmmse_batch(H: np.ndarray, P: float, sigma2: float, **kw) -> np.ndarray:
    return np.stack([wmmse_precoder(h, P, sigma2, **kw)[0] for h in H])


def random_batch(H: np.ndarray, P: float = 1.0, seed: int = 0) -> np.ndarray:
    S, K, n_tx = H.shape
    return np.stack([random_precoder(n_tx, K, P, seed=[seed, i]) for i in range(S)])
