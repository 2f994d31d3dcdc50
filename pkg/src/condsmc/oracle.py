"""Exact inference on finite-state models by path enumeration.

Everything here is exact up to floating point: tables over all ``K**(n+1)``
paths, backward functions, the bound constants, the asymptotic variance and
the full transition matrix of the conditional SMC kernel on tiny problems.
Sizes beyond :data:`ENUMERATION_CAP` raise :class:`TooLarge`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import TooLarge, ZeroNormalizer
from .model import HmmModel, TestFunction, index_path, path_index

ENUMERATION_CAP = 10**7


def _check_cap(count: int, what: str):
    if count > ENUMERATION_CAP:
        raise TooLarge(f"{what} needs {count} entries (cap {ENUMERATION_CAP})")


def unnormalized_path_weights(model: HmmModel) -> list[np.ndarray]:
    """``w_k(x_{0:k}) = m0(x_0) prod_{i<k} G_i(x_i) q(x_{i+1}|x_i)`` for k = 0..n.

    Each entry is a flat array in lexicographic path order.
    """
    _check_cap(model.num_paths, "path enumeration")
    K = model.num_states
    w = model.m0.copy()
    out = [w]
    for i in range(model.horizon):
        step = model.potentials[i][:, None] * model.q  # (x_i, x_{i+1})
        w = (w.reshape(-1, K)[:, :, None] * step[None, :, :]).reshape(-1)
        out.append(w)
    return out


@dataclass(frozen=True)
class ExactMeasures:
    eta: list  # eta[k]: flat table over K**(k+1) paths
    pi: np.ndarray
    eta_normalizers: list
    pi_normalizer: float

    def eta_marginal(self, k: int, num_states: int) -> np.ndarray:
        return self.eta[k].reshape(-1, num_states).sum(axis=0)

    def pi_marginal(self, num_states: int) -> np.ndarray:
        return self.pi.reshape(-1, num_states).sum(axis=0)


def exact_measures(model: HmmModel) -> ExactMeasures:
    """The predictive path laws ``eta_0..eta_n`` and the smoothing law ``pi_n``."""
    weights = unnormalized_path_weights(model)
    eta, norms = [], []
    for w in weights:
        z = float(w.sum())
        if not z > 0:
            raise ZeroNormalizer("every path has zero weight")
        eta.append(w / z)
        norms.append(z)
    K = model.num_states
    wpi = (weights[-1].reshape(-1, K) * model.potentials[-1]).reshape(-1)
    zpi = float(wpi.sum())
    if not zpi > 0:
        raise ZeroNormalizer("every path has zero weight under the terminal potential")
    return ExactMeasures(eta=eta, pi=wpi / zpi, eta_normalizers=norms, pi_normalizer=zpi)


def forward_marginals(model: HmmModel) -> tuple[list[np.ndarray], np.ndarray]:
    """Marginals of ``X_k`` under ``eta_k`` (k = 0..n) and of ``X_n`` under ``pi_n``.

    Computed by the filtering recursion, independently of path enumeration.
    """
    alpha = model.m0.copy()
    out = [alpha]
    for k in range(model.horizon):
        nxt = (alpha * model.potentials[k]) @ model.q
        s = nxt.sum()
        if not s > 0:
            raise ZeroNormalizer(f"predictive mass vanishes at step {k + 1}")
        alpha = nxt / s
        out.append(alpha)
    last = alpha * model.potentials[-1]
    return out, last / last.sum()


@dataclass(frozen=True)
class BackwardTable:
    """``Q[k] = Q_{k,n}(G_n)`` and ``p[k] = p_{k+1,n}`` as state-indexed vectors.

    ``p[n]`` is identically one so that ``Q[k] = G_k * p[k]`` for every k.
    ``ones[k]`` holds ``Q_{k,n}(1)``.
    """

    Q: np.ndarray
    p: np.ndarray
    ones: np.ndarray


def backward_tables(model: HmmModel) -> BackwardTable:
    n, K = model.horizon, model.num_states
    G = model.potentials
    p = np.ones((n + 1, K))
    ones = np.ones((n + 1, K))
    for k in range(n - 1, -1, -1):
        p[k] = model.q @ (G[k + 1] * p[k + 1])
        ones[k] = G[k] * (model.q @ ones[k + 1])
    Q = G * p
    for a in (Q, p, ones):
        a.setflags(write=False)
    return BackwardTable(Q=Q, p=p, ones=ones)


def backward_residual(model: HmmModel, table: BackwardTable) -> float:
    """Largest relative violation of ``Q_k = G_k * q Q_{k+1}`` and ``Q_n = G_n``."""
    G = model.potentials
    worst = float(np.max(np.abs(table.Q[-1] - G[-1])))
    for k in range(model.horizon):
        rhs = G[k] * (model.q @ table.Q[k + 1])
        scale = max(1.0, float(np.abs(rhs).max()))
        worst = max(worst, float(np.max(np.abs(table.Q[k] - rhs))) / scale)
    return worst


def self_check(model: HmmModel) -> dict:
    """Agreement deltas between the independent exact computations."""
    measures = exact_measures(model)
    fwd, fwd_pi = forward_marginals(model)
    K = model.num_states
    marg = max(float(np.max(np.abs(measures.eta_marginal(k, K) - fwd[k]))) for k in range(model.horizon + 1))
    marg = max(marg, float(np.max(np.abs(measures.pi_marginal(K) - fwd_pi))))
    table = backward_tables(model)
    mass = float(model.m0 @ table.Q[0])
    return {
        "marginal_delta": marg,
        "backward_residual": backward_residual(model, table),
        "normalizer_delta": abs(mass - measures.pi_normalizer) / measures.pi_normalizer,
    }


def prefix_tables(model: HmmModel, f: TestFunction) -> list[np.ndarray]:
    """``Q_{k,n}(f)`` as a table over path prefixes ``x_{0:k}``, k = 0..n."""
    _check_cap(model.num_paths, "prefix tables")
    K, n = model.num_states, model.horizon
    T = np.asarray(f.table(), dtype=float)
    out = [T]
    for j in range(n - 1, -1, -1):
        T = model.potentials[j] * np.einsum("pab,ab->pa", T.reshape(-1, K, K), model.q)
        T = T.reshape(-1)
        out.append(T)
    return out[::-1]


def terminal_backward(model: HmmModel, h: np.ndarray) -> np.ndarray:
    """``Q_{k,n}(f)`` for ``f(x) = h[x_n]``; row k is indexed by ``x_k``."""
    n = model.horizon
    out = np.empty((n + 1, model.num_states))
    out[n] = h
    for k in range(n - 1, -1, -1):
        out[k] = model.potentials[k] * (model.q @ out[k + 1])
    return out


def expectation(model: HmmModel, f: TestFunction, measures: ExactMeasures | None = None) -> tuple[float, float]:
    """Exact ``(eta_n(f), pi_n(f))``."""
    measures = measures or exact_measures(model)
    t = f.table()
    return float(measures.eta[-1] @ t), float(measures.pi @ t)


def clt_variance(model: HmmModel, f: TestFunction, *, center: bool = True) -> float:
    """Asymptotic variance of ``sqrt(N) (eta_hat_n(f) - eta_n(f))``.

    Evaluates::

        eta_n((f - eta_n f)^2)
          + sum_{k<n} eta_k((Q_{k,n} g - eta_k Q_{k,n} g)^2) / (eta_k Q_{k,n} 1)^2

    by enumeration, with ``g = f - eta_n(f)``.  ``center=False`` uses
    ``g = f`` instead; that variant does not vanish for constant ``f`` and
    overstates the variance of the particle estimate, but it is kept because
    some references state the display in that form.
    """
    K, n = model.num_states, model.horizon
    measures = exact_measures(model)
    t = np.asarray(f.table(), dtype=float)
    mean = float(measures.eta[-1] @ t)
    total = float(measures.eta[-1] @ (t - mean) ** 2)
    if n == 0:
        return total
    g = TestFunction.from_table(t - mean if center else t, n, K)
    Qf = prefix_tables(model, g)
    Q1 = prefix_tables(model, TestFunction.constant(n, K, 1.0))
    for k in range(n):
        eta_k = measures.eta[k]
        norm = float(eta_k @ Q1[k])
        centre = float(eta_k @ Qf[k])
        total += float(eta_k @ ((Qf[k] - centre) / norm) ** 2)
    return total


def clt_variance_terminal(model: HmmModel, h: np.ndarray, *, center: bool = True) -> float:
    """:func:`clt_variance` for ``f(x) = h[x_n]`` using state-indexed recursions."""
    n = model.horizon
    fwd, _ = forward_marginals(model)
    h = np.asarray(h, dtype=float)
    mean = float(fwd[n] @ h)
    total = float(fwd[n] @ (h - mean) ** 2)
    Qf = terminal_backward(model, h - mean if center else h)
    Q1 = terminal_backward(model, np.ones(model.num_states))
    for k in range(n):
        norm = float(fwd[k] @ Q1[k])
        centre = float(fwd[k] @ Qf[k])
        total += float(fwd[k] @ ((Qf[k] - centre) / norm) ** 2)
    return total


def theorem2_bound(n: int, N: int, a: float, c: float, g_lower: float) -> float:
    """Explicit bound on ``|P^N_n(f) - pi_n(f)|`` for ``sup|f| <= 1``.

    ``(2 (n+1) r - 1) / (N - 1 + 2 r) + n r**2 / N`` with ``r = a c / g_lower``.
    """
    r = a * c / g_lower
    return (2 * (n + 1) * r - 1) / (N - 1 + 2 * r) + n * r * r / N


def stabilized_bound(C: float, a: float, c: float, g_lower: float) -> float:
    """Horizon-free bound obtained with ``N = C (n+1) + 1`` particles."""
    r = a * c / g_lower
    return r * (2 + r) / C


def perturbation_envelope(N: int, a: float, c: float, g_lower: float) -> float:
    """``(2r - 1) / (N - 1 + 2r)``: bound on the expected reference share ``E(Z_n)``."""
    r = a * c / g_lower
    return (2 * r - 1) / (N - 1 + 2 * r)


def osc(f) -> float:
    """Oscillation ``max f - min f`` over all paths."""
    t = f.table() if isinstance(f, TestFunction) else np.asarray(f)
    return float(t.max() - t.min())


def sample_paths(table: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` path indices from a probability table by inverse CDF."""
    cdf = np.cumsum(table)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, rng.random(count), side="right")
    return np.minimum(idx, np.flatnonzero(table > 0)[-1])


def paths_from_indices(indices, num_states: int, horizon: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.empty(idx.shape + (horizon + 1,), dtype=np.int64)
    for k in range(horizon, -1, -1):
        out[..., k] = idx % num_states
        idx = idx // num_states
    return out


def exact_kernel(model: HmmModel, N: int) -> np.ndarray:
    """Transition matrix of the conditional SMC kernel over all paths.

    Row ``i`` is the law of the returned path when the reference is the path
    with lexicographic index ``i``.  All particle values, ancestor indices and
    the final selection are enumerated with their exact probabilities;
    configurations that coincide are merged as they arise.
    """
    K, n = model.num_states, model.horizon
    outcomes = K ** (N * (n + 1)) * (N + 1) ** (N * n + 1)
    _check_cap(outcomes, "kernel enumeration")
    G, q, m0 = model.potentials, model.q, model.m0
    P = np.zeros((model.num_paths, model.num_paths))
    for r in range(model.num_paths):
        ref = index_path(r, K, n)
        # configuration: lineage prefixes of slots 1..N -> probability
        configs = {}
        for states in itertools.product(range(K), repeat=N):
            prob = float(np.prod([m0[s] for s in states]))
            if prob > 0:
                key = tuple((s,) for s in states)
                configs[key] = configs.get(key, 0.0) + prob
        for k in range(1, n + 1):
            nxt = {}
            for lineages, prob in configs.items():
                slots = (ref[:k],) + lineages
                w = np.array([G[k - 1][lin[-1]] for lin in slots])
                w = w / w.sum()
                for anc in itertools.product(range(N + 1), repeat=N):
                    pa = prob * float(np.prod(w[list(anc)]))
                    if pa == 0:
                        continue
                    for states in itertools.product(range(K), repeat=N):
                        pr = pa
                        for a, s in zip(anc, states):
                            pr *= q[slots[a][-1], s]
                        if pr == 0:
                            continue
                        key = tuple(slots[a] + (s,) for a, s in zip(anc, states))
                        nxt[key] = nxt.get(key, 0.0) + pr
            configs = nxt
        for lineages, prob in configs.items():
            slots = (ref,) + lineages
            w = np.array([G[n][lin[-1]] for lin in slots])
            w = w / w.sum()
            for i, lin in enumerate(slots):
                if w[i] > 0:
                    P[r, path_index(lin, K)] += prob * w[i]
    return P
