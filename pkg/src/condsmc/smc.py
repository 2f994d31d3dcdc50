"""Multinomial-resampling particle systems.

One engine serves both the standard particle filter and its conditional
variant.  Slot 0 of every array is reserved for the reference path: in
conditional mode it holds the reference and takes part in selection, in
unconditional mode it holds ``-1`` and carries zero weight.

All randomness of a run is a block of uniforms with a fixed layout
(see :func:`uniform_block`), so a run is a pure function of its stream.
Batched entry points stack many runs along a leading axis; each run still
reads only its own uniforms, so results do not depend on batch composition.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, ZeroWeightVector
from .model import HmmModel, TestFunction

ABSENT = -1


def uniform_block(rng: np.random.Generator, horizon: int, N: int) -> np.ndarray:
    """Uniforms for one run, shape ``(2n + 2, N)``.

    Row 0 drives the initial draws, row ``2k - 1`` the selection before step
    ``k``, row ``2k`` the propagation at step ``k`` and ``[2n + 1, 0]`` the
    final selection of the kernel.
    """
    return rng.random((2 * horizon + 2, N))


def rescaled_sum(w: np.ndarray, axis=-1) -> np.ndarray:
    """``sum(w)`` computed as ``max(w) * sum(w / max(w))``."""
    wmax = np.max(w, axis=axis, keepdims=True)
    safe = np.where(wmax > 0, wmax, 1.0)
    return np.squeeze(safe * np.sum(w / safe, axis=axis, keepdims=True), axis=axis)


def _inverse_cdf_rows(weights: np.ndarray, u: np.ndarray, presort: bool = False) -> np.ndarray:
    """Row-wise multinomial draws: ``out[b, j]`` picks an index of ``weights[b]``.

    With ``presort`` the uniforms of each row are sorted first, which turns
    the search into a linear merge.  Indices then come out in increasing
    order; the multiset of draws has the same multinomial law.
    """
    if presort:
        u = np.sort(u, axis=1)
    wmax = weights.max(axis=1, keepdims=True)
    if np.any(wmax <= 0):
        raise ZeroWeightVector("all selection weights are zero")
    cum = np.cumsum(weights / wmax, axis=1)
    cdf = cum / cum[:, -1:]
    if cdf.shape[1] <= 32:
        # same count of cdf entries <= u as searchsorted(side="right"), without the row loop
        return (cdf[:, None, :] <= u[:, :, None]).sum(axis=2, dtype=np.int64)
    out = np.empty(u.shape, dtype=np.int64)
    for b in range(weights.shape[0]):
        out[b] = np.searchsorted(cdf[b], u[b], side="right")
    return out


def multinomial_sample(weights, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. indices with ``P(j) = w_j / sum(w)``."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0):
        raise ValueError("weights must be a non-empty nonnegative vector")
    return _inverse_cdf_rows(w[None, :], rng.random(count)[None, :])[0]


def bg_weights(model: HmmModel, k: int, particle_states) -> np.ndarray:
    """Selection weights ``G_k(x)`` at the given particle states."""
    w = model.potentials[k][np.asarray(particle_states)]
    if not np.any(w > 0):
        raise ZeroWeightVector(f"G_{k} vanishes at every particle")
    return w


def normalize(w: np.ndarray) -> np.ndarray:
    return w / rescaled_sum(w)


def simulate(model: HmmModel, u: np.ndarray, refs: np.ndarray | None = None):
    """Run a batch of particle systems.

    Parameters
    ----------
    u : array (B, 2n+2, N)
        Uniform blocks, one per run.
    refs : int array (B, n+1) or None
        Reference paths for conditional runs; None for standard SMC.

    Returns
    -------
    particles : int array (B, n+1, N+1)
    ancestors : int array (B, n, N+1)
    """
    B, _, N = u.shape
    n = model.horizon
    G = model.potentials
    particles = np.empty((B, n + 1, N + 1), dtype=np.int64)
    ancestors = np.zeros((B, n, N + 1), dtype=np.int64)
    particles[:, :, 0] = ABSENT if refs is None else refs
    particles[:, 0, 1:] = model.sample_initial(u[:, 0])
    w = np.empty((B, N + 1))
    for k in range(1, n + 1):
        prev = particles[:, k - 1]
        w[:, 1:] = G[k - 1][prev[:, 1:]]
        w[:, 0] = 0.0 if refs is None else G[k - 1][prev[:, 0]]
        anc = _inverse_cdf_rows(w, u[:, 2 * k - 1], presort=True)
        ancestors[:, k - 1, 1:] = anc
        parents = np.take_along_axis(prev, anc, axis=1)
        particles[:, k, 1:] = model.sample_transition(parents, u[:, 2 * k])
    return particles, ancestors


def final_weights(model: HmmModel, particles: np.ndarray, conditional: bool) -> np.ndarray:
    """Unnormalised terminal weights over slots ``0..N`` (batched)."""
    last = particles[:, -1]
    w = np.empty(last.shape)
    w[:, 1:] = model.potentials[-1][last[:, 1:]]
    w[:, 0] = model.potentials[-1][last[:, 0]] if conditional else 0.0
    return w


def trace(particles: np.ndarray, ancestors: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Ancestral paths of slots ``idx`` (B, L) at the final time: (B, L, n+1)."""
    n = particles.shape[1] - 1
    idx = np.array(idx, dtype=np.int64)
    out = np.empty(idx.shape + (n + 1,), dtype=np.int64)
    out[..., n] = np.take_along_axis(particles[:, n], idx, axis=1)
    for k in range(n - 1, -1, -1):
        idx = np.take_along_axis(ancestors[:, k], idx, axis=1)
        out[..., k] = np.take_along_axis(particles[:, k], idx, axis=1)
    return out


@dataclass(frozen=True, eq=False)
class ParticleSystem:
    """Particles ``X^i_k`` and ancestors ``A^i_k`` of one run.

    ``particles[k, i]`` for ``i = 0..N`` (slot 0 is the reference, or
    :data:`ABSENT`); ``ancestors[k, i]`` is the parent at time ``k`` of
    particle ``i`` at time ``k + 1``, with ``ancestors[:, 0] == 0``.
    """

    N: int
    horizon: int
    particles: np.ndarray
    ancestors: np.ndarray
    conditional: bool

    def __post_init__(self):
        self.particles.setflags(write=False)
        self.ancestors.setflags(write=False)

    @property
    def reference(self):
        return tuple(int(s) for s in self.particles[:, 0]) if self.conditional else None


def run_smc(model: HmmModel, N: int, rng: np.random.Generator) -> ParticleSystem:
    """Standard particle filter with multinomial resampling at every step."""
    if N < 1:
        raise ValueError("N must be >= 1")
    u = uniform_block(rng, model.horizon, N)[None]
    particles, ancestors = simulate(model, u)
    return ParticleSystem(N, model.horizon, particles[0], ancestors[0], conditional=False)


def trace_ancestry(system: ParticleSystem, i: int) -> tuple:
    """Path of particle ``i``: ``B_n = i``, ``B_k = A_k[B_{k+1}]``."""
    lo = 0 if system.conditional else 1
    if not lo <= i <= system.N:
        raise IndexOutOfRange(f"particle index {i} outside [{lo}, {system.N}]")
    path = trace(system.particles[None], system.ancestors[None], np.array([[i]]))[0, 0]
    return tuple(int(s) for s in path)


def traced_paths(system: ParticleSystem) -> np.ndarray:
    """Paths of slots ``1..N``, shape (N, n+1)."""
    idx = np.arange(1, system.N + 1)[None]
    return trace(system.particles[None], system.ancestors[None], idx)[0]


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    paths: np.ndarray  # (M, n+1)
    weights: np.ndarray  # (M,)
    normalized: bool = True

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise ValueError("negative atom weight")
        if self.normalized and abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise ValueError("weights of a normalized measure must sum to 1")


def empirical_estimate(measure: EmpiricalMeasure, f: TestFunction) -> float:
    return float(measure.weights @ f(measure.paths))


def systems_to_rows(particles: np.ndarray, ancestors: np.ndarray, first_replicate: int = 0):
    """Rows ``(replicate, time, particle, state, ancestor)`` for a CSV dump.

    ``ancestor`` is the parent at the previous time, empty at time 0.
    """
    B, n1, N1 = particles.shape
    for b in range(B):
        for k in range(n1):
            for i in range(N1):
                anc = "" if k == 0 else int(ancestors[b, k - 1, i])
                yield (first_replicate + b, k, i, int(particles[b, k, i]), anc)


def write_systems_csv(path, systems) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "time", "particle", "state", "ancestor"])
        for r, system in enumerate(systems):
            writer.writerows(systems_to_rows(system.particles[None], system.ancestors[None], r))
