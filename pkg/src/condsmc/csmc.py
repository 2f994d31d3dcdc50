"""Conditional SMC and the induced Markov kernel on path space."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ZeroWeightVector
from .model import HmmModel, check_path
from .rng import generator, seed_derive
from .smc import (
    EmpiricalMeasure,
    ParticleSystem,
    _inverse_cdf_rows,
    final_weights,
    simulate,
    trace,
    traced_paths,
    uniform_block,
)


def perturbed_bg_weights(model: HmmModel, k: int, particle_states, ref_state: int) -> np.ndarray:
    """Raw selection weights over slots ``0..N``; slot 0 is the reference.

    Normalising the result gives the selection law of the conditional
    system, i.e. the Boltzmann-Gibbs transform of ``N * eta_hat + delta_ref``.
    """
    G = model.potentials[k]
    w = np.concatenate(([G[ref_state]], G[np.asarray(particle_states)]))
    if not np.any(w > 0):
        raise ZeroWeightVector(f"G_{k} vanishes at every particle and at the reference")
    return w


def _blocks(model: HmmModel, N: int, keys) -> np.ndarray:
    return np.stack([uniform_block(generator(key), model.horizon, N) for key in keys])


def run_conditional_system(model: HmmModel, ref_path, N: int, rng: np.random.Generator) -> ParticleSystem:
    """Particle system with slot 0 pinned to ``ref_path`` at every time."""
    if N < 1:
        raise ValueError("N must be >= 1")
    ref = np.array(check_path(model, ref_path))
    u = uniform_block(rng, model.horizon, N)[None]
    particles, ancestors = simulate(model, u, ref[None])
    return ParticleSystem(N, model.horizon, particles[0], ancestors[0], conditional=True)


def eta_hat(system: ParticleSystem) -> EmpiricalMeasure:
    """Uniform empirical measure over the traced paths of slots ``1..N``."""
    paths = traced_paths(system)
    return EmpiricalMeasure(paths, np.full(system.N, 1.0 / system.N))


@dataclass(frozen=True, eq=False)
class KernelDraw:
    output: tuple
    selected_index: int
    system: ParticleSystem | None = None


def kernel_step(model: HmmModel, ref_path, N: int, rng: np.random.Generator, retain: bool = False) -> KernelDraw:
    """One draw from the conditional SMC kernel started at ``ref_path``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    ref = np.array(check_path(model, ref_path))
    u = uniform_block(rng, model.horizon, N)[None]
    particles, ancestors = simulate(model, u, ref[None])
    star = _inverse_cdf_rows(final_weights(model, particles, True), u[:, -1, :1])
    out = trace(particles, ancestors, star)[0, 0]
    system = ParticleSystem(N, model.horizon, particles[0], ancestors[0], True) if retain else None
    return KernelDraw(tuple(int(s) for s in out), int(star[0, 0]), system)


@dataclass(frozen=True, eq=False)
class KernelBatch:
    """Outputs of many independent kernel draws, one row per draw."""

    outputs: np.ndarray  # (B, n+1)
    selected: np.ndarray  # (B,)
    particles: np.ndarray  # (B, n+1, N+1)
    ancestors: np.ndarray  # (B, n, N+1)
    weights: np.ndarray  # (B, N+1) normalised terminal weights


def kernel_batch(model: HmmModel, refs: np.ndarray, N: int, keys) -> KernelBatch:
    """Kernel draws for each reference row of ``refs`` using stream ``keys[b]``."""
    return kernel_from_uniforms(model, refs, _blocks(model, N, keys))


def kernel_from_uniforms(model: HmmModel, refs: np.ndarray, u: np.ndarray) -> KernelBatch:
    """Kernel draws driven by explicit uniform blocks ``u`` of shape (B, 2n+2, N)."""
    refs = np.asarray(refs, dtype=np.int64)
    particles, ancestors = simulate(model, u, refs)
    w = final_weights(model, particles, True)
    star = _inverse_cdf_rows(w, u[:, -1, :1])
    outputs = trace(particles, ancestors, star)[:, 0]
    w = w / w.sum(axis=1, keepdims=True)
    return KernelBatch(outputs, star[:, 0], particles, ancestors, w)


def conditional_batch(model: HmmModel, refs: np.ndarray, N: int, keys):
    """Conditional systems for many runs: ``(particles, ancestors)``."""
    u = _blocks(model, N, keys)
    return simulate(model, u, np.asarray(refs, dtype=np.int64))


def unconditional_batch(model: HmmModel, N: int, keys):
    u = _blocks(model, N, keys)
    return simulate(model, u, None)


def chain_key(seed: int, chain_id: int, step: int) -> int:
    return seed_derive(seed, (chain_id, step))


def kernel_chain(model: HmmModel, init_path, N: int, m: int, seed: int, chain_id: int = 0, start: int = 0) -> list:
    """``m`` successive kernel draws, each conditioned on the previous output.

    Step ``t`` uses the stream keyed by ``(seed, chain_id, t)``, so a chain can
    be resumed from step ``start`` given the path it held there.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    path = check_path(model, init_path)
    out = []
    for t in range(start, start + m):
        path = kernel_step(model, path, N, generator(chain_key(seed, chain_id, t))).output
        out.append(path)
    return out


def chains_batch(model: HmmModel, inits: np.ndarray, N: int, m: int, seed: int, chain_ids) -> np.ndarray:
    """Run many chains side by side; returns states of shape (m, B, n+1).

    Identical to calling :func:`kernel_chain` per chain.
    """
    paths = np.array(inits, dtype=np.int64)
    out = np.empty((m,) + paths.shape, dtype=np.int64)
    for t in range(m):
        keys = [chain_key(seed, int(c), t) for c in chain_ids]
        paths = kernel_batch(model, paths, N, keys).outputs
        out[t] = paths
    return out


def write_chain_csv(path, chains, selected=None) -> None:
    """Chain dump with columns ``chain, step, selected_index, x_0..x_n``.

    ``chains`` is a list of per-chain path sequences; ``selected`` optionally
    gives the matching selected indices.
    """
    chains = [list(c) for c in chains]
    horizon = len(chains[0][0]) - 1 if chains and chains[0] else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "step", "selected_index"] + [f"x_{k}" for k in range(horizon + 1)])
        for c, seq in enumerate(chains):
            for t, p in enumerate(seq):
                sel = "" if selected is None else int(selected[c][t])
                writer.writerow([c, t, sel] + [int(s) for s in p])
