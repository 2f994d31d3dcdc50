"""Monte Carlo experiments on the conditional SMC kernel.

Each experiment returns an :class:`ExperimentReport` holding its estimates
(with Monte Carlo standard errors), exact comparators from :mod:`oracle`
and pass/fail flags.  Every flag stores the two numbers it compared, so a
report can be re-checked without rerunning anything.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .csmc import conditional_batch, kernel_batch, unconditional_batch
from .errors import DimensionMismatch, OracleRequired, TooLarge
from .model import HmmModel, TestFunction, check_assumptions, check_path, path_index
from .oracle import (
    BackwardTable,
    backward_tables,
    clt_variance,
    exact_measures,
    expectation,
    paths_from_indices,
    perturbation_envelope,
    sample_paths,
    stabilized_bound,
    theorem2_bound,
)
from .parallel import batch_size, map_replicates
from .rng import seed_derive, stream
from .smc import ParticleSystem, trace


# ---------------------------------------------------------------- reports


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


@dataclass
class ExperimentReport:
    kind: str
    model: dict
    params: dict
    seed: int
    estimates: list = field(default_factory=list)
    comparators: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    version: str = __version__
    timestamp: str | None = None
    replicates: dict = field(default_factory=dict, repr=False)

    def estimate(self, name, value, stderr=None, **extra):
        entry = {"name": name, "value": value}
        if stderr is None:
            entry["exact"] = True
        else:
            entry["stderr"] = stderr
        entry.update(extra)
        self.estimates.append(entry)
        return value

    def comparator(self, name, value, source="oracle", **extra):
        self.comparators.append({"name": name, "value": value, "source": source, **extra})
        return value

    def flag(self, name, lhs, op, rhs, rule):
        """Record ``lhs op rhs`` where ``op`` is one of ``<=``, ``>=``, ``<``, ``>``."""
        passed = {"<=": lhs <= rhs, ">=": lhs >= rhs, "<": lhs < rhs, ">": lhs > rhs}[op]
        self.flags.append({"name": name, "passed": bool(passed), "lhs": lhs, "op": op, "rhs": rhs, "rule": rule})
        return bool(passed)

    def get(self, name):
        for entry in self.estimates + self.comparators:
            if entry["name"] == name:
                return entry["value"]
        raise KeyError(name)

    def get_flag(self, name) -> bool:
        for entry in self.flags:
            if entry["name"] == name:
                return entry["passed"]
        raise KeyError(name)

    @property
    def passed(self) -> bool:
        return all(f["passed"] for f in self.flags)

    def to_dict(self) -> dict:
        return _plain({
            "kind": self.kind,
            "model": self.model,
            "params": self.params,
            "estimates": self.estimates,
            "comparators": self.comparators,
            "flags": self.flags,
            "notes": self.notes,
            "seed": self.seed,
            "version": self.version,
            "timestamp": self.timestamp,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def write(self, outdir, replicates_csv=False) -> Path:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        path = outdir / "report.json"
        path.write_text(self.to_json())
        if replicates_csv and self.replicates:
            write_replicates_csv(outdir / "replicates.csv", self.replicates)
        return path

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        failed = [f["name"] for f in self.flags if not f["passed"]]
        tail = f" failed={','.join(failed)}" if failed else ""
        return f"{self.kind}: {status} ({len(self.flags)} flags){tail}"


def write_replicates_csv(path, columns: dict) -> None:
    """One row per replicate; ``columns`` maps a column name to a 1-d array."""
    names = list(columns)
    length = max(len(v) for v in columns.values())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate"] + names)
        for r in range(length):
            writer.writerow([r] + [repr(float(columns[c][r])) if r < len(columns[c]) else "" for c in names])


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def variance_se(x) -> tuple[float, float]:
    """Sample variance and its standard error ``sqrt((m4 - s^4) / R)``."""
    x = np.asarray(x, dtype=float)
    v = float(x.var(ddof=1))
    m4 = float(np.mean((x - x.mean()) ** 4))
    return v, math.sqrt(max(m4 - v * v, 0.0) / x.size)


def _model_id(model: HmmModel) -> dict:
    return {"name": model.name, "spec": model.to_spec()}


# ---------------------------------------------------------------- references


def adversarial_reference(model: HmmModel) -> tuple:
    """Lexicographically smallest path maximising ``prod_k 1/G_k(x_k)`` over positive potentials."""
    out = []
    for g in model.potentials:
        positive = np.where(g > 0, g, np.inf)
        out.append(int(np.argmin(positive)))
    return tuple(out)


def resolve_reference(model: HmmModel, reference):
    """Fixed path tuple, or the string ``"pi-sample"`` for per-replicate draws from ``pi_n``."""
    if reference is None or reference == "adversarial":
        return adversarial_reference(model)
    if reference == "pi-sample":
        return "pi-sample"
    return check_path(model, reference)


def _reference_rows(model: HmmModel, reference, seed, tag, start, stop) -> np.ndarray:
    if reference == "pi-sample":
        pi = exact_measures(model).pi
        idx = [sample_paths(pi, 1, stream(seed, tag, "ref", r))[0] for r in range(start, stop)]
        return paths_from_indices(idx, model.num_states, model.horizon)
    return np.tile(np.asarray(reference, dtype=np.int64), (stop - start, 1))


# ---------------------------------------------------------------- bound terms


def estimate_Z(system: ParticleSystem, model: HmmModel, k: int) -> float:
    """Share of the reference in the selection at time ``k``."""
    G = model.potentials[k]
    ref = G[system.particles[k, 0]]
    return float(ref / (G[system.particles[k, 1:]].sum() + ref))


def z_terms(model: HmmModel, particles: np.ndarray) -> np.ndarray:
    """``Z_k`` for every run and time, shape (B, n+1)."""
    G = model.potentials
    times = np.arange(model.horizon + 1)
    g = G[times[None, :, None], particles]  # (B, n+1, N+1)
    return g[:, :, 0] / (g[:, :, 1:].sum(axis=2) + g[:, :, 0])


def tau_gamma_terms(model: HmmModel, backward: BackwardTable, particles: np.ndarray):
    """``tau_{k,n}`` and ``gamma_{k,n}`` for k = 1..n, each of shape (B, n)."""
    n = model.horizon
    B, _, N1 = particles.shape
    N = N1 - 1
    tau = np.empty((B, n))
    gamma = np.empty((B, n))
    for k in range(1, n + 1):
        prev = particles[:, k - 1]
        w = model.potentials[k - 1][prev]
        w = w / w.sum(axis=1, keepdims=True)
        predicted = (model.q @ backward.Q[k])[prev]
        tau[:, k - 1] = backward.Q[k].max() / (w * predicted).sum(axis=1)
        qprev = backward.Q[k - 1][prev]
        ref = qprev[:, 0] / N
        gamma[:, k - 1] = ref / (qprev[:, 1:].mean(axis=1) + ref)
    return tau, gamma


def estimate_tau_gamma(system: ParticleSystem, model: HmmModel, backward: BackwardTable | None, k: int, n: int | None = None):
    """Realised ``(tau_{k,n}, gamma_{k,n})`` of a retained conditional system."""
    if backward is None:
        raise OracleRequired("backward tables are needed to evaluate tau and gamma")
    if n is not None and n != model.horizon:
        raise DimensionMismatch(f"backward tables are for horizon {model.horizon}, not {n}")
    if not 1 <= k <= model.horizon:
        raise ValueError(f"k must lie in [1, {model.horizon}]")
    tau, gamma = tau_gamma_terms(model, backward, system.particles[None])
    return float(tau[0, k - 1]), float(gamma[0, k - 1])


@dataclass
class BoundTermEstimates:
    z_mean: np.ndarray
    z_se: np.ndarray
    tau_mean: np.ndarray
    tau_max: np.ndarray
    tau_sq_mean: np.ndarray
    gamma_mean: np.ndarray
    gamma_se: np.ndarray
    replicates: int

    @property
    def theorem1_partial_sum(self) -> float:
        """``E(Z_n) + sum_k E(gamma_{k,n})``: the part of the telescopic bound free of unknown constants."""
        return float(self.z_mean[-1] + self.gamma_mean.sum())


def _terms_chunk(model, reference, N, seed, tag, start, stop):
    refs = _reference_rows(model, reference, seed, tag, start, stop)
    keys = [seed_derive(seed, (tag, N, r)) for r in range(start, stop)]
    particles, _ = conditional_batch(model, refs, N, keys)
    z = z_terms(model, particles)
    tau, gamma = tau_gamma_terms(model, backward_tables(model), particles)
    return np.concatenate([z, tau, gamma], axis=1)


def bound_terms(model: HmmModel, N: int, R: int, seed: int, reference=None, threads: int = 1):
    """Replicate estimates of ``E(Z_k)``, ``tau_{k,n}`` and ``E(gamma_{k,n})``.

    Returns ``(BoundTermEstimates, ExperimentReport)``.
    """
    n = model.horizon
    ref = resolve_reference(model, reference)
    a, g_lower, c = check_assumptions(model)
    r = a * c / g_lower
    fn = partial(_terms_chunk, model, ref, N, seed, "terms")
    raw = map_replicates(fn, R, batch_size(n, N), threads)
    z, tau, gamma = raw[:, : n + 1], raw[:, n + 1 : 2 * n + 1], raw[:, 2 * n + 1 :]
    est = BoundTermEstimates(
        z_mean=z.mean(axis=0),
        z_se=z.std(axis=0, ddof=1) / math.sqrt(R),
        tau_mean=tau.mean(axis=0) if n else np.zeros(0),
        tau_max=tau.max(axis=0) if n else np.zeros(0),
        tau_sq_mean=(tau**2).mean(axis=0) if n else np.zeros(0),
        gamma_mean=gamma.mean(axis=0) if n else np.zeros(0),
        gamma_se=gamma.std(axis=0, ddof=1) / math.sqrt(R) if n else np.zeros(0),
        replicates=R,
    )
    rep = ExperimentReport("diagnostics", _model_id(model), {"n": n, "N": N, "R": R, "reference": ref}, seed)
    env = perturbation_envelope(N, a, c, g_lower)
    rep.comparator("a", a)
    rep.comparator("g_lower", g_lower)
    rep.comparator("c", c)
    rep.comparator("tau_bound", r, rule="a*c/g_lower")
    rep.comparator("gamma_envelope", env, rule="(2r-1)/(N-1+2r)")
    for k in range(n + 1):
        rep.estimate(f"E_Z_{k}", est.z_mean[k], est.z_se[k])
    for k in range(1, n + 1):
        rep.estimate(f"E_tau_{k}", est.tau_mean[k - 1], float(tau[:, k - 1].std(ddof=1) / math.sqrt(R)))
        rep.estimate(f"max_tau_{k}", est.tau_max[k - 1], None, realized=True)
        rep.estimate(f"E_gamma_{k}", est.gamma_mean[k - 1], est.gamma_se[k - 1])
    rep.estimate("theorem1_partial_sum", est.theorem1_partial_sum,
                 float(math.sqrt(est.z_se[-1] ** 2 + float(np.sum(est.gamma_se**2)))))
    rep.estimate("sum_E_tau_sq_over_N", float(est.tau_sq_mean.sum() / N), None, realized=True)
    rep.notes.append("the particle-approximation term of the telescopic bound carries an unspecified constant; only its tau^2/N factor is reported")
    if n:
        rep.flag("tau_bound", float(est.tau_max.max()), "<=", r * (1 + 1e-12), "max realized tau <= a*c/g_lower")
        for k in range(1, n + 1):
            rep.flag(f"gamma_envelope_{k}", float(est.gamma_mean[k - 1]), "<=",
                     env + 3 * float(est.gamma_se[k - 1]), "mean gamma <= envelope + 3*stderr")
    rep.flag("z_envelope", float(est.z_mean[-1]), "<=", env + 3 * float(est.z_se[-1]), "mean Z_n <= envelope + 3*stderr")
    rep.replicates = {f"Z_{k}": z[:, k] for k in range(n + 1)}
    rep.replicates.update({f"tau_{k}": tau[:, k - 1] for k in range(1, n + 1)})
    rep.replicates.update({f"gamma_{k}": gamma[:, k - 1] for k in range(1, n + 1)})
    return est, rep


def perturbation_scaling(model: HmmModel, k: int, N: int, R: int, seed: int, reference=None, threads: int = 1):
    """``E(Z_k)`` at ``N`` and ``2N``: the ratio should be close to 2."""
    ref = resolve_reference(model, reference)
    a, g_lower, c = check_assumptions(model)
    rep = ExperimentReport("perturbation-scaling", _model_id(model), {"n": model.horizon, "k": k, "N": N, "R": R, "reference": ref}, seed)
    means, ses = [], []
    for size in (N, 2 * N):
        fn = partial(_terms_chunk, model, ref, size, seed, "zscale")
        raw = map_replicates(fn, R, batch_size(model.horizon, size), threads)
        m_k, se_k = mean_se(raw[:, k])
        m_n, se_n = mean_se(raw[:, model.horizon])
        rep.estimate(f"E_Z_{k}@N={size}", m_k, se_k)
        rep.estimate(f"E_Z_n@N={size}", m_n, se_n)
        env = rep.comparator(f"z_envelope@N={size}", perturbation_envelope(size, a, c, g_lower))
        rep.flag(f"z_envelope@N={size}", m_n, "<=", env + 3 * se_n, "mean Z_n <= envelope + 3*stderr")
        means.append(m_k)
        ses.append(se_k)
    ratio = means[0] / means[1]
    ratio_se = ratio * math.sqrt((ses[0] / means[0]) ** 2 + (ses[1] / means[1]) ** 2)
    rep.estimate("ratio", ratio, ratio_se)
    rep.flag("ratio_near_2", abs(ratio - 2.0), "<=", 2 * ratio_se, "|ratio - 2| <= 2*stderr")
    return rep


# ---------------------------------------------------------------- kernel bias


def _bias_chunk(model, reference, f, N, seed, tag, estimator, start, stop):
    refs = _reference_rows(model, reference, seed, tag, start, stop)
    keys = [seed_derive(seed, (tag, N, model.horizon, r)) for r in range(start, stop)]
    kb = kernel_batch(model, refs, N, keys)
    if estimator == "path":
        return f(kb.outputs)
    B = kb.particles.shape[0]
    paths = trace(kb.particles, kb.ancestors, np.tile(np.arange(N + 1), (B, 1)))
    return (kb.weights * f(paths)).sum(axis=1)


def _bias_values(model, reference, f, N, R, seed, estimator, threads, tag="bias"):
    if estimator not in ("path", "weighted"):
        raise ValueError(f"unknown estimator {estimator!r}")
    fn = partial(_bias_chunk, model, reference, f, N, seed, tag, estimator)
    return map_replicates(fn, R, batch_size(model.horizon, N), threads)


def kernel_bias(model: HmmModel, ref_path, f: TestFunction, N: int, R: int, seed: int,
                estimator: str = "path", threads: int = 1) -> ExperimentReport:
    """Estimate ``P^N_n(f)(ref) - pi_n(f)`` from ``R`` independent kernel draws.

    ``estimator="path"`` averages ``f`` over the returned paths.
    ``estimator="weighted"`` averages, per draw, ``f`` over all final
    particles with their selection weights; this is the conditional
    expectation of the former given the particle system, so it has the same
    mean and a much smaller variance.
    """
    n = model.horizon
    ref = resolve_reference(model, ref_path)
    _, pi_f = expectation(model, f)
    a, g_lower, c = check_assumptions(model)
    bound = theorem2_bound(n, N, a, c, g_lower) if n >= 1 else float("nan")
    values = _bias_values(model, ref, f, N, R, seed, estimator, threads)
    mean, se = mean_se(values)
    bias = mean - pi_f
    rep = ExperimentReport("kernel-bias", _model_id(model),
                           {"n": n, "N": N, "R": R, "reference": ref, "f": f.label, "estimator": estimator}, seed)
    rep.estimate("P_f", mean, se)
    rep.estimate("bias", bias, se)
    rep.comparator("pi_f", pi_f)
    rep.comparator("theorem2_bound", bound, a=a, c=c, g_lower=g_lower)
    if n >= 1:
        rep.flag("bias_within_bound", abs(bias), "<=", bound + 3 * se, "|bias| <= theorem2_bound + 3*stderr")
    rep.replicates = {f"f@N={N}": values}
    return rep


def log_slope(x, y, y_se):
    """Weighted least-squares slope of ``log y`` on ``log x`` and its standard error."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    w = (np.asarray(y, float) / np.asarray(y_se, float)) ** 2
    X = np.column_stack([np.ones_like(lx), lx])
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    beta = cov @ (X.T @ (w * ly))
    return float(beta[1]), float(math.sqrt(cov[1, 1]))


def bias_rate(model: HmmModel, ref_path, f: TestFunction, N_list, R: int, seed: int,
              estimator: str = "weighted", threads: int = 1, target: float = -1.0, window: float = 0.3) -> ExperimentReport:
    """Kernel bias over several particle counts with the fitted log-log rate."""
    n = model.horizon
    ref = resolve_reference(model, ref_path)
    _, pi_f = expectation(model, f)
    a, g_lower, c = check_assumptions(model)
    rep = ExperimentReport("kernel-bias", _model_id(model),
                           {"n": n, "N_list": list(N_list), "R": R, "reference": ref, "f": f.label, "estimator": estimator}, seed)
    rep.comparator("pi_f", pi_f)
    biases, ses = [], []
    for N in N_list:
        values = _bias_values(model, ref, f, N, R, seed, estimator, threads)
        mean, se = mean_se(values)
        bias = mean - pi_f
        bound = theorem2_bound(n, N, a, c, g_lower)
        rep.estimate(f"bias@N={N}", bias, se)
        rep.comparator(f"theorem2_bound@N={N}", bound)
        rep.flag(f"bias_within_bound@N={N}", abs(bias), "<=", bound, "|bias| <= theorem2_bound")
        rep.replicates[f"f@N={N}"] = values
        biases.append(abs(bias))
        ses.append(se)
    if len(N_list) >= 2:
        slope, slope_se = log_slope(N_list, biases, ses)
        rep.estimate("log_log_slope", slope, slope_se)
        rep.flag("slope_window", abs(slope - target), "<=", window, f"|slope - ({target})| <= {window}")
    return rep


# ---------------------------------------------------------------- ergodicity


def _chain_chunk(model, init, N, m, seed, start, stop):
    from .csmc import chains_batch

    inits = np.tile(np.asarray(init, dtype=np.int64), (stop - start, 1))
    states = chains_batch(model, inits, N, m, seed, range(start, stop))
    return path_index(states, model.num_states).T  # (chains, m)


def tv_noise_floor(pi: np.ndarray, R: int) -> float:
    """Expected TV distance between ``pi`` and the empirical law of ``R`` exact draws (normal approximation)."""
    return float(0.5 * np.sum(np.sqrt(2 * pi * (1 - pi) / (math.pi * R))))


def ergodicity_tv(model: HmmModel, init_path, N: int, m_max: int, R: int, seed: int, threads: int = 1) -> ExperimentReport:
    """TV distance between the ``m``-step law of ``R`` chains and ``pi_n``, m = 1..m_max."""
    if model.num_paths > 4096:
        raise TooLarge(f"{model.num_paths} paths; the TV experiment enumerates at most 4096")
    n = model.horizon
    init = resolve_reference(model, init_path)
    if init == "pi-sample":
        raise ValueError("ergodicity runs start from a fixed path")
    pi = exact_measures(model).pi
    fn = partial(_chain_chunk, model, init, N, m_max, seed)
    idx = map_replicates(fn, R, max(1, 20_000 // max(N, 1)), threads)
    floor = tv_noise_floor(pi, R)
    a, g_lower, c = check_assumptions(model)
    bound = theorem2_bound(n, N, a, c, g_lower) if n >= 1 else 1.0
    eps = min(1.0, bound)
    rep = ExperimentReport("ergodicity", _model_id(model), {"n": n, "N": N, "R": R, "m_max": m_max, "init": init}, seed)
    rep.comparator("theorem2_bound", bound)
    rep.comparator("noise_floor", floor, rule="0.5*sum sqrt(2 pi (1-pi) / (pi_const R))")
    tv = []
    for m in range(m_max):
        freq = np.bincount(idx[:, m], minlength=model.num_paths) / R
        tv.append(0.5 * float(np.abs(freq - pi).sum()))
        rep.estimate(f"tv@m={m + 1}", tv[-1], floor, plugin_bias=floor)
    slack = 3 * floor
    for m, d in enumerate(tv, start=1):
        rep.flag(f"geometric@m={m}", d, "<=", (eps + slack) ** m, "TV(m) <= (min(1,bound) + 3*floor)^m")
    for m in range(1, len(tv)):
        rep.flag(f"nonincreasing@m={m + 1}", tv[m], "<=", tv[m - 1] + 2 * floor, "TV(m) <= TV(m-1) + 2*floor")
    if m_max >= 50:
        rep.flag("converged", tv[-1], "<=", 2 * floor, "TV(m_max) <= 2*floor")
    head = [d for d in tv[:3] if d > 0]
    if len(head) >= 2:
        factor = float(np.exp(np.polyfit(np.arange(1, len(head) + 1), np.log(head), 1)[0]))
        rep.estimate("per_step_factor", factor, None, fitted_on="m=1..3")
        if bound < 1:
            rep.flag("factor_within_bound", factor, "<=", bound, "fitted factor <= theorem2_bound")
    rep.replicates = {f"path@m={m + 1}": idx[:, m] for m in range(m_max)}
    return rep


# ---------------------------------------------------------------- stability


def function_family(name: str, horizon: int, num_states: int, state: int = 1) -> TestFunction:
    if name == "terminal-indicator":
        return TestFunction.indicator(horizon, num_states, state)
    if name == "initial-indicator":
        return TestFunction.indicator(horizon, num_states, state, time=0)
    if name == "occupancy":
        return TestFunction.mean_indicator(horizon, num_states, state)
    raise ValueError(f"unknown function family {name!r}")


def stability_scan(model: HmmModel, C: float, n_list, family: str, R: int, seed: int,
                   fixed_N: int | None = None, reference=None, estimator: str = "weighted",
                   threads: int = 1, state: int = 1) -> ExperimentReport:
    """Kernel bias across horizons with ``N = round(C (n+1)) + 1`` or a fixed ``N``.

    ``model`` must have a time-constant potential; it is re-horizoned for
    each ``n``.  ``family`` names the test function per horizon.
    """
    mode = "fixed" if fixed_N is not None else "scaled"
    rep = ExperimentReport("stability-scan", _model_id(model),
                           {"C": C, "n_list": list(n_list), "R": R, "family": family, "mode": mode,
                            "fixed_N": fixed_N, "estimator": estimator}, seed)
    biases, ses, rs = [], [], []
    for n in n_list:
        mn = model.with_horizon(n)
        N = fixed_N if fixed_N is not None else int(round(C * (n + 1))) + 1
        f = function_family(family, n, mn.num_states, state)
        ref = resolve_reference(mn, reference)
        _, pi_f = expectation(mn, f)
        a, g_lower, c = check_assumptions(mn)
        rs.append(a * c / g_lower)
        values = _bias_values(mn, ref, f, N, R, seed, estimator, threads, tag=f"scan-{mode}")
        mean, se = mean_se(values)
        rep.estimate(f"bias@n={n}", mean - pi_f, se, N=N)
        rep.comparator(f"pi_f@n={n}", pi_f)
        rep.replicates[f"f@n={n}"] = values
        biases.append(abs(mean - pi_f))
        ses.append(se)
    rho, p = stats.spearmanr(list(n_list), biases, alternative="greater")
    rep.estimate("spearman_rho", float(rho), None)
    rep.estimate("spearman_p_increasing", float(p), None)
    if mode == "scaled":
        r = max(rs)
        limit = r * (2 + r) / C
        rep.comparator("stabilized_bound", limit, rule="r(2+r)/C with r = max_n a*c/g_lower")
        rep.flag("stabilized", max(biases), "<=", limit + 3 * max(ses), "max |bias| <= stabilized_bound + 3*max stderr")
        rep.flag("no_increasing_trend", float(p), ">", 0.05, "one-sided Spearman p(|bias| increasing in n) > 0.05")
    else:
        rep.flag("increasing_trend", float(p), "<", 0.05, "one-sided Spearman p(|bias| increasing in n) < 0.05")
    return rep


# ---------------------------------------------------------------- CLT


def _clt_chunk(model, reference, f, N, seed, tag, conditional, eta_f, start, stop):
    keys = [seed_derive(seed, (tag, N, r)) for r in range(start, stop)]
    if conditional:
        refs = _reference_rows(model, reference, seed, tag, start, stop)
        particles, ancestors = conditional_batch(model, refs, N, keys)
    else:
        particles, ancestors = unconditional_batch(model, N, keys)
    B = particles.shape[0]
    paths = trace(particles, ancestors, np.tile(np.arange(1, N + 1), (B, 1)))
    return math.sqrt(N) * (f(paths).mean(axis=1) - eta_f)


def normality_pvalue(x) -> float:
    """D'Agostino-Pearson omnibus p-value; a point mass counts as degenerate normal (p = 1)."""
    x = np.asarray(x, dtype=float)
    if np.ptp(x) == 0:
        return 1.0
    return float(stats.normaltest(x).pvalue)


def clt_experiment(model: HmmModel, f: TestFunction, N_list, R: int, seed: int, conditional: bool = True,
                   reference=None, threads: int = 1, rel_tol: float = 0.05) -> ExperimentReport:
    """Replicates of ``sqrt(N) (eta_hat_n(f) - eta_n(f))`` against the exact asymptotic variance.

    ``sigma2`` is the variance formula applied to ``f - eta_n(f)``; the flags
    at the largest ``N`` check the empirical variance against it.
    ``sigma2_uncentered`` evaluates the formula on ``f`` itself and is
    reported for reference only: it does not vanish for constant ``f``.
    """
    n = model.horizon
    ref = resolve_reference(model, reference) if conditional else None
    eta_f, _ = expectation(model, f)
    sigma2 = clt_variance(model, f, center=True)
    rep = ExperimentReport("clt", _model_id(model),
                           {"n": n, "N_list": list(N_list), "R": R, "f": f.label, "conditional": conditional,
                            "reference": ref}, seed)
    rep.comparator("eta_f", eta_f)
    rep.comparator("sigma2", sigma2, rule="formula applied to f - eta_n(f)")
    rep.comparator("sigma2_uncentered", clt_variance(model, f, center=False), rule="formula applied to f, not gated")
    tag = "clt-c" if conditional else "clt-u"
    for N in N_list:
        fn = partial(_clt_chunk, model, ref, f, N, seed, tag, conditional, eta_f)
        values = map_replicates(fn, R, batch_size(n, N), threads)
        v, v_se = variance_se(values)
        rep.estimate(f"variance@N={N}", v, v_se)
        rep.estimate(f"mean@N={N}", *mean_se(values))
        rep.estimate(f"normality_p@N={N}", normality_pvalue(values), None)
        rep.replicates[f"scaled_error@N={N}"] = values
    N = N_list[-1]
    v = rep.get(f"variance@N={N}")
    v_se = next(e["stderr"] for e in rep.estimates if e["name"] == f"variance@N={N}")
    # the absolute floor keeps a degenerate (zero-variance) f from failing on rounding
    rep.flag("variance_match_rel", abs(v - sigma2), "<=", rel_tol * sigma2 + 1e-12, f"|var - sigma2| <= {rel_tol}*sigma2 + 1e-12")
    rep.flag("variance_match_se", abs(v - sigma2), "<=", 3 * v_se + 1e-12, "|var - sigma2| <= 3*stderr + 1e-12")
    rep.flag("normality", rep.get(f"normality_p@N={N}"), ">", 0.001, "normality p-value > 0.001")
    return rep


def f_test_pvalue(x, y) -> float:
    """Two-sided F-test p-value for equal variances."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    vx, vy = x.var(ddof=1), y.var(ddof=1)
    if vx == 0 and vy == 0:
        return 1.0
    F = vx / vy
    cdf = stats.f.cdf(F, x.size - 1, y.size - 1)
    return float(min(1.0, 2 * min(cdf, 1 - cdf)))


def clt_agreement(cond: ExperimentReport, uncond: ExperimentReport) -> ExperimentReport:
    """Compare the conditional and standard replicate variances at each shared ``N``."""
    rep = ExperimentReport("clt-agreement", cond.model, {"conditional": cond.params, "unconditional": uncond.params}, cond.seed)
    for key, x in cond.replicates.items():
        if key in uncond.replicates:
            p = f_test_pvalue(x, uncond.replicates[key])
            rep.estimate(f"f_test_p@{key.split('@')[1]}", p, None)
            rep.flag(f"same_variance@{key.split('@')[1]}", p, ">", 0.001, "two-sided F-test p > 0.001")
    return rep
