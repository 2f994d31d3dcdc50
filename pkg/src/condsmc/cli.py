"""Config-driven experiment runner.

Usage::

    condsmc SUBCOMMAND [--config PATH] [--seed U64] [--out DIR] [--quick] [--threads K]

Subcommands: ``validate``, ``bias``, ``ergodicity``, ``scan``, ``clt``,
``diag``.  Exit status is 0 when every flag of the report passes, 2 when a
flag fails and 1 on errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from . import oracle
from .errors import ConfigError, CsmcError
from .model import HmmModel, TestFunction, check_assumptions, load_model, m2_model, random_model

KINDS = {
    "validate": "oracle-validate",
    "bias": "kernel-bias",
    "ergodicity": "ergodicity",
    "scan": "stability-scan",
    "clt": "clt",
    "diag": "diagnostics",
}

DEFAULT_R = {
    "oracle-validate": 0,
    "kernel-bias": 100_000,
    "ergodicity": 10_000,
    "stability-scan": 100_000,
    "clt": 10_000,
    "diagnostics": 10_000,
}

FUNCTION_TYPES = ("terminal-indicator", "initial-indicator", "occupancy", "coordinate-sum", "constant", "table")


@dataclass
class ExperimentConfig:
    kind: str
    model: object = field(default_factory=lambda: {"preset": "M2", "horizon": 1})
    N: int | None = None
    N_list: list | None = None
    C: float | None = None
    n_list: list | None = None
    fixed_N: int | None = None
    R: int | None = None
    m_max: int = 50
    k: int = 1
    f: dict = field(default_factory=lambda: {"type": "terminal-indicator", "state": 1})
    reference: object = "adversarial"
    estimator: str = "path"
    conditional: bool = True
    compare_unconditional: bool = False
    random_models: int = 0
    seed: int = 0
    out: str = "out"
    replicates_csv: bool = False

    @classmethod
    def parse(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown field(s) {', '.join(unknown)}", field=unknown[0])
        if "kind" not in data:
            raise ConfigError("missing", field="kind")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        if self.kind not in KINDS.values():
            raise ConfigError(f"must be one of {sorted(KINDS.values())}", field="kind")

        def positive_int(name, value, minimum=1):
            if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
                raise ConfigError(f"must be an integer >= {minimum}", field=name)

        if self.R is not None:
            positive_int("R", self.R)
        positive_int("m_max", self.m_max)
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("must be an unsigned 64-bit integer", field="seed")
        if self.kind in ("ergodicity", "diagnostics") and self.N is None:
            raise ConfigError("required for this kind", field="N")
        if self.kind == "kernel-bias" and self.N is None and not self.N_list:
            raise ConfigError("N or N_list required for kernel-bias", field="N")
        if self.N is not None:
            positive_int("N", self.N)
        for i, N in enumerate(self.N_list or []):
            positive_int(f"N_list[{i}]", N)
        if self.kind == "clt" and self.N is None and not self.N_list:
            raise ConfigError("required for clt", field="N_list")
        if self.kind == "stability-scan":
            if not self.n_list:
                raise ConfigError("required for stability-scan", field="n_list")
            for i, n in enumerate(self.n_list):
                positive_int(f"n_list[{i}]", n)
            if self.fixed_N is None and (self.C is None or self.C <= 0):
                raise ConfigError("positive C (or fixed_N) required for stability-scan", field="C")
        if self.estimator not in ("path", "weighted"):
            raise ConfigError("must be 'path' or 'weighted'", field="estimator")
        ftype = self.f.get("type") if isinstance(self.f, dict) else None
        if ftype not in FUNCTION_TYPES:
            raise ConfigError(f"must be one of {FUNCTION_TYPES}", field="f.type")
        if ftype == "table" and "path" not in self.f and "values" not in self.f:
            raise ConfigError("table functions need 'path' or 'values'", field="f.path")
        ref = self.reference
        if not (ref in ("adversarial", "pi-sample") or isinstance(ref, list)):
            raise ConfigError("must be 'adversarial', 'pi-sample' or a list of states", field="reference")

    def to_dict(self) -> dict:
        return asdict(self)

    def experiment_dict(self) -> dict:
        """Fields that determine the results; output options are left out."""
        d = self.to_dict()
        d.pop("out")
        d.pop("replicates_csv")
        return d


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", field="--config") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", field="--config") from None


def resolve_model(source) -> HmmModel:
    """Inline spec, JSON file path, or ``{"preset": "M2", "horizon": n}``."""
    if isinstance(source, dict) and "preset" in source:
        if source["preset"] != "M2":
            raise ConfigError(f"unknown preset {source['preset']!r}", field="model.preset")
        horizon = source.get("horizon", 1)
        if not isinstance(horizon, int) or horizon < 0:
            raise ConfigError("must be a nonnegative integer", field="model.horizon")
        return m2_model(horizon)
    try:
        return load_model(source)
    except OSError as exc:
        raise ConfigError(f"cannot read model file: {exc}", field="model") from None


def make_function(spec: dict, model: HmmModel) -> TestFunction:
    n, K = model.horizon, model.num_states
    ftype = spec["type"]
    state = int(spec.get("state", 1))
    if ftype in ("terminal-indicator", "initial-indicator", "occupancy"):
        if not 0 <= state < K:
            raise ConfigError(f"state {state} outside [0, {K})", field="f.state")
        return diag.function_family(ftype, n, K, state)
    if ftype == "coordinate-sum":
        return TestFunction.coordinate_sum(n, K, float(spec.get("scale", 1.0)))
    if ftype == "constant":
        return TestFunction.constant(n, K, float(spec.get("value", 1.0)))
    values = spec.get("values")
    if values is None:
        values = np.loadtxt(spec["path"], delimiter=",", ndmin=1)
    return TestFunction.from_table(values, n, K)


def _validate(cfg, model, seed, threads, R):
    rep = diag.ExperimentReport("oracle-validate", diag._model_id(model), {"random_models": cfg.random_models}, seed)
    checks = oracle.self_check(model)
    for name, value in checks.items():
        rep.estimate(name, value)
        rep.flag(name, value, "<=", 1e-12, f"{name} <= 1e-12")
    a, g_lower, c = check_assumptions(model)
    rep.comparator("a", a)
    rep.comparator("g_lower", g_lower)
    rep.comparator("c", c)
    for N in (1, 2):
        try:
            P = oracle.exact_kernel(model, N)
        except CsmcError:
            continue
        pi = oracle.exact_measures(model).pi
        rows = float(np.max(np.abs(P.sum(axis=1) - 1)))
        fixed = float(np.max(np.abs(pi @ P - pi)))
        rep.estimate(f"kernel_row_sum_delta@N={N}", rows)
        rep.estimate(f"kernel_invariance_delta@N={N}", fixed)
        rep.flag(f"kernel_stochastic@N={N}", rows, "<=", 1e-12, "max |row sum - 1| <= 1e-12")
        rep.flag(f"kernel_invariant@N={N}", fixed, "<=", 1e-10, "max |pi P - pi| <= 1e-10")
    if cfg.random_models:
        from .rng import stream

        worst = 0.0
        for i in range(cfg.random_models):
            g = stream(seed, "validate", i)
            m = random_model(g, int(g.integers(2, 5)), int(g.integers(0, 7)))
            worst = max(worst, *oracle.self_check(m).values())
        rep.estimate("random_models_worst_delta", worst)
        rep.flag("random_models", worst, "<=", 1e-12, "worst self-check delta <= 1e-12")
    return rep


def _bias(cfg, model, seed, threads, R):
    f = make_function(cfg.f, model)
    if cfg.N_list:
        return diag.bias_rate(model, cfg.reference, f, cfg.N_list, R, seed, cfg.estimator, threads)
    return diag.kernel_bias(model, cfg.reference, f, cfg.N, R, seed, cfg.estimator, threads)


def _ergodicity(cfg, model, seed, threads, R):
    return diag.ergodicity_tv(model, cfg.reference, cfg.N, cfg.m_max, R, seed, threads)


def _scan(cfg, model, seed, threads, R):
    family = cfg.f["type"]
    if family not in ("terminal-indicator", "initial-indicator", "occupancy"):
        raise ConfigError("stability-scan needs a horizon-indexed family", field="f.type")
    return diag.stability_scan(model, cfg.C or 0.0, cfg.n_list, family, R, seed, fixed_N=cfg.fixed_N,
                               reference=cfg.reference, estimator=cfg.estimator, threads=threads,
                               state=int(cfg.f.get("state", 1)))


def _clt(cfg, model, seed, threads, R):
    f = make_function(cfg.f, model)
    N_list = cfg.N_list or [cfg.N]
    rep = diag.clt_experiment(model, f, N_list, R, seed, cfg.conditional, cfg.reference, threads)
    if cfg.compare_unconditional and cfg.conditional:
        other = diag.clt_experiment(model, f, N_list, R, seed, False, None, threads)
        cmp = diag.clt_agreement(rep, other)
        for N in N_list:
            rep.estimate(f"unconditional_variance@N={N}", other.get(f"variance@N={N}"),
                         next(e["stderr"] for e in other.estimates if e["name"] == f"variance@N={N}"))
        rep.estimates.extend(cmp.estimates)
        rep.flags.extend(cmp.flags)
    return rep


def _diag(cfg, model, seed, threads, R):
    _, rep = diag.bound_terms(model, cfg.N, R, seed, cfg.reference, threads)
    if model.horizon >= cfg.k:
        scaling = diag.perturbation_scaling(model, cfg.k, cfg.N, R, seed, cfg.reference, threads)
        rep.estimates.extend(scaling.estimates)
        rep.comparators.extend(scaling.comparators)
        rep.flags.extend(scaling.flags)
    return rep


RUNNERS = {
    "oracle-validate": _validate,
    "kernel-bias": _bias,
    "ergodicity": _ergodicity,
    "stability-scan": _scan,
    "clt": _clt,
    "diagnostics": _diag,
}


def run(cfg: ExperimentConfig, threads: int = 1, quick: bool = False, timestamp: str | None = None):
    """Run one experiment; returns ``(exit_status, report)`` and writes the artifacts."""
    model = resolve_model(cfg.model)
    R = cfg.R if cfg.R is not None else DEFAULT_R[cfg.kind]
    if quick and R:
        R = max(10, R // 100)
    rep = RUNNERS[cfg.kind](cfg, model, cfg.seed, threads, R)
    rep.params = dict(rep.params, config=cfg.experiment_dict(), R_effective=R)
    if quick:
        rep.notes.append("statistical flags advisory")
    rep.timestamp = timestamp
    rep.write(cfg.out, replicates_csv=cfg.replicates_csv)
    status = 0 if (rep.passed or quick) else 2
    return status, rep


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condsmc", description="Conditional SMC stability experiments")
    parser.add_argument("command", choices=sorted(KINDS), help="experiment to run")
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--quick", action="store_true", help="scale replicates down 100x")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for replicates")
    parser.add_argument("--replicates-csv", action="store_true", help="also write replicates.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    kind = KINDS[args.command]
    try:
        data = load_config(args.config) if args.config else {}
        if data.get("kind", kind) != kind:
            raise ConfigError(f"config is for {data['kind']!r}, command runs {kind!r}", field="kind")
        data["kind"] = kind
        if args.seed is not None:
            data["seed"] = args.seed
        if args.out is not None:
            data["out"] = args.out
        if args.replicates_csv:
            data["replicates_csv"] = True
        if args.threads < 1:
            raise ConfigError("must be >= 1", field="--threads")
        cfg = ExperimentConfig.parse(data)
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        status, rep = run(cfg, threads=args.threads, quick=args.quick, timestamp=stamp)
    except (CsmcError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    suffix = " (advisory)" if args.quick else ""
    print(rep.summary() + suffix)
    return status


if __name__ == "__main__":
    sys.exit(main())
