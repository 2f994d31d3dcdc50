"""Finite-state hidden Markov models, paths and test functions."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path as FilePath

import numpy as np

from .errors import (
    DegeneratePotential,
    DimensionMismatch,
    IndexOutOfRange,
    NegativePotential,
    NonFinite,
    NonStochastic,
)

STOCHASTIC_TOL = 1e-9


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HmmModel:
    """Markov chain ``m0, q`` on ``num_states`` states with potentials ``G_0..G_n``.

    ``q[i, j]`` is the probability of moving from ``i`` to ``j``; row ``t`` of
    ``potentials`` is ``G_t``.  Instances are immutable; build them with
    :func:`build_model` so that validation runs.
    """

    num_states: int
    horizon: int
    m0: np.ndarray
    q: np.ndarray
    potentials: np.ndarray
    name: str = "model"
    _q_cdf: np.ndarray = field(init=False, repr=False)
    _m0_cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        # inverse-CDF tables; last column pinned to 1 so uniforms in [0, 1) never overflow
        q_cdf = np.cumsum(self.q, axis=1)
        q_cdf[:, -1] = 1.0
        m0_cdf = np.cumsum(self.m0)
        m0_cdf[-1] = 1.0
        q_cdf.setflags(write=False)
        m0_cdf.setflags(write=False)
        object.__setattr__(self, "_q_cdf", q_cdf)
        object.__setattr__(self, "_m0_cdf", m0_cdf)

    @property
    def n(self) -> int:
        return self.horizon

    @property
    def num_paths(self) -> int:
        return self.num_states ** (self.horizon + 1)

    @property
    def constant_potential(self) -> bool:
        return bool(np.all(self.potentials == self.potentials[0]))

    def G(self, t: int) -> np.ndarray:
        return self.potentials[t]

    def sample_initial(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms in [0, 1) to draws from ``m0`` by inverse CDF."""
        return np.searchsorted(self._m0_cdf, u, side="right")

    def sample_transition(self, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        """One transition draw from each of ``states`` using uniforms ``u``."""
        out = np.zeros(np.shape(states), dtype=np.int64)
        for j in range(self.num_states - 1):
            out += self._q_cdf[:, j][states] <= u
        return out

    def with_horizon(self, horizon: int) -> "HmmModel":
        """Same chain and (time-constant) potential on a different horizon."""
        if not self.constant_potential:
            raise DimensionMismatch("with_horizon needs a time-constant potential")
        pots = np.tile(self.potentials[0], (horizon + 1, 1))
        return HmmModel(self.num_states, horizon, self.m0, self.q, _frozen(pots), self.name)

    def to_spec(self) -> dict:
        spec = {
            "num_states": self.num_states,
            "horizon": self.horizon,
            "m0": self.m0.tolist(),
            "q": self.q.tolist(),
        }
        if self.constant_potential:
            spec["potentials"] = self.potentials[0].tolist()
            spec["constant"] = True
        else:
            spec["potentials"] = self.potentials.tolist()
        if self.name != "model":
            spec["name"] = self.name
        return spec


def build_model(spec) -> HmmModel:
    """Validate a model description and return an :class:`HmmModel`.

    ``spec`` is a mapping with keys ``num_states``, ``horizon``, ``m0``, ``q``
    and ``potentials``.  Potentials are either one row per time step or a
    single row together with ``"constant": true``, which is broadcast over
    ``0..horizon``.  Row sums within ``1e-9`` of one are renormalised.
    """
    try:
        K = int(spec["num_states"])
        n = int(spec["horizon"])
        m0 = np.asarray(spec["m0"], dtype=float)
        q = np.asarray(spec["q"], dtype=float)
        pots = np.asarray(spec["potentials"], dtype=float)
    except KeyError as exc:
        raise DimensionMismatch(f"missing model field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise DimensionMismatch(f"malformed model field: {exc}") from None

    if K < 2:
        raise DimensionMismatch(f"num_states must be >= 2, got {K}")
    if n < 0:
        raise DimensionMismatch(f"horizon must be >= 0, got {n}")
    if m0.shape != (K,):
        raise DimensionMismatch(f"m0 has shape {m0.shape}, expected ({K},)")
    if q.shape != (K, K):
        raise DimensionMismatch(f"q has shape {q.shape}, expected ({K}, {K})")
    if spec.get("constant", False) or pots.ndim == 1:
        if pots.shape != (K,):
            raise DimensionMismatch(f"constant potential has shape {pots.shape}, expected ({K},)")
        pots = np.tile(pots, (n + 1, 1))
    elif pots.shape != (n + 1, K):
        raise DimensionMismatch(f"potentials have shape {pots.shape}, expected ({n + 1}, {K})")

    for label, arr in (("m0", m0), ("q", q), ("potentials", pots)):
        if not np.all(np.isfinite(arr)):
            raise NonFinite(f"{label} has non-finite entries")
    if np.any(m0 < 0) or abs(m0.sum() - 1.0) > STOCHASTIC_TOL:
        raise NonStochastic(f"m0 is not a probability vector (sum={m0.sum()!r})")
    sums = q.sum(axis=1)
    bad = np.flatnonzero((np.abs(sums - 1.0) > STOCHASTIC_TOL) | np.any(q < 0, axis=1))
    if bad.size:
        raise NonStochastic(f"row {int(bad[0])} of q is not a probability vector (sum={sums[bad[0]]!r})")
    if np.any(pots < 0):
        t = int(np.argwhere(pots < 0)[0, 0])
        raise NegativePotential(f"G_{t} has a negative entry")
    dead = np.flatnonzero(~np.any(pots > 0, axis=1))
    if dead.size:
        raise DegeneratePotential(f"G_{int(dead[0])} is identically zero")

    return HmmModel(
        num_states=K,
        horizon=n,
        m0=_frozen(m0 / m0.sum()),
        q=_frozen(q / sums[:, None]),
        potentials=_frozen(pots),
        name=str(spec.get("name", "model")),
    )


def load_model(source) -> HmmModel:
    """Build a model from a mapping, a JSON string or a path to a JSON file."""
    if isinstance(source, dict):
        return build_model(source)
    if isinstance(source, FilePath) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        return build_model(json.loads(FilePath(source).read_text()))
    return build_model(json.loads(source))


def m2_model(horizon: int = 1) -> HmmModel:
    """The two-state reference model used throughout the tests and examples."""
    return build_model({
        "name": "M2",
        "num_states": 2,
        "horizon": horizon,
        "m0": [0.5, 0.5],
        "q": [[0.9, 0.1], [0.2, 0.8]],
        "potentials": [0.5, 2.0],
        "constant": True,
    })


def random_model(rng: np.random.Generator, num_states: int, horizon: int) -> HmmModel:
    """A random valid model with strictly positive potentials in [0.1, 3)."""
    m0 = rng.dirichlet(np.ones(num_states))
    q = rng.dirichlet(np.ones(num_states), size=num_states)
    pots = rng.uniform(0.1, 3.0, size=(horizon + 1, num_states))
    return build_model({"num_states": num_states, "horizon": horizon, "m0": m0, "q": q, "potentials": pots})


def check_path(model: HmmModel, path) -> tuple:
    states = tuple(int(s) for s in path)
    if len(states) != model.horizon + 1:
        raise DimensionMismatch(f"path has length {len(states)}, model horizon needs {model.horizon + 1}")
    if any(s < 0 or s >= model.num_states for s in states):
        raise IndexOutOfRange(f"path {states} has a state outside [0, {model.num_states})")
    return states


def check_assumptions(model: HmmModel) -> tuple[float, float, float]:
    """Mixing constants ``(a, g_lower, c)``.

    ``a`` bounds every potential, ``g_lower`` is the smallest min/max ratio of
    the future-likelihood functions ``p_{k+1,n}`` for ``k < n`` and ``1/c`` is
    the smallest one-step predicted potential ``sum_x' q(x'|x) G_{t+1}(x')``
    for ``t < n``.  With ``n = 0`` there is nothing to bound and
    ``g_lower = c = 1``.
    """
    from .oracle import backward_tables

    a = float(model.potentials.max())
    n = model.horizon
    if n == 0:
        return a, 1.0, 1.0
    p = backward_tables(model).p
    g_lower = 1.0
    for k in range(n):
        lo, hi = p[k].min(), p[k].max()
        if lo <= 0:
            raise DegeneratePotential(f"p_{k + 1},{n} vanishes at some state; no ratio bound exists")
        g_lower = min(g_lower, lo / hi)
    one_step = model.q @ model.potentials[1:].T  # (K, n): column t is q G_{t+1}
    mass = one_step.min()
    if mass <= 0:
        raise DegeneratePotential("some state moves only to zero-potential states")
    return a, float(g_lower), float(1.0 / mass)


class TestFunction:
    """A bounded function of a path ``x_0..x_n``.

    Stored either as a full table over the ``K**(n+1)`` paths (lexicographic
    order) or as a sum of per-coordinate terms ``sum_k h[k, x_k]``.
    """

    __test__ = False  # keep pytest from collecting this class

    def __init__(self, horizon: int, num_states: int, *, table=None, terms=None, label="f"):
        self.horizon = int(horizon)
        self.num_states = int(num_states)
        self.label = label
        if (table is None) == (terms is None):
            raise ValueError("give exactly one of table or terms")
        if table is not None:
            table = _frozen(table).reshape(-1)
            if table.size != self.num_states ** (self.horizon + 1):
                raise DimensionMismatch(f"table has {table.size} entries, expected {self.num_states ** (self.horizon + 1)}")
            if not np.all(np.isfinite(table)):
                raise NonFinite("test function table has non-finite values")
        if terms is not None:
            terms = _frozen(terms)
            if terms.shape != (self.horizon + 1, self.num_states):
                raise DimensionMismatch(f"terms have shape {terms.shape}, expected ({self.horizon + 1}, {self.num_states})")
            if not np.all(np.isfinite(terms)):
                raise NonFinite("test function terms have non-finite values")
        self._table = table
        self.terms = terms

    @classmethod
    def indicator(cls, horizon, num_states, state, time=None):
        """``1{x_time = state}``; ``time`` defaults to the terminal time."""
        time = horizon if time is None else time
        terms = np.zeros((horizon + 1, num_states))
        terms[time, state] = 1.0
        return cls(horizon, num_states, terms=terms, label=f"1{{x_{time}={state}}}")

    @classmethod
    def coordinate_sum(cls, horizon, num_states, scale=1.0):
        terms = np.tile(np.arange(num_states, dtype=float) * scale, (horizon + 1, 1))
        return cls(horizon, num_states, terms=terms, label="sum_k x_k")

    @classmethod
    def constant(cls, horizon, num_states, value=1.0):
        terms = np.zeros((horizon + 1, num_states))
        terms[0, :] = value
        return cls(horizon, num_states, terms=terms, label=f"const({value:g})")

    @classmethod
    def mean_indicator(cls, horizon, num_states, state):
        """Fraction of coordinates equal to ``state``."""
        terms = np.zeros((horizon + 1, num_states))
        terms[:, state] = 1.0 / (horizon + 1)
        return cls(horizon, num_states, terms=terms, label=f"mean 1{{x_k={state}}}")

    @classmethod
    def from_table(cls, table, horizon, num_states, label="table"):
        return cls(horizon, num_states, table=table, label=label)

    @property
    def terminal(self):
        """``h`` with ``f(x) = h[x_n]`` when ``f`` depends on ``x_n`` only, else None."""
        if self.terms is None:
            return None
        if self.horizon > 0 and np.any(self.terms[:-1] != 0):
            # constants folded into an earlier coordinate still count as terminal
            head = self.terms[:-1]
            if np.any(head != head[:, :1]):
                return None
            return self.terms[-1] + head[:, 0].sum()
        return self.terms[-1].copy()

    def table(self) -> np.ndarray:
        if self._table is not None:
            return self._table
        K, n = self.num_states, self.horizon
        t = np.zeros(())
        for k in range(n + 1):
            t = t[..., None] + self.terms[k].reshape((1,) * k + (K,))
        t = t.reshape(-1)
        t.setflags(write=False)
        self._table = t
        return t

    def __call__(self, paths) -> np.ndarray:
        paths = np.asarray(paths)
        if self.terms is not None:
            out = np.zeros(paths.shape[:-1])
            for k in range(self.horizon + 1):
                out = out + self.terms[k][paths[..., k]]
            return out
        return self.table()[path_index(paths, self.num_states)]

    @property
    def sup_norm(self) -> float:
        return float(np.abs(self.table()).max())

    def __repr__(self):
        return f"TestFunction({self.label}, n={self.horizon}, K={self.num_states})"


def path_index(paths, num_states: int) -> np.ndarray:
    """Lexicographic index of each path (last axis holds ``x_0..x_n``)."""
    paths = np.asarray(paths, dtype=np.int64)
    idx = np.zeros(paths.shape[:-1], dtype=np.int64)
    for k in range(paths.shape[-1]):
        idx = idx * num_states + paths[..., k]
    return idx


def index_path(index: int, num_states: int, horizon: int) -> tuple:
    out = []
    for _ in range(horizon + 1):
        index, r = divmod(int(index), num_states)
        out.append(r)
    return tuple(reversed(out))
