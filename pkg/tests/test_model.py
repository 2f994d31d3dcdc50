import json

import numpy as np
import pytest

from condsmc.errors import (
    DegeneratePotential,
    DimensionMismatch,
    IndexOutOfRange,
    NegativePotential,
    NonFinite,
    NonStochastic,
)
from condsmc.model import (
    TestFunction,
    build_model,
    check_assumptions,
    check_path,
    index_path,
    load_model,
    m2_model,
    path_index,
)

M2_SPEC = {
    "num_states": 2,
    "horizon": 1,
    "m0": [0.5, 0.5],
    "q": [[0.9, 0.1], [0.2, 0.8]],
    "potentials": [0.5, 2.0],
    "constant": True,
}


def spec_with(**changes):
    spec = dict(M2_SPEC)
    spec.update(changes)
    return spec


class TestBuildModel:
    def test_m2(self):
        m = build_model(M2_SPEC)
        assert m.num_states == 2 and m.horizon == 1
        np.testing.assert_array_equal(m.potentials, [[0.5, 2.0], [0.5, 2.0]])
        np.testing.assert_array_equal(m.q, [[0.9, 0.1], [0.2, 0.8]])

    def test_arrays_read_only(self):
        m = build_model(M2_SPEC)
        with pytest.raises(ValueError):
            m.q[0, 0] = 0.5

    def test_q_row_not_stochastic(self):
        with pytest.raises(NonStochastic, match="row 0"):
            build_model(spec_with(q=[[0.5, 0.6], [0.2, 0.8]]))

    def test_m0_not_stochastic(self):
        with pytest.raises(NonStochastic):
            build_model(spec_with(m0=[0.5, 0.6]))

    def test_zero_potential_row(self):
        pots = [[0.5, 2.0], [0.0, 0.0]]
        with pytest.raises(DegeneratePotential, match="G_1"):
            build_model(spec_with(potentials=pots, constant=False))

    def test_negative_potential(self):
        with pytest.raises(NegativePotential):
            build_model(spec_with(potentials=[-0.1, 2.0]))

    def test_non_finite(self):
        with pytest.raises(NonFinite):
            build_model(spec_with(potentials=[np.inf, 2.0]))

    def test_shape_errors(self):
        with pytest.raises(DimensionMismatch):
            build_model(spec_with(q=[[1.0]]))
        with pytest.raises(DimensionMismatch):
            build_model(spec_with(potentials=[[0.5, 2.0]] * 3, constant=False))
        with pytest.raises(DimensionMismatch, match="missing"):
            build_model({"num_states": 2})

    def test_small_drift_renormalized(self):
        q = [[0.9 + 1e-11, 0.1], [0.2, 0.8]]
        m = build_model(spec_with(q=q))
        assert abs(m.q[0].sum() - 1.0) < 1e-15

    def test_roundtrip(self, tmp_path):
        m = m2_model(3)
        again = load_model(json.dumps(m.to_spec()))
        np.testing.assert_array_equal(again.potentials, m.potentials)
        path = tmp_path / "m.json"
        path.write_text(json.dumps(m.to_spec()))
        assert load_model(str(path)).horizon == 3
        assert load_model(m.to_spec()).name == "M2"

    def test_with_horizon(self):
        m = m2_model(1).with_horizon(4)
        assert m.potentials.shape == (5, 2)


class TestSampling:
    def test_initial_inverse_cdf(self, m2):
        u = np.array([0.0, 0.49, 0.5, 0.999])
        np.testing.assert_array_equal(m2.sample_initial(u), [0, 0, 1, 1])

    def test_transition_inverse_cdf(self, m2):
        states = np.array([0, 0, 1, 1])
        u = np.array([0.89, 0.9, 0.19, 0.2])
        np.testing.assert_array_equal(m2.sample_transition(states, u), [0, 1, 0, 1])


class TestCheckAssumptions:
    def test_m2(self):
        a, g, c = check_assumptions(m2_model(1))
        assert a == 2.0
        assert g == pytest.approx(0.65 / 1.7, rel=1e-12)
        assert g == pytest.approx(0.382353, abs=1e-6)
        assert c == pytest.approx(1 / 0.65, rel=1e-12)

    def test_flat(self, flat2):
        assert check_assumptions(flat2) == (1.0, 1.0, 1.0)

    def test_unreachable_mass(self):
        spec = {
            "num_states": 2,
            "horizon": 1,
            "m0": [0.5, 0.5],
            "q": [[0.0, 1.0], [0.5, 0.5]],
            "potentials": [[1.0, 1.0], [1.0, 0.0]],
        }
        with pytest.raises(DegeneratePotential):
            check_assumptions(build_model(spec))

    def test_horizon_zero(self):
        assert check_assumptions(m2_model(0)) == (2.0, 1.0, 1.0)


class TestPaths:
    def test_check_path(self, m2):
        assert check_path(m2, [1, 0]) == (1, 0)
        with pytest.raises(DimensionMismatch):
            check_path(m2, [1])
        with pytest.raises(IndexOutOfRange):
            check_path(m2, [0, 2])

    def test_index_roundtrip(self):
        for i in range(27):
            assert path_index(index_path(i, 3, 2), 3) == i
        assert path_index([1, 0, 1], 2) == 5


class TestTestFunction:
    def test_indicator_table(self):
        f = TestFunction.indicator(1, 2, 1)
        np.testing.assert_array_equal(f.table(), [0, 1, 0, 1])
        np.testing.assert_array_equal(f.terminal, [0, 1])

    def test_initial_indicator_not_terminal(self):
        f = TestFunction.indicator(1, 2, 1, time=0)
        np.testing.assert_array_equal(f.table(), [0, 0, 1, 1])
        assert f.terminal is None

    def test_coordinate_sum(self):
        f = TestFunction.coordinate_sum(1, 2)
        np.testing.assert_array_equal(f(np.array([[0, 0], [0, 1], [1, 0], [1, 1]])), [0, 1, 1, 2])

    def test_call_matches_table(self, rng):
        f = TestFunction.from_table(rng.normal(size=27), 2, 3)
        paths = np.array([index_path(i, 3, 2) for i in range(27)])
        np.testing.assert_array_equal(f(paths), f.table())

    def test_bad_table(self):
        with pytest.raises(DimensionMismatch):
            TestFunction.from_table(np.zeros(5), 1, 2)
        with pytest.raises(NonFinite):
            TestFunction.from_table([0, 1, np.nan, 0], 1, 2)


def test_constant_broadcast_is_bitwise_identical():
    spelled = dict(M2_SPEC, horizon=3, constant=False, potentials=[[0.5, 2.0]] * 4)
    a = build_model(dict(M2_SPEC, horizon=3))
    b = build_model(spelled)
    assert a.potentials.tobytes() == b.potentials.tobytes()
    assert a.q.tobytes() == b.q.tobytes() and a.m0.tobytes() == b.m0.tobytes()
