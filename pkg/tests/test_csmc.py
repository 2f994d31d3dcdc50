import numpy as np
import pytest
from scipy import stats

from condsmc import oracle
from condsmc.csmc import (
    chain_key,
    chains_batch,
    eta_hat,
    kernel_batch,
    kernel_chain,
    kernel_from_uniforms,
    kernel_step,
    perturbed_bg_weights,
    run_conditional_system,
    write_chain_csv,
)
from condsmc.errors import DimensionMismatch
from condsmc.model import build_model, index_path, m2_model, path_index
from condsmc.rng import generator, seed_derive, stream
from condsmc.smc import normalize, trace_ancestry, uniform_block


def dead_end_model():
    """M2 dynamics with G_1 = (1, 0): a reference ending in state 1 has zero final weight."""
    return build_model({
        "num_states": 2,
        "horizon": 1,
        "m0": [0.5, 0.5],
        "q": [[0.9, 0.1], [0.2, 0.8]],
        "potentials": [[0.5, 2.0], [1.0, 0.0]],
    })


def equal_model(horizon):
    return build_model({
        "num_states": 3,
        "horizon": horizon,
        "m0": [0.2, 0.3, 0.5],
        "q": [[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]],
        "potentials": [1.5, 1.5, 1.5],
        "constant": True,
    })


class TestPerturbedWeights:
    def test_m2_hand_value(self, m2):
        w = perturbed_bg_weights(m2, 0, [0, 1], ref_state=1)
        np.testing.assert_array_equal(w, [2.0, 0.5, 2.0])
        np.testing.assert_allclose(normalize(w), [4 / 9, 1 / 9, 4 / 9], rtol=1e-15)

    def test_zero_reference_weight(self):
        m = dead_end_model()
        w = normalize(perturbed_bg_weights(m, 1, [0, 0, 1], ref_state=1))
        assert w[0] == 0.0
        np.testing.assert_allclose(w[1:], [0.5, 0.5, 0.0])

    def test_all_equal(self):
        w = normalize(perturbed_bg_weights(equal_model(1), 0, [0, 1, 2, 2], ref_state=1))
        np.testing.assert_allclose(w, 0.2, rtol=1e-15)


class TestConditionalSystem:
    def test_reference_pinned(self):
        m = m2_model(4)
        ref = (1, 0, 0, 1, 0)
        s = run_conditional_system(m, ref, 7, stream(2, "pin"))
        assert s.reference == ref
        assert np.all(s.ancestors[:, 0] == 0)
        assert trace_ancestry(s, 0) == ref

    def test_deterministic(self):
        m = m2_model(3)
        a = run_conditional_system(m, (0, 0, 0, 0), 30, stream(3, "det"))
        b = run_conditional_system(m, (0, 0, 0, 0), 30, stream(3, "det"))
        np.testing.assert_array_equal(a.particles, b.particles)
        np.testing.assert_array_equal(a.ancestors, b.ancestors)

    def test_bad_reference(self, m2, rng):
        with pytest.raises(DimensionMismatch):
            run_conditional_system(m2, (0, 1, 1), 3, rng)

    def test_reference_share_with_equal_potentials(self):
        m, N, R = equal_model(2), 9, 4000
        u = stream(4, "share").random((R, 6, N))
        kb = kernel_from_uniforms(m, np.zeros((R, 3), dtype=np.int64), u)
        share = np.mean(kb.ancestors[:, 0, 1:] == 0)
        se = np.sqrt(share * (1 - share) / (R * N))
        assert abs(share - 1 / (N + 1)) <= 4 * se

    def test_consistency_eta1(self):
        N = 10**4
        s = run_conditional_system(m2_model(1), (0, 0), N, stream(5, "consistency"))
        est = np.mean(eta_hat(s).paths[:, 1] == 1)
        assert abs(est - 0.66) <= 3 * np.sqrt(0.2244 / N)


class TestEtaHat:
    def test_single_particle(self, m2):
        s = run_conditional_system(m2, (1, 1), 1, stream(0, "one"))
        mu = eta_hat(s)
        assert mu.weights.tolist() == [1.0]
        assert tuple(mu.paths[0]) == trace_ancestry(s, 1)

    def test_horizon_zero_atoms_are_initial_draws(self):
        s = run_conditional_system(m2_model(0), (1,), 6, stream(0, "n0"))
        mu = eta_hat(s)
        np.testing.assert_array_equal(mu.paths[:, 0], s.particles[0, 1:])
        np.testing.assert_allclose(mu.weights, 1 / 6)


class TestKernelStep:
    def test_snapshot(self):
        d = kernel_step(m2_model(2), (0, 0, 0), 5, stream(1, "snapk"))
        assert d.output == (1, 1, 1)
        assert d.selected_index == 3

    def test_output_is_traced_selection(self):
        d = kernel_step(m2_model(3), (0, 1, 0, 1), 6, stream(2, "retain"), retain=True)
        assert d.output == trace_ancestry(d.system, d.selected_index)

    def test_zero_reference_weight_never_selected(self):
        m = dead_end_model()
        u = stream(3, "dead").random((5000, 4, 40))
        kb = kernel_from_uniforms(m, np.tile([0, 1], (5000, 1)), u)
        assert np.all(kb.selected != 0)
        assert np.all(kb.outputs[:, 1] == 0)

    def test_flat_n0_N1(self):
        m = build_model({"num_states": 2, "horizon": 0, "m0": [0.3, 0.7], "q": [[1, 0], [0, 1]],
                         "potentials": [1.0, 1.0], "constant": True})
        R = 200_000
        kb = kernel_from_uniforms(m, np.zeros((R, 1), dtype=np.int64), stream(4, "flat").random((R, 2, 1)))
        p_one = 0.5 * 0.7
        assert abs(np.mean(kb.outputs[:, 0] == 1) - p_one) <= 4 * np.sqrt(p_one * (1 - p_one) / R)
        assert abs(np.mean(kb.selected == 0) - 0.5) <= 4 * np.sqrt(0.25 / R)

    def test_matches_batch(self):
        m, N = m2_model(2), 4
        key = seed_derive(6, ("match",))
        single = kernel_step(m, (1, 0, 1), N, generator(key))
        batch = kernel_from_uniforms(m, np.array([[1, 0, 1]]), uniform_block(generator(key), 2, N)[None])
        assert single.output == tuple(batch.outputs[0])
        assert single.selected_index == batch.selected[0]

    @pytest.mark.parametrize("n,N", [(0, 1), (0, 2), (1, 1), (1, 2)])
    def test_frequencies_match_exact_kernel(self, n, N):
        m = m2_model(n)
        P = oracle.exact_kernel(m, N)
        R = 10**6
        for r in range(m.num_paths):
            ref = np.array(index_path(r, 2, n))
            u = stream(7, "freq", n, N, r).random((R, 2 * n + 2, N))
            out = kernel_from_uniforms(m, np.tile(ref, (R, 1)), u).outputs
            freq = np.bincount(path_index(out, 2), minlength=m.num_paths) / R
            se = np.sqrt(P[r] * (1 - P[r]) / R)
            assert np.all(np.abs(freq - P[r]) <= 4 * se + 1e-12), (r, freq, P[r])

    def test_stationarity_preserved(self):
        m, N, R = m2_model(2), 8, 10**5
        pi = oracle.exact_measures(m).pi
        refs = oracle.paths_from_indices(oracle.sample_paths(pi, R, stream(8, "pi")), 2, 2)
        out = kernel_from_uniforms(m, refs, stream(8, "step").random((R, 6, N))).outputs
        counts = np.bincount(path_index(out, 2), minlength=8)
        assert stats.chisquare(counts, pi * R).pvalue > 0.001


class TestChains:
    def test_one_step_equals_kernel_step(self):
        m = m2_model(2)
        chain = kernel_chain(m, (0, 0, 0), 10, 1, seed=11, chain_id=3)
        draw = kernel_step(m, (0, 0, 0), 10, generator(chain_key(11, 3, 0)))
        assert chain == [draw.output]

    def test_resume(self):
        m = m2_model(2)
        full = kernel_chain(m, (0, 0, 0), 6, 8, seed=12)
        tail = kernel_chain(m, full[3], 6, 4, seed=12, start=4)
        assert full[4:] == tail

    def test_batch_equals_individual_chains(self):
        m = m2_model(2)
        inits = np.array([[0, 0, 0], [1, 1, 1], [0, 1, 0]])
        batch = chains_batch(m, inits, 5, 6, seed=13, chain_ids=[0, 1, 2])
        for c in range(3):
            single = kernel_chain(m, inits[c], 5, 6, seed=13, chain_id=c)
            assert [tuple(p) for p in batch[:, c]] == single

    def test_flat_chain_initial_marginal(self, flat2):
        chains, burn, keep = 1000, 100, 100
        states = chains_batch(flat2, np.zeros((chains, 2), dtype=np.int64), 4, burn + keep, seed=14,
                              chain_ids=range(chains))
        x0 = (states[burn:, :, 0] == 1).mean(axis=0)
        se = x0.std(ddof=1) / np.sqrt(chains)
        assert abs(x0.mean() - flat2.m0[1]) <= 4 * se

    def test_invalid_m(self, m2):
        with pytest.raises(ValueError):
            kernel_chain(m2, (0, 0), 3, 0, seed=1)


def test_chain_csv(tmp_path):
    path = tmp_path / "chain.csv"
    write_chain_csv(path, [[(0, 1), (1, 1)]], selected=[[2, 0]])
    assert path.read_text().splitlines() == ["chain,step,selected_index,x_0,x_1", "0,0,2,0,1", "0,1,0,1,1"]


def test_kernel_batch_keys_deterministic():
    m = m2_model(1)
    keys = [seed_derive(1, ("k", r)) for r in range(5)]
    a = kernel_batch(m, np.zeros((5, 2), dtype=np.int64), 3, keys)
    b = kernel_batch(m, np.zeros((2, 2), dtype=np.int64), 3, keys[3:])
    np.testing.assert_array_equal(a.outputs[3:], b.outputs)
    np.testing.assert_allclose(a.weights.sum(axis=1), 1.0)


def test_selecting_reference_returns_it():
    m = m2_model(3)
    ref = np.array([1, 0, 1, 1])
    kb = kernel_from_uniforms(m, np.tile(ref, (4000, 1)), stream(15, "nstar").random((4000, 8, 3)))
    chosen = kb.selected == 0
    assert chosen.any()
    assert np.all(kb.outputs[chosen] == ref)


def test_stationarity_preserved_larger_case():
    m, N, R = m2_model(4), 64, 50_000
    pi = oracle.exact_measures(m).pi
    refs = oracle.paths_from_indices(oracle.sample_paths(pi, R, stream(16, "pi")), 2, 4)
    out = kernel_from_uniforms(m, refs, stream(16, "step").random((R, 10, N))).outputs
    counts = np.bincount(path_index(out, 2), minlength=32)
    assert stats.chisquare(counts, pi * R).pvalue > 0.001


@pytest.mark.parametrize("N", [
    pytest.param(8, marks=pytest.mark.xfail(strict=True, reason="second-order term: measured ratio 2.22 +- 0.07")),
    16, 32, 64,
])
def test_bias_halves_when_N_doubles(N):
    from condsmc.diagnostics import kernel_bias
    from condsmc.model import TestFunction

    f = TestFunction.indicator(2, 2, 1)
    a = kernel_bias(m2_model(2), None, f, N, 20_000, seed=21, estimator="weighted")
    b = kernel_bias(m2_model(2), None, f, 2 * N, 20_000, seed=21, estimator="weighted")
    se = lambda r: next(e["stderr"] for e in r.estimates if e["name"] == "bias")
    ratio = a.get("bias") / b.get("bias")
    ratio_se = abs(ratio) * np.hypot(se(a) / a.get("bias"), se(b) / b.get("bias"))
    assert abs(ratio - 2) <= 2 * ratio_se
