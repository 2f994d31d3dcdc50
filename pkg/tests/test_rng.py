import numpy as np

from condsmc.rng import generator, seed_derive, stream


def test_same_inputs_same_key():
    assert seed_derive(7, ("bias", 64, 3)) == seed_derive(7, ("bias", 64, 3))


def test_frozen_keys():
    # pinned so that any change in the derivation or the generator shows up here
    assert seed_derive(0) == 2411923922376754001463302431652695451
    assert seed_derive(0, ()) == seed_derive(0)
    assert seed_derive(2024, ("bias", 64, 3)) == 268162562621617367344559939623676933227
    np.testing.assert_array_equal(
        stream(2024, "bias", 64, 3).random(3),
        [0.22000607605220857, 0.09779103430580594, 0.980185318394612],
    )


def test_labels_are_length_prefixed():
    assert seed_derive(1, ("ab",)) != seed_derive(1, ("a", "b"))
    assert seed_derive(1, (12,)) != seed_derive(1, ("12",))
    assert seed_derive(1, (1, 23)) != seed_derive(1, (12, 3))


def test_master_seed_matters():
    assert seed_derive(0, (1,)) != seed_derive(1, (1,))
    assert seed_derive(2**64 - 1, (1,)) != seed_derive(0, (1,))


def test_no_collisions_over_a_million_replicate_ids():
    keys = {seed_derive(123, ("rep", r)) for r in range(10**6)}
    assert len(keys) == 10**6


def test_streams_reproducible_and_distinct():
    a = stream(5, "x", 1).random(8)
    np.testing.assert_array_equal(a, stream(5, "x", 1).random(8))
    assert not np.array_equal(a, stream(5, "x", 2).random(8))


def test_generator_uses_full_key():
    k = seed_derive(9, ("k",))
    low_only = k & ((1 << 64) - 1)
    assert not np.array_equal(generator(k).random(4), generator(low_only).random(4))
