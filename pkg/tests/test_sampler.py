import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from airwayseg.errors import ConfigurationError, ContractError
from airwayseg.sampler import (
    MORE_HIGH,
    MORE_LOW,
    SAME_FREQUENCY,
    SamplerConfig,
    Schedule,
    advance_schedule,
    build_table,
    compute_fineness,
    draw_batch,
    draw_indices,
    sampling_weights,
)


def brute_fineness(label):
    """Count airway voxels with a face neighbour outside the airway or the grid."""
    n = surface = 0
    shape = label.shape
    for z, y, x in itertools.product(*(range(s) for s in shape)):
        if not label[z, y, x]:
            continue
        n += 1
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            q = (z + dz, y + dy, x + dx)
            if not all(0 <= q[i] < shape[i] for i in range(3)) or not label[q]:
                surface += 1
                break
    return 0.0 if n == 0 else surface / n


def test_fineness_examples():
    assert compute_fineness(np.zeros((4, 4, 4), bool)) == 0.0
    one = np.zeros((3, 3, 3), bool)
    one[1, 1, 1] = True
    assert compute_fineness(one) == 1.0
    cube = np.zeros((5, 5, 5), bool)
    cube[1:4, 1:4, 1:4] = True
    assert compute_fineness(cube) == 26 / 27
    # touching the patch border counts as surface
    assert compute_fineness(np.ones((3, 3, 3), bool)) == 26 / 27


@settings(max_examples=60, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))))
def test_fineness_matches_brute_force(label):
    assert compute_fineness(label) == pytest.approx(brute_fineness(label), abs=1e-12)


def test_table_examples():
    cfg = SamplerConfig(beta=1.0)
    assert np.allclose(build_table([0.1, 0.2], cfg, MORE_HIGH).probabilities, [1 / 3, 2 / 3])
    low = build_table([0.1, 0.2], cfg, MORE_LOW)
    assert np.allclose(low.weights, [10, 5]) and np.allclose(low.probabilities, [2 / 3, 1 / 3])


def test_zero_fineness_weight():
    absolute = SamplerConfig(delta=0.05, delta_relative=False)
    for mode in (MORE_HIGH, MORE_LOW):
        assert sampling_weights([0.0, 0.5], absolute, mode)[0] == 0.05
    relative = SamplerConfig(delta=0.01)
    assert sampling_weights([0.0, 0.5, 0.25], relative, MORE_HIGH)[0] == pytest.approx(0.01 * 0.375)
    literal = SamplerConfig(beta=10.0, literal_zero_weight=True)
    assert sampling_weights([0.0, 0.5], literal, MORE_LOW)[0] == 10.0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SamplerConfig(beta=0)
    with pytest.raises(ConfigurationError):
        SamplerConfig(delta=-1)
    with pytest.raises(ConfigurationError):
        SamplerConfig(phase_length=0)
    with pytest.raises(ContractError):
        build_table([], SamplerConfig())


fineness_lists = st.lists(st.one_of(st.just(0.0), st.floats(0.01, 1.0)), min_size=1, max_size=100)


@settings(max_examples=80, deadline=None)
@given(fineness_lists, st.floats(0.1, 10.0), st.sampled_from([MORE_HIGH, MORE_LOW, SAME_FREQUENCY]),
       st.booleans(), st.booleans())
def test_table_is_a_distribution(t, beta, mode, relative, literal):
    table = build_table(t, SamplerConfig(beta=beta, delta_relative=relative, literal_zero_weight=literal), mode)
    assert abs(table.probabilities.sum() - 1.0) < 1e-12
    assert np.all(table.probabilities > 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=2, max_size=50, unique=True), st.floats(0.1, 10.0))
def test_mode_symmetry_and_beta_invariance(ticks, beta):
    t = [k / 1000 for k in ticks]
    cfg = SamplerConfig(beta=beta)
    high = build_table(t, cfg, MORE_HIGH).probabilities
    low = build_table(t, cfg, MORE_LOW).probabilities
    assert list(np.argsort(high, kind="stable")) == list(np.argsort(-low, kind="stable"))
    for mode in (MORE_HIGH, MORE_LOW):
        base = build_table(t, SamplerConfig(beta=1.0), mode).probabilities
        assert np.allclose(build_table(t, cfg, mode).probabilities, base, rtol=1e-10, atol=0)


def test_beta_moves_mass_only_against_absolute_delta():
    t = [0.0, 0.3, 0.6]
    one = build_table(t, SamplerConfig(beta=1.0, delta=0.1, delta_relative=False)).probabilities
    ten = build_table(t, SamplerConfig(beta=10.0, delta=0.1, delta_relative=False)).probabilities
    assert ten[0] < one[0]
    assert ten[2] / ten[1] == pytest.approx(one[2] / one[1])


def test_draws():
    rng = np.random.default_rng(0)
    single = build_table([0.5], SamplerConfig())
    assert draw_batch(single, 5, rng) == [0.5] * 5
    table = build_table([0.1, 0.2, 0.3, 0.4], SamplerConfig(), SAME_FREQUENCY)
    freq = np.bincount(draw_indices(table, 100_000, rng), minlength=4) / 100_000
    assert np.all(np.abs(freq - 0.25) <= 0.01)
    with pytest.raises(ContractError):
        draw_indices(table, 0, rng)


def test_schedule():
    s = Schedule("iterative", phase_length=100)
    assert all(advance_schedule(s, i) == MORE_HIGH for i in range(100))
    assert all(advance_schedule(s, i) == MORE_LOW for i in range(100, 200))
    assert advance_schedule(s, 200) == MORE_HIGH
    ctf = Schedule("coarse_then_fine", midpoint=50)
    modes = [ctf.mode_at(i) for i in range(100)]
    assert sum(a != b for a, b in zip(modes, modes[1:])) == 1
    assert modes[0] == MORE_LOW and modes[-1] == MORE_HIGH
    ftc = Schedule("fine_then_coarse", midpoint=50)
    assert ftc.mode_at(0) == MORE_HIGH and ftc.mode_at(99) == MORE_LOW
    assert Schedule("same_frequency").mode_at(7) == SAME_FREQUENCY
    assert Schedule("more_high").mode_at(10**6) == MORE_HIGH
    fine10 = SamplerConfig(beta=10.0, mode=MORE_HIGH)
    assert build_table([0.2, 0.9], fine10).mode == MORE_HIGH
    with pytest.raises(ConfigurationError):
        Schedule("zigzag")
