import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cranekit.archive import TensorArchive
from cranekit.delta import StructureError, check_paired, delta_archive, sparsify, trim_top_fraction
from oracles import median_sparsify


def test_identical_checkpoints_give_zero_delta(rng):
    a = TensorArchive.from_arrays({"w": rng.standard_normal((3, 3)), "b": rng.standard_normal(3)})
    assert all(not np.any(v) for v in delta_archive(a, a).values())


def test_small_subtraction():
    d = delta_archive(TensorArchive.from_arrays({"w": np.array([1.0, 2.0])}), TensorArchive.from_arrays({"w": np.array([3.0, 1.0])}))
    np.testing.assert_array_equal(d["w"], [2.0, -1.0])


def test_structure_mismatches():
    a = TensorArchive.from_arrays({"w": np.zeros((2, 3))})
    with pytest.raises(StructureError, match="shape"):
        check_paired(a, TensorArchive.from_arrays({"w": np.zeros((3, 2))}))
    with pytest.raises(StructureError, match="names"):
        check_paired(a, TensorArchive.from_arrays({"v": np.zeros((2, 3))}))


def test_delta_in_f64_from_narrow_storage():
    a = TensorArchive.from_arrays({"w": np.array([1.0])}, "BF16")
    b = TensorArchive.from_arrays({"w": np.array([1.0078125])}, "BF16")
    assert delta_archive(a, b)["w"][0] == 0.0078125


def test_sparsify_examples():
    np.testing.assert_array_equal(sparsify(np.zeros(5)), np.zeros(5))
    np.testing.assert_array_equal(sparsify(np.array([1.0, -2.0, 3.0, -4.0])), [0.0, 0.0, 6.0, -8.0])
    np.testing.assert_array_equal(sparsify(np.full(4, 5.0)), np.zeros(4))


@settings(max_examples=150, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=2, max_side=9), elements=st.floats(-100, 100, width=64)))
def test_sparsify_matches_loop_oracle(d):
    np.testing.assert_array_equal(sparsify(d), median_sparsify(d))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 40))
def test_sparsify_keeps_strictly_under_half_for_distinct(seed, half):
    D = 2 * half + 1
    d = np.random.default_rng(seed).permutation(np.arange(1, D + 1)) * np.random.default_rng(seed + 1).choice([-1.0, 1.0], D)
    t = sparsify(d)
    assert np.count_nonzero(t) == half
    np.testing.assert_array_equal(t[t != 0], 2 * d[t != 0])


def test_trim_top_fraction():
    d = np.array([1.0, -2.0, 3.0, -4.0])
    np.testing.assert_array_equal(trim_top_fraction(d, 0.5), [0.0, 0.0, 3.0, -4.0])
    np.testing.assert_array_equal(trim_top_fraction(d, 1.0), d)
    # ties: earlier index wins
    np.testing.assert_array_equal(trim_top_fraction(np.array([2.0, -2.0, 2.0]), 0.34), [2.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        trim_top_fraction(d, 0.0)
