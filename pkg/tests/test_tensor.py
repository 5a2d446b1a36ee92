import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fastconv import tensor
from fastconv.tensor import ShapeError

small = st.integers(1, 4)
shapes = st.tuples(small, small, small, small, small)
finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def tensors(shape=shapes):
    return shape.flatmap(lambda s: arrays(np.float32, s, elements=finite))


@pytest.mark.parametrize("shape, count", [((1, 1, 1, 1, 1), 1), ((2, 3, 4, 5, 6), 720), ((1, 1, 3, 3, 3), 27)])
def test_zeros(shape, count):
    z = tensor.zeros(shape)
    assert z.shape == shape and z.size == count and z.dtype == np.float32
    assert not z.any()


@pytest.mark.parametrize("shape", [(0, 1, 1, 1, 1), (1, 1, 1, 1, 0), (1, 1, 1, 1)])
def test_zeros_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        tensor.zeros(shape)


def test_pad_center_value():
    x = np.full((1, 1, 1, 1, 1), 5.0, np.float32)
    y = tensor.pad_zero(x, (0, 1, 1))
    assert y.shape == (1, 1, 1, 3, 3)
    assert y[0, 0, 0, 1, 1] == 5.0 and y.sum() == 5.0


def test_pad_zero_amount_is_a_copy(rng):
    x = rng.standard_normal((1, 2, 3, 4, 5)).astype(np.float32)
    y = tensor.pad_zero(x, (0, 0, 0))
    assert y is not x and np.array_equal(x, y)


def test_pad_preserves_sum():
    y = tensor.pad_zero(np.ones((1, 1, 2, 2, 2), np.float32), (1, 0, 0))
    assert y.shape == (1, 1, 4, 2, 2) and y.sum() == 8.0


def test_pad_rejects_negative():
    with pytest.raises(ValueError):
        tensor.pad_zero(np.ones((1, 1, 1, 1, 1)), (0, -1, 0))


@given(tensors(), st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 2)))
def test_pad_then_crop_is_identity(x, pads):
    assert np.array_equal(tensor.crop(tensor.pad_zero(x, pads), pads), x)


def test_add_examples(rng):
    a = rng.standard_normal((1, 2, 2, 3, 3)).astype(np.float32)
    assert np.array_equal(tensor.add(a, np.zeros_like(a)), a)
    assert np.all(tensor.add(np.ones_like(a), np.ones_like(a)) == 2.0)
    assert not tensor.add(a, -a).any()


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        tensor.add(np.ones((1, 1, 1, 1, 2)), np.ones((1, 1, 1, 2, 1)))


@given(shapes.flatmap(lambda s: st.tuples(*(arrays(np.float32, s, elements=finite) for _ in range(3)))))
def test_add_commutative_and_fixed_order_associative(abc):
    a, b, c = abc
    assert np.array_equal(tensor.add(a, b), tensor.add(b, a))
    # left-to-right evaluation is the documented order, so regrouping the same sequence is bit-stable
    assert np.array_equal(tensor.add(tensor.add(a, b), c), tensor.add(tensor.add(b, a), c))


def test_relu_examples():
    assert not tensor.relu(-np.ones((1, 1, 1, 2, 2))).any()
    assert np.all(tensor.relu(np.full((1, 1, 1, 2, 2), 2.0)) == 2.0)
    mixed = np.array([-3.0, 0.0, 4.0], np.float32).reshape(1, 1, 1, 1, 3)
    assert tensor.relu(mixed).ravel().tolist() == [0.0, 0.0, 4.0]


@given(tensors())
def test_relu_idempotent(x):
    once = tensor.relu(x)
    assert np.array_equal(tensor.relu(once), once)


def test_relu_counter_and_gates(rng):
    x = rng.standard_normal((1, 1, 2, 3, 3))
    with tensor.count_relu() as n:
        tensor.relu(x)
        tensor.relu(x)
    assert n[0] == 2
    with tensor.record_gates() as gates:
        tensor.relu(x)
    with tensor.frozen_gates(gates):
        y = tensor.relu(-x)
    assert np.array_equal(y, np.where(x > 0, -x, 0))


def test_diffs(rng):
    a = rng.standard_normal((1, 2, 2, 2, 2)).astype(np.float32)
    assert tensor.max_abs_diff(a, a) == 0.0
    assert tensor.max_abs_diff(np.zeros_like(a), np.ones_like(a)) == 1.0
    b = (a.astype(np.float64) + 1e-6).astype(np.float32)
    assert tensor.max_abs_diff(a, b) == pytest.approx(1e-6, abs=2e-7)
    assert tensor.max_rel_diff(np.zeros_like(a), np.zeros_like(a)) == 0.0


def test_t5b_round_trip_bit_exact(tmp_path, rng):
    x = rng.standard_normal((2, 3, 4, 5, 6)).astype(np.float32)
    x.flat[0] = -0.0
    x.flat[1] = np.float32(1e-45)
    path = tmp_path / "x.t5b"
    tensor.save_t5b(path, x)
    raw = path.read_bytes()
    assert raw[:4] == b"T5B1"
    assert int.from_bytes(raw[4:12], "little") == 2
    assert len(raw) == 4 + 5 * 8 + 4 * x.size
    y = tensor.load_t5b(path)
    assert y.tobytes() == x.tobytes()


def test_t5b_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.t5b"
    bad.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(ValueError):
        tensor.load_t5b(bad)
    tensor.save_t5b(bad, np.ones((1, 1, 1, 1, 2)))
    bad.write_bytes(bad.read_bytes()[:-1])
    with pytest.raises(ValueError):
        tensor.load_t5b(bad)
