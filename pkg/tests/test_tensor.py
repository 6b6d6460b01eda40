import io
import itertools

import numpy as np
import pytest

from visemeflow import tensor
from visemeflow.errors import BadMagicError, DataError, ShapeMismatchError, TruncatedPayloadError

from oracles import matmul_triple_loop


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 5))
        eye = np.eye(5)
        np.testing.assert_array_equal(tensor.matmul(a, eye), a)

    def test_one_by_one(self):
        out = tensor.matmul(np.array([[2.0]]), np.array([[3.0]]))
        assert out[0, 0] == 6.0

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((5, 3))
        got = tensor.matmul(a, b)
        want = matmul_triple_loop(a, b)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_small_shape_sweep(self):
        # every (m, k, n) up to 8 against the loop oracle
        rng = np.random.default_rng(2)
        for m, k, n in itertools.product(range(1, 9), repeat=3):
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, n))
            np.testing.assert_allclose(tensor.matmul(a, b), matmul_triple_loop(a, b), rtol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(4, 2\)"):
            tensor.matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_dtype_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            tensor.matmul(np.zeros((2, 2), np.float32), np.zeros((2, 2), np.float64))


class TestMap:
    def test_tanh_on_zeros(self):
        out = tensor.map_elements(np.zeros((3, 4)), np.tanh)
        np.testing.assert_array_equal(out, np.zeros((3, 4)))

    def test_relu(self):
        out = tensor.map_elements(np.array([-1.0, 0.0, 1.0]), lambda v: max(v, 0.0))
        np.testing.assert_array_equal(out, [0.0, 0.0, 1.0])

    def test_sigmoid_at_zero(self):
        from visemeflow.nn import sigmoid

        out = tensor.map_elements(np.zeros((2, 2)), sigmoid)
        np.testing.assert_array_equal(out, np.full((2, 2), 0.5))

    def test_preserves_dtype(self):
        out = tensor.map_elements(np.ones((2,), np.float32), np.tanh)
        assert out.dtype == np.float32


class TestReduceSum:
    def test_all(self):
        assert tensor.reduce_sum(np.ones((3, 4))) == 12.0

    def test_axis(self):
        out = tensor.reduce_sum(np.array([[1.0, 2.0], [3.0, 4.0]]), axis=0)
        np.testing.assert_array_equal(out, [4.0, 6.0])

    def test_sequential_axes_match_reduce_all(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((3, 4, 5))
        seq = tensor.reduce_sum(tensor.reduce_sum(tensor.reduce_sum(a, axis=2), axis=1), axis=0)
        np.testing.assert_allclose(float(seq), tensor.reduce_sum(a), rtol=1e-12)

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeMismatchError, match="out of range"):
            tensor.reduce_sum(np.ones((2, 2)), axis=2)


class TestReshape:
    def test_row_major_order(self):
        a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        np.testing.assert_array_equal(tensor.reshape(a, (6,)), [1, 2, 3, 4, 5, 6])

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((1, 1, 4))
        back = tensor.reshape(tensor.reshape(a, (4,)), (1, 1, 4))
        assert back.tobytes() == a.tobytes()

    def test_flatten_conv_block(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
        flat = tensor.reshape(a, (2, 60))
        back = tensor.reshape(flat, (2, 3, 4, 5))
        np.testing.assert_array_equal(back, a)
        assert flat.tobytes() == a.tobytes()

    def test_element_count_mismatch(self):
        with pytest.raises(ShapeMismatchError, match="reshape"):
            tensor.reshape(np.ones((2, 3)), (7,))


class TestNtsrFormat:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, tmp_path, dtype):
        rng = np.random.default_rng(6)
        for shape in [(3,), (2, 5), (2, 3, 4), (1, 2, 3, 4)]:
            a = rng.standard_normal(shape).astype(dtype)
            path = tmp_path / "t.ntsr"
            tensor.save_tensor(path, a)
            back = tensor.load_tensor(path)
            assert back.dtype == a.dtype
            assert back.shape == a.shape
            assert back.tobytes() == a.tobytes()

    def test_layout_bytes(self, tmp_path):
        a = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = tmp_path / "t.ntsr"
        tensor.save_tensor(path, a)
        raw = path.read_bytes()
        assert raw[:4] == b"NTSR"
        assert raw[4] == 0  # f32
        assert raw[5] == 2  # rank
        dims = np.frombuffer(raw[6:22], dtype="<u8")
        assert tuple(dims) == (2, 3)
        assert raw[22:] == a.astype("<f4").tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.ntsr"
        path.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(BadMagicError):
            tensor.load_tensor(path)

    def test_truncated(self, tmp_path):
        a = np.ones((4, 4), np.float64)
        path = tmp_path / "t.ntsr"
        tensor.save_tensor(path, a)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TruncatedPayloadError):
            tensor.load_tensor(path)

    def test_trailing_garbage(self, tmp_path):
        a = np.ones((2,), np.float32)
        path = tmp_path / "t.ntsr"
        tensor.save_tensor(path, a)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(DataError):
            tensor.load_tensor(path)

    def test_stream_concatenation(self):
        # checkpoints append tensors back to back in one stream
        buf = io.BytesIO()
        a = np.ones((2, 2), np.float32)
        b = np.zeros((3,), np.float64)
        tensor.write_tensor(buf, a)
        tensor.write_tensor(buf, b)
        buf.seek(0)
        np.testing.assert_array_equal(tensor.read_tensor(buf), a)
        np.testing.assert_array_equal(tensor.read_tensor(buf), b)


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((6, 6)) * 1e3
    assert np.isfinite(tensor.matmul(a, a)).all()
    assert np.isfinite(tensor.map_elements(a, np.tanh)).all()
    assert np.isfinite(tensor.reduce_sum(a, axis=1)).all()
