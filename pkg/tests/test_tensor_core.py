import json
import struct

import numpy as np
import pytest

from core.errors import ContractError, ShapeError
from core.tensor_core import (
    Tensor,
    add,
    gather_rows,
    grad_check,
    grad_check_params,
    layer_norm,
    load_checkpoint,
    make_rng,
    matmul,
    mul,
    no_grad,
    ones,
    reshape,
    save_checkpoint,
    softmax_lastdim,
    spawn_rngs,
    take,
    total,
    zeros,
)


def _loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(matmul(Tensor(x), Tensor(np.eye(4))).data, x)

    def test_against_loops(self, rng):
        a, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 2))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, _loop_matmul(a, b), atol=1e-12)

    def test_zero_weight_gradient(self, rng):
        w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        total(matmul(zeros((3, 4)), w)).backward()
        np.testing.assert_array_equal(w.grad, np.zeros((4, 2)))

    def test_batched_leading_axes(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        out = matmul(Tensor(a), Tensor(b))
        assert out.shape == (2, 3, 5)
        np.testing.assert_allclose(out.data[1], _loop_matmul(a[1], b), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            matmul(zeros((2, 3)), zeros((4, 5)))
        assert err.value.shapes == [(2, 3), (4, 5)]
        assert '(2, 3)' in str(err.value) and '(4, 5)' in str(err.value)


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(softmax_lastdim(zeros((1, 4))).data, [[0.25] * 4])

    def test_large_logits_do_not_overflow(self):
        out = softmax_lastdim(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_against_closed_form(self):
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(softmax_lastdim(Tensor([[1.0, 2.0, 3.0]])).data[0], e / e.sum(), atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        out = softmax_lastdim(Tensor(rng.standard_normal((5, 7)) * 10)).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(5), atol=1e-12)
        assert out.min() >= 0.0

    def test_jacobian_rows_sum_to_zero(self, rng):
        logits = rng.standard_normal(6) * 3
        rows = []
        for i in range(6):
            x = Tensor(logits[None, :], requires_grad=True)
            total(mul(softmax_lastdim(x), Tensor(np.eye(6)[i][None, :]))).backward()
            rows.append(x.grad[0])
        jacobian = np.array(rows)
        p = softmax_lastdim(Tensor(logits[None, :])).data[0]
        np.testing.assert_allclose(jacobian, np.diag(p) - np.outer(p, p), rtol=0, atol=1e-14)
        np.testing.assert_allclose(jacobian.sum(axis=1), np.zeros(6), rtol=0, atol=1e-14)

    def test_gradient(self, rng):
        readout = Tensor(rng.standard_normal((3, 5)))
        err = grad_check(lambda v: total(mul(softmax_lastdim(v), readout)), Tensor(rng.standard_normal((3, 5))))
        assert err < 1e-4


class TestLayerNorm:
    def test_constant_rows_map_to_zero(self):
        out = layer_norm(Tensor(np.full((2, 5), 3.7)), ones((5,)), zeros((5,)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_values(self):
        out = layer_norm(Tensor([[1.0, 3.0]]), ones((2,)), zeros((2,)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_gradient(self, rng):
        gain, bias = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
        readout = Tensor(rng.standard_normal((2, 4)))
        err = grad_check(lambda x: total(mul(layer_norm(x, gain, bias), readout)),
                         Tensor(rng.standard_normal((2, 4))))
        assert err < 1e-4

    def test_gain_shape_checked(self):
        with pytest.raises(ShapeError):
            layer_norm(zeros((2, 4)), ones((3,)), zeros((4,)))


class TestAutodiff:
    def test_grad_check_of_constant_is_zero(self, rng):
        assert grad_check(lambda x: Tensor(5.0), Tensor(rng.standard_normal(3))) == 0.0

    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        total(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
        assert grad_check(total, x) < 1e-10

    def test_non_scalar_output_rejected(self, rng):
        with pytest.raises(ContractError):
            grad_check(lambda x: mul(x, x), Tensor(rng.standard_normal(3)))

    def test_reused_input_accumulates(self):
        x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
        total(add(mul(x, x), x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad
        with pytest.raises(ContractError):
            total(y).backward()

    def test_take_routes_gradient_to_slice(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        total(take(x, -1, 1, 3)).backward()
        np.testing.assert_array_equal(x.grad, [[0, 1, 1], [0, 1, 1]])

    def test_reshape_size_checked(self):
        with pytest.raises(ShapeError):
            reshape(zeros((2, 3)), (4, 2))

    def test_grad_check_params_reports_every_name(self, rng):
        params = {'w': Tensor(rng.standard_normal((3, 2))), 'b': Tensor(rng.standard_normal(2))}
        x = Tensor(rng.standard_normal((4, 3)))

        def loss(p):
            return total(mul(add(matmul(x, p['w']), p['b']), add(matmul(x, p['w']), p['b'])))

        report = grad_check_params(loss, params, coords_per_param=3, rng=rng)
        assert set(report) == {'w', 'b'}
        assert max(report.values()) < 1e-4


class TestGatherRows:
    def test_bilinear_weights(self):
        src = Tensor([[0.0], [10.0], [20.0]])
        out = gather_rows(src, [[0, 1], [1, 2]], [[0.25, 0.75], [0.5, 0.5]])
        np.testing.assert_allclose(out.data, [[7.5], [15.0]])

    def test_index_out_of_range(self):
        with pytest.raises(ContractError):
            gather_rows(zeros((2, 3)), [[2]], [[1.0]])


class TestRandomness:
    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(make_rng(7).standard_normal(5), make_rng(7).standard_normal(5))

    def test_spawned_streams_differ(self):
        a, b = spawn_rngs(7, 2)
        assert not np.array_equal(a.standard_normal(5), b.standard_normal(5))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        params = {'a.w': Tensor(rng.standard_normal((3, 2))), 'b': Tensor(rng.standard_normal(4))}
        meta = {'denoiser': {'dim': 8}, 'patch': 4}
        path = save_checkpoint(tmp_path / 'ckpt' / 'model.safetensors', params, meta)
        loaded, loaded_meta = load_checkpoint(path)
        assert loaded_meta == meta
        assert set(loaded) == set(params)
        for name, value in params.items():
            np.testing.assert_array_equal(loaded[name].data, value.data)
            assert loaded[name].data.dtype == np.float64
            assert not loaded[name].requires_grad

    def test_header_is_little_endian_json(self, tmp_path):
        path = save_checkpoint(tmp_path / 'm.safetensors', {'x': ones((2,))}, {'k': 1})
        raw = path.read_bytes()
        (length,) = struct.unpack('<Q', raw[:8])
        header = json.loads(raw[8:8 + length])
        assert header['x']['dtype'] == 'F64'
        assert header['x']['shape'] == [2]
        assert json.loads(header['__metadata__']['config']) == {'k': 1}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ContractError):
            load_checkpoint(tmp_path / 'absent.safetensors')
