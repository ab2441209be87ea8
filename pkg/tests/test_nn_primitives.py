import numpy as np
import pytest

from disentangleformer import tensor as T
from disentangleformer.errors import ConfigError
from disentangleformer.nn import EncoderLayer, Linear, MultiHeadAttention
from disentangleformer.tensor import Tape, Tensor, backward, grad_check


def rng():
    return np.random.default_rng(7)


class TestLinear:
    def test_identity_weights(self):
        lin = Linear(4, 4, rng())
        lin.weight.data[:] = np.eye(4)
        lin.bias.data[:] = 0.0
        x = np.random.default_rng(1).normal(size=(3, 4))
        np.testing.assert_allclose(lin(Tensor(x)).data, x, atol=1e-15)

    def test_zero_input_gives_bias(self):
        lin = Linear(4, 3, rng())
        lin.bias.data[:] = [1.0, -2.0, 0.5]
        out = lin(Tensor(np.zeros((2, 4)))).data
        np.testing.assert_array_equal(out, np.broadcast_to([1.0, -2.0, 0.5], (2, 3)))

    def test_matches_matmul_plus_bias(self):
        lin = Linear(5, 2, rng())
        x = np.random.default_rng(2).normal(size=(6, 5))
        want = x @ lin.weight.data.T + lin.bias.data
        np.testing.assert_allclose(lin(Tensor(x)).data, want, atol=1e-13)


class TestMultiHeadAttention:
    def test_single_token_weight_is_one(self):
        mha = MultiHeadAttention(6, 2, rng())
        x = Tensor(np.random.default_rng(3).normal(size=(1, 6)))
        out, attn = mha(x, return_attn=True)
        np.testing.assert_allclose(attn.data, 1.0, atol=1e-15)
        want = mha.out(mha.v(x)).data
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_identical_tokens_give_uniform_rows(self):
        mha = MultiHeadAttention(8, 2, rng())
        row = np.random.default_rng(4).normal(size=8)
        x = Tensor(np.tile(row, (5, 1)))
        _, attn = mha(x, return_attn=True)
        np.testing.assert_allclose(attn.data, 1.0 / 5.0, atol=1e-12)

    def test_single_head_matches_scalar_oracle(self):
        mha = MultiHeadAttention(2, 1, rng())
        x = np.asarray([[0.3, -0.7], [1.1, 0.4]])
        q = x @ mha.q.weight.data.T + mha.q.bias.data
        k = x @ mha.k.weight.data.T + mha.k.bias.data
        v = x @ mha.v.weight.data.T + mha.v.bias.data
        scores = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                scores[i, j] = sum(q[i, p] * k[j, p] for p in range(2)) / np.sqrt(2.0)
        ex = np.exp(scores - scores.max(axis=1, keepdims=True))
        w = ex / ex.sum(axis=1, keepdims=True)
        ctx = w @ v
        want = ctx @ mha.out.weight.data.T + mha.out.bias.data
        np.testing.assert_allclose(mha(Tensor(x)).data, want, atol=1e-12)

    def test_rows_stochastic(self):
        mha = MultiHeadAttention(8, 4, rng())
        x = Tensor(np.random.default_rng(5).normal(size=(2, 7, 8)))
        _, attn = mha(x, return_attn=True)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-10)

    def test_permutation_equivariance(self):
        mha = MultiHeadAttention(8, 2, rng())
        x = np.random.default_rng(6).normal(size=(6, 8))
        perm = np.random.default_rng(7).permutation(6)
        out = mha(Tensor(x)).data
        out_p = mha(Tensor(x[perm])).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_dim_not_divisible(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(7, 2, rng())


class TestEncoderLayer:
    def test_shape_contract(self):
        enc = EncoderLayer(8, 2, 16, rng())
        for shape in [(4, 8), (3, 5, 8)]:
            x = Tensor(np.random.default_rng(8).normal(size=shape))
            assert enc(x).shape == shape

    def test_zeroed_residual_branches_are_identity(self):
        enc = EncoderLayer(8, 2, 16, rng())
        enc.attn.out.weight.data[:] = 0.0
        enc.attn.out.bias.data[:] = 0.0
        enc.ffn_out.weight.data[:] = 0.0
        enc.ffn_out.bias.data[:] = 0.0
        x = np.random.default_rng(9).normal(size=(5, 8))
        np.testing.assert_array_equal(enc(Tensor(x)).data, x)

    def test_grad_check_through_layer(self):
        enc = EncoderLayer(4, 2, 8, rng())
        weights = Tensor(np.random.default_rng(10).normal(size=(3, 4)))
        f = lambda t: T.tsum(T.mul(enc(t), weights))
        assert grad_check(f, Tensor(np.random.default_rng(11).normal(size=(3, 4)))) < 1e-4

    def test_parameter_gradients_flow(self):
        enc = EncoderLayer(4, 2, 8, rng())
        x = Tensor(np.random.default_rng(12).normal(size=(3, 4)))
        with Tape():
            backward(T.tsum(T.mul(enc(x), enc(x))))
        assert all(np.abs(p.grad).sum() > 0 for _, p in enc.named_parameters() if p.size > 2)


class TestModuleWalk:
    def test_named_parameters_order_and_count(self):
        enc = EncoderLayer(8, 2, 16, rng())
        names = [n for n, _ in enc.named_parameters()]
        assert names[0] == "norm1.gamma"
        assert "attn.q.weight" in names
        assert len(names) == len(set(names))
        # 2 norms (2 each) + 4 attn linears (2 each) + 2 ffn linears (2 each)
        assert len(names) == 4 + 8 + 4
