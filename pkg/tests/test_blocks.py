"""Attention machinery tests: hand-derived attention values, brute-force
multi-head oracles, positional-encoding table entries, block fidelity
against the straight-line re-implementation, and the stated invariants
(convex envelope, key-shift invariance, per-frame locality)."""

import math

import numpy as np
import pytest

from avatr import autodiff as ad
from avatr.autodiff import Tensor, check_gradients
from avatr.blocks import (
    ConditionalAttentionBlock,
    MultiHeadAttention,
    SelfAttentionBlock,
    attention,
    attention_weights,
    positional_encoding,
)
from avatr.errors import ConfigError, ShapeError

from oracles import np_cab, np_mha, np_sab

F64 = np.float64


def t(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype))


class TestAttention:
    def test_single_query_single_key_passes_value_through(self, rng):
        q = t(rng.normal(size=(1, 3)))
        k = t(rng.normal(size=(1, 3)))
        v = t([[2.0, -1.0, 0.5]])
        out = attention(q, k, v)
        np.testing.assert_allclose(out.data, v.data, rtol=1e-6)
        np.testing.assert_allclose(attention_weights(q, k).data, [[1.0]])

    def test_identical_keys_give_uniform_weights(self, rng):
        q = t(rng.normal(size=(2, 4)))
        k = t(np.tile(rng.normal(size=(1, 4)), (5, 1)))
        v = t(rng.normal(size=(5, 4)))
        w = attention_weights(q, k).data
        np.testing.assert_allclose(w, 1.0 / 5.0, atol=1e-7)
        out = attention(q, k, v).data
        np.testing.assert_allclose(out, np.tile(v.data.mean(axis=0), (2, 1)), atol=1e-6)

    def test_two_key_hand_case(self):
        # Frozen from the straight-line formula at float64:
        # logits = [1/sqrt(2), 0] -> softmax -> W, output = W @ V.
        q = t([[1.0, 0.0]], F64)
        k = t([[1.0, 0.0], [0.0, 1.0]], F64)
        v = t([[2.0, 0.0], [0.0, 2.0]], F64)
        w = attention_weights(q, k).data
        np.testing.assert_allclose(w, [[0.66976155, 0.33023845]], atol=1e-7)
        np.testing.assert_allclose(w, [[0.6698, 0.3302]], atol=5e-5)
        out = attention(q, k, v).data
        np.testing.assert_allclose(out, [[1.3395231, 0.6604769]], atol=1e-7)

    def test_output_has_query_shape(self, rng):
        out = attention(t(rng.normal(size=(7, 6))), t(rng.normal(size=(3, 6))),
                        t(rng.normal(size=(3, 6))))
        assert out.shape == (7, 6)

    def test_width_mismatch_raises(self, rng):
        with pytest.raises(ShapeError, match="attention"):
            attention(t(rng.normal(size=(2, 3))), t(rng.normal(size=(2, 4))),
                      t(rng.normal(size=(2, 4))))

    def test_key_value_row_permutation_invariance(self, rng):
        q = t(rng.normal(size=(4, 6)))
        k = rng.normal(size=(5, 6)).astype(np.float32)
        v = rng.normal(size=(5, 6)).astype(np.float32)
        perm = rng.permutation(5)
        a = attention(q, t(k), t(v)).data
        b = attention(q, t(k[perm]), t(v[perm])).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_convex_envelope_of_values(self, rng):
        for _ in range(50):
            q = t(rng.normal(size=(6, 4)))
            k = t(rng.normal(size=(5, 4)))
            v = rng.normal(size=(5, 4)).astype(np.float32)
            out = attention(q, k, t(v)).data
            assert np.all(out >= v.min(axis=0) - 1e-5)
            assert np.all(out <= v.max(axis=0) + 1e-5)

    def test_key_shift_invariance(self, rng):
        # Adding one constant vector to every key row shifts all logits in a
        # row equally, which softmax cancels.
        q = t(rng.normal(size=(4, 6)))
        k = rng.normal(size=(5, 6)).astype(np.float32)
        shift = rng.normal(size=(1, 6)).astype(np.float32)
        w0 = attention_weights(q, t(k)).data
        w1 = attention_weights(q, t(k + shift)).data
        np.testing.assert_allclose(w0, w1, atol=1e-5)


class TestMultiHead:
    def test_single_head_identity_projection_equals_attention(self, rng):
        mha = MultiHeadAttention(width=6, heads=1, rng=rng)
        mha.wo.data = np.eye(6, dtype=np.float32)
        mha.bo.data = np.zeros(6, dtype=np.float32)
        q, k, v = (t(rng.normal(size=(4, 6))) for _ in range(3))
        np.testing.assert_allclose(mha(q, k, v).data, attention(q, k, v).data,
                                   atol=1e-6)

    def test_two_heads_match_brute_force(self, rng):
        mha = MultiHeadAttention(width=4, heads=2, rng=rng)
        q, k, v = (rng.normal(size=(5, 4)).astype(np.float32) for _ in range(3))
        got = mha(t(q), t(k), t(v)).data
        want = np_mha(q.astype(F64), k.astype(F64), v.astype(F64), 2,
                      mha.wo.data.astype(F64), mha.bo.data.astype(F64))
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_head_count_must_divide_width(self, rng):
        with pytest.raises(ConfigError, match="divide"):
            MultiHeadAttention(width=6, heads=4, rng=rng)


class TestPositionalEncoding:
    def test_first_row_alternates_zero_one(self):
        table = positional_encoding(3, 8).data
        np.testing.assert_allclose(table[0], [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-7)

    def test_entries_bounded_by_one(self):
        table = positional_encoding(64, 16).data
        assert np.all(np.abs(table) <= 1.0 + 1e-7)

    def test_sin_of_position_one(self):
        table = positional_encoding(2, 4).data
        np.testing.assert_allclose(table[1, 0], math.sin(1.0), atol=1e-7)
        np.testing.assert_allclose(table[1, 0], 0.8414709848, atol=1e-7)

    def test_odd_width_rejected(self):
        with pytest.raises(ConfigError, match="even"):
            positional_encoding(4, 5)


class TestSelfAttentionBlock:
    def test_output_shape_matches_input(self, rng):
        block = SelfAttentionBlock(width=8, heads=2, dropout=0.1, rng=rng)
        for n in (1, 3, 17):
            z = t(rng.normal(size=(n, 8)))
            assert block(z).shape == (n, 8)

    def test_eval_mode_is_bit_deterministic(self, rng):
        block = SelfAttentionBlock(width=8, heads=2, dropout=0.0, rng=rng)
        z = t(rng.normal(size=(5, 8)))
        assert np.array_equal(block(z).data, block(z).data)

    def test_matches_straight_line_oracle(self, rng):
        block = SelfAttentionBlock(width=4, heads=2, dropout=0.0, rng=rng, dtype=F64)
        z = rng.normal(size=(3, 4))
        got = block(Tensor(z, dtype=F64)).data
        np.testing.assert_allclose(got, np_sab(z, block), atol=1e-6)

    def test_gradient_check_below_1e4(self, rng):
        # Mean keeps the loss O(1): the key-projection bias has an exactly
        # zero gradient (softmax shift invariance), so a large loss would
        # drown that entry's finite-difference in rounding noise.
        block = SelfAttentionBlock(width=6, heads=2, dropout=0.0, rng=rng, dtype=F64)
        z = Tensor(rng.normal(size=(4, 6)), dtype=F64)
        c = Tensor(rng.normal(size=(4, 6)), dtype=F64)
        err = check_gradients(lambda: ad.mean(ad.mul(block(z), c)),
                              block.parameters(), h=1e-4)
        assert err < 1e-4

    def test_per_frame_sublayers_do_not_leak_across_frames(self, rng):
        # Outside attention, every sub-operation acts row-wise: changing one
        # input row of the MLP+LayerNorm path leaves other rows unchanged.
        block = SelfAttentionBlock(width=8, heads=2, dropout=0.0, rng=rng)
        zhat = rng.normal(size=(6, 8)).astype(np.float32)
        out0 = block.ln2(ad.add(t(zhat), block.mlp(t(zhat)))).data
        bumped = zhat.copy()
        bumped[2] += 1.0
        out1 = block.ln2(ad.add(t(bumped), block.mlp(t(bumped)))).data
        keep = [i for i in range(6) if i != 2]
        np.testing.assert_array_equal(out0[keep], out1[keep])


class TestConditionalAttentionBlock:
    def test_zero_avatar_reduces_to_plain_block(self, rng):
        block = ConditionalAttentionBlock(width=6, heads=2, dropout=0.0, rng=rng,
                                          dtype=F64)
        y = rng.normal(size=(4, 6))
        z = rng.normal(size=(4, 6))
        got = block(Tensor(y, dtype=F64), Tensor(z, dtype=F64),
                    Tensor(np.zeros(6), dtype=F64)).data
        want = np_cab(y, z, np.zeros(6), block)
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_output_shape(self, rng):
        block = ConditionalAttentionBlock(width=8, heads=4, dropout=0.0, rng=rng)
        out = block(t(rng.normal(size=(5, 8))), t(rng.normal(size=(5, 8))),
                    t(rng.normal(size=8)))
        assert out.shape == (5, 8)

    def test_matches_straight_line_oracle(self, rng):
        block = ConditionalAttentionBlock(width=4, heads=2, dropout=0.0, rng=rng,
                                          dtype=F64)
        y = rng.normal(size=(3, 4))
        z = rng.normal(size=(3, 4))
        avatar = rng.normal(size=4)
        got = block(Tensor(y, dtype=F64), Tensor(z, dtype=F64),
                    Tensor(avatar, dtype=F64)).data
        np.testing.assert_allclose(got, np_cab(y, z, avatar, block), atol=1e-6)

    def test_avatar_width_mismatch(self, rng):
        block = ConditionalAttentionBlock(width=6, heads=2, dropout=0.0, rng=rng)
        with pytest.raises(ShapeError, match="avatar"):
            block(t(rng.normal(size=(4, 6))), t(rng.normal(size=(4, 6))),
                  t(rng.normal(size=5)))

    def test_gradient_check_below_1e4(self, rng):
        block = ConditionalAttentionBlock(width=4, heads=2, dropout=0.0, rng=rng,
                                          dtype=F64)
        y = Tensor(rng.normal(size=(3, 4)), dtype=F64)
        z = Tensor(rng.normal(size=(3, 4)), dtype=F64)
        a = Tensor(rng.normal(size=4), dtype=F64)
        out_scale = Tensor(rng.normal(size=(3, 4)), dtype=F64)
        err = check_gradients(
            lambda: ad.mean(ad.mul(block(y, z, a), out_scale)),
            block.parameters(), h=1e-4)
        assert err < 1e-4

    def test_train_mode_dropout_uses_seeded_stream(self, rng):
        block = ConditionalAttentionBlock(width=6, heads=2, dropout=0.3, rng=rng)
        y, z = t(rng.normal(size=(4, 6))), t(rng.normal(size=(4, 6)))
        a = t(rng.normal(size=6))
        one = block(y, z, a, train=True, rng=np.random.default_rng(5)).data
        two = block(y, z, a, train=True, rng=np.random.default_rng(5)).data
        assert np.array_equal(one, two)
