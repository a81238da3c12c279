import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promptvid import autodiff as ad
from promptvid.attention import attention, attention_weights, merge_heads, split_heads, temporal_values, text_values
from promptvid.autodiff import ParameterStore, RngStream
from promptvid.errors import DimensionError, StateError
from promptvid.injection import (add_injection_projections, cross_frame_values, empty_prompt, project_prompt,
                                 propagate_to_frame, update_first_frame)

from oracles import bf_cross_frame, bf_injected, bf_temporal, bf_text


def rand(rng, *shape):
    return rng.standard_normal(shape)


def T(x):
    return ad.Tensor(x)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestCoreAttention:
    def test_weights_rows_sum_to_one(self, rng, f64):
        w = attention_weights(T(rand(rng, 3, 5, 8)), T(rand(rng, 3, 7, 8)))
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)

    def test_key_value_count_mismatch(self, rng):
        with pytest.raises(DimensionError):
            attention(T(rand(rng, 2, 4)), T(rand(rng, 3, 4)), T(rand(rng, 4, 4)))

    def test_split_merge_round_trip(self, rng, f64):
        x = rand(rng, 2, 3, 5, 16)
        np.testing.assert_array_equal(merge_heads(split_heads(T(x), 8)).data, x)

    def test_split_heads_bad_width(self, rng):
        with pytest.raises(DimensionError):
            split_heads(T(rand(rng, 2, 5, 12)), 8)


class TestCrossFrame:
    def test_single_frame_is_self_attention(self, rng, f64):
        q, k, v = (rand(rng, 1, 1, 2, 4, 8) for _ in range(3))
        out = cross_frame_values(T(q), T(k), T(v))
        ref = attention(T(q[:, 0]), T(k[:, 0]), T(v[:, 0]))
        np.testing.assert_array_equal(out.data[:, 0], ref.data)

    def test_identical_frames_identical_outputs(self, rng, f64):
        q, k, v = (np.repeat(rand(rng, 1, 1, 2, 4, 8), 3, axis=1) for _ in range(3))
        out = cross_frame_values(T(q), T(k), T(v)).data
        for i in range(1, 3):
            np.testing.assert_allclose(out[:, i], out[:, 0], atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(F=st.integers(1, 4), N=st.integers(1, 16), d=st.integers(1, 8), seed=st.integers(0, 10_000))
    def test_matches_enumeration(self, F, N, d, seed):
        g = np.random.default_rng(seed)
        q, k, v = (g.standard_normal((1, F, 1, N, d)) for _ in range(3))
        with ad.default_dtype(np.float64):
            out = cross_frame_values(T(q), T(k), T(v)).data
        np.testing.assert_allclose(out[0, :, 0], bf_cross_frame(q[0, :, 0], k[0, :, 0], v[0, :, 0]), atol=1e-10)


class TestInjection:
    def test_zero_rows_prompt_equals_base(self, rng, f64):
        q, k, v = (rand(rng, 2, 3, 2, 4, 8) for _ in range(3))
        kz, vz = empty_prompt(T(k))
        first = update_first_frame(T(q[:, 0]), T(k[:, 0]), T(v[:, 0]), kz, vz)
        base = cross_frame_values(T(q), T(k), T(v))
        np.testing.assert_array_equal(first.data, base.data[:, 0])

    def test_hard_attention_limit(self, f64):
        d = 4
        q0 = np.zeros((1, d))
        q0[0, 0] = 1.0
        k0 = np.zeros((3, d))
        k0[:, 1] = 1.0  # orthogonal to q0
        v0 = np.ones((3, d))
        k_i = np.zeros((2, d))
        k_i[1, 0] = 200.0
        v_i = np.array([[5.0, 5, 5, 5], [-3.0, 1, 4, 2]])
        out = update_first_frame(T(q0), T(k0), T(v0), T(k_i), T(v_i))
        np.testing.assert_allclose(out.data[0], v_i[1], atol=1e-10)

    def test_update_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            update_first_frame(T(rand(rng, 4, 8)), T(rand(rng, 4, 8)), T(rand(rng, 4, 8)),
                               T(rand(rng, 6, 4)), T(rand(rng, 6, 8)))

    def test_no_update_degenerates_to_base(self, rng, f64):
        q, k, v = (rand(rng, 1, 3, 1, 4, 8) for _ in range(3))
        base = cross_frame_values(T(q), T(k), T(v)).data
        out = propagate_to_frame(T(q[:, 2]), T(k[:, 0]), T(k[:, 1]), T(v[:, 0]), T(v[:, 1]))
        np.testing.assert_allclose(out.data, base[:, 2], atol=1e-12)

    def test_value_perturbation_leaves_weights(self, rng, f64):
        q, k, v = (rand(rng, 4, 8) for _ in range(3))
        k_prev, v_prev = rand(rng, 4, 8), rand(rng, 4, 8)
        bumped = v.copy()
        bumped[2] += 1.0
        a = propagate_to_frame(T(q), T(k), T(k_prev), T(v), T(v_prev)).data
        b = propagate_to_frame(T(q), T(k), T(k_prev), T(bumped), T(v_prev)).data
        w = attention_weights(T(q), T(np.concatenate([k, k_prev]))).data
        # The change is exactly weight-to-row-2 times the bump, so the weights were untouched.
        np.testing.assert_allclose(b - a, w[:, 2:3] * np.ones((1, 8)), atol=1e-12)

    def test_row_count_mismatch(self, rng):
        with pytest.raises(DimensionError):
            propagate_to_frame(T(rand(rng, 4, 8)), T(rand(rng, 4, 8)), T(rand(rng, 4, 8)), T(rand(rng, 3, 8)),
                               T(rand(rng, 4, 8)))

    def test_single_frame_only_first_update(self, rng, f64):
        q, k, v = (rand(rng, 1, 1, 1, 4, 8) for _ in range(3))
        k_i, v_i = rand(rng, 1, 1, 6, 8), rand(rng, 1, 1, 6, 8)
        out = cross_frame_values(T(q), T(k), T(v), (T(k_i), T(v_i)))
        ref = update_first_frame(T(q[:, 0]), T(k[:, 0]), T(v[:, 0]), T(k_i), T(v_i))
        assert out.shape[1] == 1
        np.testing.assert_array_equal(out.data[:, 0], ref.data)

    @pytest.mark.parametrize("recursive", [False, True])
    def test_two_phase_oracle(self, recursive, rng, f64):
        q, k, v = (rand(rng, 1, 3, 1, 4, 8) for _ in range(3))
        k_i, v_i = rand(rng, 1, 1, 6, 8), rand(rng, 1, 1, 6, 8)
        out = cross_frame_values(T(q), T(k), T(v), (T(k_i), T(v_i)), recursive=recursive).data
        ref = bf_injected(q[0, :, 0], k[0, :, 0], v[0, :, 0], k_i[0, 0], v_i[0, 0], recursive)
        np.testing.assert_allclose(out[0, :, 0], ref, atol=1e-10)

    def test_attention_map_invariant_to_value_update(self, rng, f64):
        # Frames >= 1 weigh keys identically with and without injection.
        q, k, v = (rand(rng, 1, 3, 1, 4, 8) for _ in range(3))
        keys = np.concatenate([k[0, 0, 0], k[0, 1, 0]])
        w_base = attention_weights(T(q[0, 2, 0]), T(keys)).data
        k_i, v_i = rand(rng, 1, 1, 6, 8), rand(rng, 1, 1, 6, 8)
        out = cross_frame_values(T(q), T(k), T(v), (T(k_i), T(v_i))).data
        v0_new = out[0, 0, 0]
        expect = w_base[:, :4] @ v0_new + w_base[:, 4:] @ v[0, 1, 0]
        np.testing.assert_allclose(out[0, 2, 0], expect, atol=1e-12)


class TestProjections:
    def _store(self):
        st_ = ParameterStore()
        g = np.random.default_rng(3)
        st_.add("enc1.xframe.to_k.weight", g.standard_normal((16, 16)), "base")
        st_.add("enc1.xframe.to_v.weight", g.standard_normal((16, 16)), "base")
        add_injection_projections(st_, ["enc1"])
        return st_

    def test_init_copy_is_bitwise(self):
        st_ = self._store()
        for p in ("to_k", "to_v"):
            a, b = st_[f"inject.enc1.{p}.weight"], st_[f"enc1.xframe.{p}.weight"]
            assert a is not b
            np.testing.assert_array_equal(a.data, b.data)
            assert st_.tag(f"inject.enc1.{p}.weight") == "stage2"

    def test_zero_features_give_zero(self):
        st_ = self._store()
        k, v = project_prompt(T(np.zeros((5, 16))), st_["inject.enc1.to_k.weight"], st_["inject.enc1.to_v.weight"])
        assert not k.data.any() and not v.data.any()

    def test_matmul_oracle(self, f64):
        st_ = self._store()
        f = np.random.default_rng(4).standard_normal((5, 16))
        k, v = project_prompt(T(f), st_["inject.enc1.to_k.weight"], st_["inject.enc1.to_v.weight"])
        wk = st_["inject.enc1.to_k.weight"].data
        ref = np.array([[sum(f[i, c] * wk[c, j] for c in range(16)) for j in range(16)] for i in range(5)])
        np.testing.assert_allclose(k.data, ref, atol=1e-10)

    def test_width_mismatch(self):
        st_ = self._store()
        with pytest.raises(DimensionError):
            project_prompt(T(np.zeros((5, 8))), st_["inject.enc1.to_k.weight"], st_["inject.enc1.to_v.weight"])

    def test_missing_features_is_state_error(self):
        from promptvid.injection import prompt_keys_values

        with pytest.raises(StateError):
            prompt_keys_values(self._store(), "enc1", None, 8)


class TestTemporalAndText:
    def test_temporal_single_frame_identity(self, rng, f64):
        q, k, v = (rand(rng, 1, 1, 2, 4, 8) for _ in range(3))
        np.testing.assert_array_equal(temporal_values(T(q), T(k), T(v)).data, v)

    def test_temporal_constant_frames_uniform(self, rng, f64):
        k = np.repeat(rand(rng, 1, 1, 1, 3, 8), 4, axis=1)
        q = rand(rng, 1, 4, 1, 3, 8)
        v = rand(rng, 1, 4, 1, 3, 8)
        out = temporal_values(T(q), T(k), T(v)).data
        np.testing.assert_allclose(out, np.broadcast_to(v.mean(axis=1, keepdims=True), out.shape), atol=1e-12)

    def test_temporal_oracle(self, rng, f64):
        q, k, v = (rand(rng, 1, 4, 1, 6, 8) for _ in range(3))
        out = temporal_values(T(q), T(k), T(v)).data
        np.testing.assert_allclose(out[0, :, 0], bf_temporal(q[0, :, 0], k[0, :, 0], v[0, :, 0]), atol=1e-10)

    def test_text_mask_single_valid(self, rng, f64):
        q = rand(rng, 1, 2, 1, 3, 8)
        k, v = rand(rng, 1, 1, 5, 8), rand(rng, 1, 1, 5, 8)
        valid = np.array([[False, False, True, False, False]])
        out = text_values(T(q), T(k), T(v), valid).data
        np.testing.assert_array_equal(out, np.broadcast_to(v[0, 0, 2], out.shape))

    def test_text_duplicate_value_linearity(self, rng, f64):
        # Two identical tokens get identical weights, so only the sum of their values matters.
        q = rand(rng, 1, 2, 1, 3, 8)
        k, v = rand(rng, 1, 1, 3, 8), rand(rng, 1, 1, 3, 8)
        k[:, :, 2] = k[:, :, 1]
        v[:, :, 2] = v[:, :, 1]
        valid = np.ones((1, 3), bool)
        base = text_values(T(q), T(k), T(v), valid).data
        shifted = v.copy()
        shifted[:, :, 1] *= 0.5
        shifted[:, :, 2] *= 1.5
        out = text_values(T(q), T(k), T(shifted), valid).data
        np.testing.assert_allclose(out, base, atol=1e-12)

    def test_text_oracle(self, rng, f64):
        q = rand(rng, 1, 3, 1, 4, 8)
        k, v = rand(rng, 1, 1, 6, 8), rand(rng, 1, 1, 6, 8)
        valid = np.array([[True, True, False, True, False, False]])
        out = text_values(T(q), T(k), T(v), valid).data
        np.testing.assert_allclose(out[0, :, 0], bf_text(q[0, :, 0], k[0, 0], v[0, 0], valid[0]), atol=1e-10)
