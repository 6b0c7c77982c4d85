import numpy as np
import pytest

from datar.autodiff import Tensor, grad_check
from datar.deform import (
    AudioOffsetGenerator,
    DeformableAttention,
    DeformAttnConfig,
    bilinear_sample,
    deform_attention,
    fixed_grid_attention,
    make_grid,
    offset_bound,
    query_positions,
    relative_bias,
)
from datar.errors import BadFactor, NonFiniteCoord, ShapeMismatch
from datar.nn import MultiHeadSelfAttention

from oracles import denorm, gelu_np, mhsa_numpy, resize_interp, sample_double_sum, conv2d_loops


class TestGrid:
    def test_two_by_two(self):
        g = make_grid(2, 2, 1)
        assert g.points.reshape(-1, 2).tolist() == [[-1, -1], [-1, 1], [1, -1], [1, 1]]

    def test_downsampled_corners(self):
        g = make_grid(4, 4, 2)
        assert (g.h_G, g.T_G) == (2, 2)
        assert np.array_equal(np.abs(g.points), np.ones((2, 2, 2)))

    def test_spacing(self):
        g = make_grid(8, 8, 2)
        assert g.points.shape == (4, 4, 2)
        assert np.allclose(np.diff(g.points[:, 0, 0]), 2 / 3)
        assert np.allclose(np.diff(g.points[0, :, 1]), 2 / 3)

    def test_bad_factor(self):
        with pytest.raises(BadFactor):
            make_grid(6, 8, 4)


class TestBilinear:
    def test_integer_pixel_exact(self, rng):
        z = rng.standard_normal((3, 5, 7))
        pts = np.array([[2.0, 3.0], [0.0, 0.0], [4.0, 6.0]])
        out = bilinear_sample(Tensor(z), pts, normalized=False).data
        assert np.array_equal(out, np.stack([z[:, 2, 3], z[:, 0, 0], z[:, 4, 6]]))

    def test_integer_pixel_exact_normalized(self, rng):
        # extent 5 maps -1, -0.5, 0, 0.5, 1 to pixels 0..4 without rounding
        z = rng.standard_normal((2, 5, 5))
        pts = np.array([[-0.5, 0.5], [1.0, -1.0], [0.0, 0.0]])
        out = bilinear_sample(Tensor(z), pts).data
        assert np.array_equal(out, np.stack([z[:, 1, 3], z[:, 4, 0], z[:, 2, 2]]))

    def test_midpoint_mean(self):
        z = np.array([[[1.0, 3.0]]])
        assert bilinear_sample(Tensor(z), [[0.0, 0.0]]).data[0, 0] == 2.0

    def test_random_against_double_sum(self, rng):
        z = rng.standard_normal((1, 5, 7))
        pts = rng.uniform(-1, 1, (100, 2))
        out = bilinear_sample(Tensor(z), pts).data
        ref = np.stack([sample_double_sum(z, denorm(p[0], 5), denorm(p[1], 7)) for p in pts])
        assert np.max(np.abs(out - ref)) < 1e-12

    def test_out_of_range_clamped(self, rng):
        z = rng.standard_normal((1, 3, 3))
        out = bilinear_sample(Tensor(z), [[-5.0, 9.0]]).data
        assert out[0, 0] == z[0, 0, 2]

    def test_non_finite(self):
        with pytest.raises(NonFiniteCoord):
            bilinear_sample(Tensor(np.ones((1, 2, 2))), [[np.nan, 0.0]])

    def test_gradients(self, rng):
        z = Tensor(rng.standard_normal((2, 4, 5)))
        pts = Tensor(rng.uniform(-0.9, 0.9, (6, 2)))
        proj = Tensor(rng.standard_normal((6, 2)))
        assert grad_check(lambda t: (bilinear_sample(t, pts) * proj).sum(), z) < 1e-8
        assert grad_check(lambda t: (bilinear_sample(z, t) * proj).sum(), pts) < 1e-6


class TestRelativeBias:
    def test_zero_displacement_hits_center(self, rng):
        table = rng.standard_normal((7, 9))
        q = np.array([[0.3, -0.2]])
        out = relative_bias(Tensor(table), q, q).data
        assert out[0, 0] == table[3, 4]

    def test_constant_table(self, rng):
        q, k = rng.uniform(-1, 1, (5, 2)), rng.uniform(-1, 1, (4, 2))
        out = relative_bias(Tensor(np.full((7, 7), 0.25)), q, k).data
        assert np.allclose(out, 0.25, rtol=0, atol=1e-15)

    def test_against_double_sum(self, rng):
        table = rng.standard_normal((7, 15))
        q, k = query_positions(4, 8), rng.uniform(-1, 1, (6, 2))
        out = relative_bias(Tensor(table), q, k).data
        ref = np.zeros_like(out)
        for i, qp in enumerate(q):
            for j, kp in enumerate(k):
                d = (qp - kp) / 2
                ref[i, j] = sample_double_sum(table[None], denorm(d[0], 7), denorm(d[1], 15))[0]
        assert np.max(np.abs(out - ref)) < 1e-12


class TestOffsetGenerator:
    def test_zero_weights_zero_offsets(self, rng):
        cfg = DeformAttnConfig(8, 2, 1, r=2)
        aog = AudioOffsetGenerator(cfg, rng)
        for p in aog.parameters():
            p.data[...] = 0.0
        out = aog(Tensor(rng.standard_normal((8, 8, 8)))).data
        assert out.shape == (1, 4, 4, 2) and np.all(out == 0.0)

    def test_composed_oracle(self, rng):
        cfg = DeformAttnConfig(1, 1, 1, r=1, offset_scale=2.0)
        aog = AudioOffsetGenerator(cfg, rng)
        aog.dw_bias.data[...] = rng.standard_normal(1)
        x = rng.standard_normal((1, 8, 8))
        out = aog(Tensor(x)).data
        hid = gelu_np(conv2d_loops(x, aog.dw_weight.data, aog.dw_bias.data, 4, 2, 1))
        raw = conv2d_loops(hid, aog.pw_weight.data)
        up = resize_interp(raw, 8, 8)  # 2 x 8 x 8
        ref = np.tanh(up).transpose(1, 2, 0) * offset_bound(cfg, 8, 8)
        assert np.max(np.abs(out[0] - ref)) < 1e-10

    def test_channel_mismatch(self, rng):
        aog = AudioOffsetGenerator(DeformAttnConfig(8, 2), rng)
        with pytest.raises(ShapeMismatch):
            aog(Tensor(np.ones((4, 8, 8))))

    @pytest.mark.parametrize("seed", range(20))
    def test_bound(self, seed):
        rng = np.random.default_rng(seed)
        cfg = DeformAttnConfig(8, 4, 2, r=2, offset_scale=2.0)
        aog = AudioOffsetGenerator(cfg, rng)
        for p in aog.parameters():
            p.data = rng.standard_normal(p.shape) * 50
        off = aog(Tensor(rng.standard_normal((8, 8, 16)) * 50)).data
        s = offset_bound(cfg, 8, 16)
        assert np.all(np.abs(off[..., 0]) <= s[0]) and np.all(np.abs(off[..., 1]) <= s[1])


def _zero_aog(mod):
    for p in mod.offset_net.parameters():
        p.data[...] = 0.0


class TestDeformableAttention:
    @pytest.mark.parametrize("seed", range(5))
    def test_zero_offsets_equal_fixed_grid(self, seed):
        rng = np.random.default_rng(seed)
        mod = DeformableAttention(DeformAttnConfig(8, 4, 2, r=2), 8, 8, rng)
        _zero_aog(mod)
        mod.bias_table.data = rng.standard_normal(mod.bias_table.shape)
        a = rng.standard_normal((64, 8))
        out = mod(Tensor(a)).data
        assert np.max(np.abs(out - fixed_grid_attention(mod, a))) < 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_degenerates_to_mhsa(self, seed):
        rng = np.random.default_rng(seed)
        mod = DeformableAttention(DeformAttnConfig(8, 2, 1, r=1), 4, 6, rng)
        _zero_aog(mod)
        a = rng.standard_normal((24, 8))
        ref = mhsa_numpy(a, mod.w_q.data, mod.w_k.data, mod.w_v.data, mod.w_o.data, 2)
        assert np.max(np.abs(mod(Tensor(a)).data - ref)) < 1e-10
        mhsa = MultiHeadSelfAttention(8, 2, rng)
        for n in ("w_q", "w_k", "w_v", "w_o"):
            getattr(mhsa, n).data = getattr(mod, n).data.copy()
        assert np.max(np.abs(mhsa(Tensor(a)).data - ref)) < 1e-10

    def test_rows_sum_to_one(self, rng):
        mod = DeformableAttention(DeformAttnConfig(8, 4, 2, r=2), 8, 8, rng)
        mod(Tensor(rng.standard_normal((64, 8))), keep_probs=True)
        for p in mod.last_probs:
            assert np.max(np.abs(p.sum(axis=-1) - 1.0)) < 1e-12

    def test_map_form(self, rng):
        mod = DeformableAttention(DeformAttnConfig(8, 2, 1, r=2), 4, 8, rng)
        x = rng.standard_normal((8, 4, 8))
        out = deform_attention(Tensor(x), mod).data
        tok = mod(Tensor(x.reshape(8, -1).T)).data
        assert np.array_equal(out, tok.T.reshape(8, 4, 8))

    def test_shape_mismatch(self, rng):
        mod = DeformableAttention(DeformAttnConfig(8, 2), 4, 4, rng)
        with pytest.raises(ShapeMismatch):
            mod(Tensor(np.ones((15, 8))))

    def test_offsets_recorded_and_bounded(self, rng):
        cfg = DeformAttnConfig(8, 2, 1, r=2)
        mod = DeformableAttention(cfg, 8, 8, rng)
        mod(Tensor(rng.standard_normal((64, 8)) * 10))
        f = mod.last_offsets
        assert f.offsets.shape == (1, 4, 4, 2)
        assert np.all(np.abs(f.offsets) <= f.bound)
