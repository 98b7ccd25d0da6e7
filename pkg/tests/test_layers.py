"""Lifting and group convolutions, group batch norm and the toy backbone."""

import math

import numpy as np
import pytest

from regconv import functional as F
from regconv.autodiff import Var
from regconv.group import CyclicGroup, RegularField, act_on_field
from regconv.layers import (BackboneConfig, GConv, GroupBatchNorm, LiftConv, ReBackbone,
                            backbone_forward, count_params, expand_gconv_filters,
                            expand_lift_filters, filter_rotation_matrices, gbn_forward,
                            gconv_forward, gmaxpool_forward, grelu_forward, lift_forward,
                            load_checkpoint, save_checkpoint)
from regconv.tensor import rotate_planar
from regconv.verify import interior_mask, relative_error, smooth_image

G4, G8 = CyclicGroup(4), CyclicGroup(8)


def masked_error(got, want):
    return relative_error(got, want, interior_mask(*got.shape[-2:]))


def random_field(rng, k, group, side):
    return RegularField(rng.standard_normal((k, group.order, side, side)), group)


class TestFilterExpansion:
    def test_trivial_group_keeps_base(self):
        layer = LiftConv(2, 3, CyclicGroup(1), 3, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(expand_lift_filters(layer)[:, 0], layer.weight.value)

    def test_quarter_turn_moves_top_to_left(self):
        layer = LiftConv(1, 1, G4, 3)
        base = np.zeros((1, 1, 3, 3))
        base[0, 0, 0, 1] = 1.0
        layer.weight.value = base
        slice1 = expand_lift_filters(layer)[0, 1, 0]
        want = np.zeros((3, 3))
        want[1, 0] = 1.0
        np.testing.assert_array_equal(slice1, want)

    def test_symmetric_base_gives_equal_slices_n4(self):
        yy, xx = np.mgrid[0:5, 0:5] - 2
        layer = LiftConv(1, 1, G4, 5)
        layer.weight.value = np.exp(-(xx ** 2 + yy ** 2) / 3.0)[None, None]
        e = expand_lift_filters(layer)[0, :, 0]
        for r in range(4):
            np.testing.assert_array_equal(e[r], e[0])

    def test_symmetric_base_keeps_mass_n8(self):
        yy, xx = np.mgrid[0:5, 0:5] - 2
        layer = LiftConv(1, 1, G8, 5)
        layer.weight.value = np.exp(-(xx ** 2 + yy ** 2) / 3.0)[None, None]
        sums = expand_lift_filters(layer)[0, :, 0].sum(axis=(-2, -1))
        np.testing.assert_allclose(sums, sums[0], rtol=1e-12)

    @pytest.mark.parametrize("n", [4, 8, 16])
    def test_rotation_matrices_preserve_sum_and_centroid(self, n):
        mats = filter_rotation_matrices(3, n)
        np.testing.assert_allclose(mats.sum(axis=1)[:, 4], 1.0)  # centre tap stays put
        assert np.allclose(mats[0] @ np.ones(9), mats[0].sum(axis=1))
        for r in range(n):
            np.testing.assert_allclose(mats[r].sum(axis=0)[mats[0].sum(axis=0) > 0], 1.0)

    def test_quarter_turns_are_permutations(self):
        mats = filter_rotation_matrices(5, 4)
        for m in mats:
            assert set(np.unique(m)) <= {0.0, 1.0}
            np.testing.assert_array_equal(m.sum(axis=0), 1.0)

    def test_expansion_is_pure(self):
        layer = GConv(2, 3, G8, 3, rng=np.random.default_rng(1))
        np.testing.assert_array_equal(expand_gconv_filters(layer), expand_gconv_filters(layer))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            GConv(1, 1, G4, 2)


class TestLift:
    def test_constant_image_equal_channels(self):
        for group in (G4, G8):
            layer = LiftConv(1, 2, group, 3, rng=np.random.default_rng(2))
            out = lift_forward(np.ones((1, 9, 9)), layer).values[..., 1:-1, 1:-1]
            np.testing.assert_allclose(out, np.broadcast_to(out[:, :1], out.shape), atol=1e-12)

    def test_equivariance_n4(self):
        rng = np.random.default_rng(3)
        layer = LiftConv(2, 3, G4, 3, rng=rng)
        img = rng.standard_normal((2, 16, 16))
        for k in range(4):
            got = lift_forward(rotate_planar(img, G4.angle_of(k)), layer)
            want = act_on_field(lift_forward(img, layer), k)
            assert masked_error(got.values, want.values) <= 1e-5

    def test_equivariance_n8(self):
        rng = np.random.default_rng(4)
        layer = LiftConv(1, 3, G8, 3, rng=rng)
        img = smooth_image(rng, 64)
        got = lift_forward(rotate_planar(img, G8.angle_of(1)), layer)
        want = act_on_field(lift_forward(img, layer), 1)
        assert masked_error(got.values, want.values) <= 5e-2


class TestGConv:
    def test_cyclic_correlation_oracle(self):
        rng = np.random.default_rng(5)
        layer = GConv(1, 1, G4, 1)
        w = rng.standard_normal(4)
        layer.weight.value = w.reshape(1, 1, 4, 1, 1)
        c = rng.standard_normal(4)
        f = RegularField(np.broadcast_to(c[None, :, None, None], (1, 4, 3, 3)).copy(), G4)
        out = gconv_forward(f, layer).values[0, :, 1, 1]
        want = [sum(w[(j - r) % 4] * c[j] for j in range(4)) for r in range(4)]
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_identity_base(self):
        layer = GConv(1, 1, G4, 1)
        w = np.zeros((1, 1, 4, 1, 1))
        w[0, 0, 0] = 1.0
        layer.weight.value = w
        f = random_field(np.random.default_rng(6), 1, G4, 5)
        np.testing.assert_array_equal(gconv_forward(f, layer).values, f.values)

    def test_equivariance_n4(self):
        rng = np.random.default_rng(7)
        layer = GConv(2, 3, G4, 3, bias=True, rng=rng)
        layer.bias.value = rng.standard_normal(3)
        f = random_field(rng, 2, G4, 16)
        for k in range(4):
            got = gconv_forward(act_on_field(f, k), layer)
            want = act_on_field(gconv_forward(f, layer), k)
            assert masked_error(got.values, want.values) <= 1e-5

    def test_param_count(self):
        layer = GConv(3, 5, G8, 3)
        assert count_params(layer) == 5 * 3 * 8 * 9

    def test_closed_form_ratio(self):
        assert count_params(GConv(8, 8, G8, 3)) == 4608
        assert count_params(GConv(64, 64, CyclicGroup(1), 3)) == 36864

    def test_group_mismatch(self):
        with pytest.raises(ValueError):
            gconv_forward(random_field(np.random.default_rng(0), 1, G8, 4), GConv(1, 1, G4, 1))


class TestPointwise:
    def test_relu_negative_field(self):
        f = RegularField(-np.abs(np.random.default_rng(8).standard_normal((2, 4, 3, 3))) - 0.1, G4)
        np.testing.assert_array_equal(grelu_forward(f).values, 0.0)

    def test_gbn_keeps_permuted_channels(self):
        base = np.array([[1.0, 2.0], [3.0, 6.0]])
        perms = [base, base.T, base[::-1], base[:, ::-1]]
        f = RegularField(np.stack(perms)[None], G4)
        bn = GroupBatchNorm(1)
        out = gbn_forward(f, bn, training=True).values[0]
        mean = base.mean()
        std = math.sqrt(((base - mean) ** 2).mean() + bn.eps)
        np.testing.assert_allclose(out[0], (base - mean) / std, atol=1e-12)
        np.testing.assert_allclose(out[1], out[0].T, atol=1e-12)
        np.testing.assert_allclose(out[2], out[0][::-1], atol=1e-12)
        np.testing.assert_allclose(out[3], out[0][:, ::-1], atol=1e-12)

    def test_gbn_eval_is_affine(self):
        bn = GroupBatchNorm(2)
        bn.running_mean = np.array([1.0, -1.0])
        bn.running_var = np.array([4.0, 0.25])
        f = RegularField(np.ones((2, 4, 2, 2)), G4)
        out = gbn_forward(f, bn).values
        np.testing.assert_allclose(out[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(out[1], 2.0 / math.sqrt(0.25 + bn.eps))

    def test_gbn_small_batch_uses_per_sample_stats(self):
        rng = np.random.default_rng(9)
        bn = GroupBatchNorm(1).train()
        x = rng.standard_normal((2, 1, 4, 3, 3)) * np.array([1.0, 10.0])[:, None, None, None, None]
        out = bn(Var(x)).value
        np.testing.assert_allclose(out.reshape(2, -1).std(axis=1), 1.0, atol=1e-3)

    def test_gmaxpool_commutes(self):
        f = random_field(np.random.default_rng(10), 2, G4, 8)
        lhs = gmaxpool_forward(act_on_field(f, 1)).values
        rhs = act_on_field(gmaxpool_forward(f), 1).values
        np.testing.assert_array_equal(lhs, rhs)


class TestBackbone:
    def test_stem_only_is_lift(self):
        cfg = BackboneConfig(group_order=4, stage_widths=())
        bb = ReBackbone(cfg, seed=0)
        img = np.random.default_rng(11).standard_normal((1, 12, 12))
        (out,) = backbone_forward(img, bb)
        np.testing.assert_array_equal(out.values, lift_forward(img, bb.stem).values)

    def test_every_level_equivariant_n4(self):
        cfg = BackboneConfig(group_order=4, stage_widths=(8, 8))
        bb = ReBackbone(cfg, seed=1).eval()
        img = np.random.default_rng(12).standard_normal((1, 32, 32))
        ref = backbone_forward(img, bb)
        for k in range(1, 4):
            got = backbone_forward(rotate_planar(img, G4.angle_of(k)), bb)
            assert len(got) == 2
            for g, r in zip(got, ref):
                assert masked_error(g.values, act_on_field(r, k).values) <= 1e-4

    def test_layer_prefixes_equivariant(self):
        """Every intermediate stage of the forward pass, for N=4 and N=8."""
        for group, tol, img_fn in ((G4, 1e-4, lambda r: r.standard_normal((1, 32, 32))),
                                   (G8, 7e-2, lambda r: smooth_image(r, 64))):
            rng = np.random.default_rng(group.order)
            cfg = BackboneConfig(group_order=group.order, stage_widths=(4, 4), stem_width=4, fpn_width=4)
            bb = ReBackbone(cfg, seed=2).eval()
            img = img_fn(rng)

            def prefixes(x):
                h = bb.stem(Var(x[None]))
                yield h
                h = F.relu(bb.stem_bn(h))
                yield h
                h = bb.blocks[0](h)
                yield h
                h = F.maxpool2d(h)
                yield h
                yield bb.blocks[1](h)

            angle = group.angle_of(1)
            for a, b in zip(prefixes(rotate_planar(img, angle)), prefixes(img)):
                want = act_on_field(RegularField(b.value[0], group), 1).values
                assert masked_error(a.value[0], want) <= tol

    def test_zero_input_zero_output(self):
        bb = ReBackbone(BackboneConfig(group_order=4), seed=3).eval()
        for level in backbone_forward(np.zeros((1, 16, 16)), bb):
            np.testing.assert_array_equal(level.values, 0.0)

    def test_plain_counterpart_ratio(self):
        cfg = BackboneConfig(group_order=8)
        assert count_params(ReBackbone(cfg)) * 8 == count_params(ReBackbone(cfg.plain_counterpart()))

    def test_non_square_rejected(self):
        bb = ReBackbone(BackboneConfig(group_order=4))
        with pytest.raises(ValueError, match="square"):
            bb(np.zeros((1, 1, 8, 10)))

    def test_bad_upsample_mode(self):
        with pytest.raises(ValueError):
            BackboneConfig(upsample="cubic")


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = BackboneConfig(group_order=4, stage_widths=(4,), stem_width=4, fpn_width=4)
        a = ReBackbone(cfg, seed=0)
        a.stem_bn.running_mean = np.arange(4.0)
        save_checkpoint(tmp_path / "ck", a, meta={"step": 3}, extra={"m": np.ones(2)})
        b = ReBackbone(cfg, seed=99)
        meta, extra = load_checkpoint(tmp_path / "ck", b)
        assert meta == {"step": 3}
        np.testing.assert_array_equal(extra["m"], np.ones(2))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.value, pb.value)
        np.testing.assert_array_equal(b.stem_bn.running_mean, np.arange(4.0))

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "ck", ReBackbone(BackboneConfig(group_order=4)))
        with pytest.raises(ValueError, match="shape mismatch"):
            load_checkpoint(tmp_path / "ck", ReBackbone(BackboneConfig(group_order=8)))
