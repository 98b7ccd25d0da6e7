"""Cyclic group, regular fields and rotated boxes."""

import math

import numpy as np
import pytest

from regconv.group import (CyclicGroup, RegularField, RRoI, act_on_field, act_on_rroi,
                           normalize_angle)
from regconv.tensor import rotate_planar
from regconv.verify import smooth_image


def disk(side, margin):
    yy, xx = np.mgrid[0:side, 0:side] - (side - 1) / 2
    return np.hypot(xx, yy) < side / 2 - margin


def smooth_field(rng, k, n, side):
    # bilinear resampling is lossy, so the tolerances below assume band-limited content
    return np.stack([smooth_image(rng, side, n) for _ in range(k)])


class TestCyclicGroup:
    def test_compose_to_identity(self):
        g = CyclicGroup(6)
        assert g.compose(1, 5) == 0

    def test_inverse_of_identity(self):
        assert CyclicGroup(4).inverse(0) == 0

    def test_angle_of(self):
        assert CyclicGroup(8).angle_of(3) == pytest.approx(3 * math.pi / 4)

    @pytest.mark.parametrize("bad", [0, -2, 3.5, "4"])
    def test_rejects_bad_order(self, bad):
        with pytest.raises((TypeError, ValueError), match="group order must be a positive integer"):
            CyclicGroup(bad)

    def test_element_range_checked(self):
        with pytest.raises(ValueError):
            CyclicGroup(4).compose(4, 0)


class TestRegularField:
    def test_order_must_match(self):
        with pytest.raises(ValueError):
            RegularField(np.zeros((1, 3, 2, 2)), CyclicGroup(4))

    def test_needs_four_axes(self):
        with pytest.raises(ValueError):
            RegularField(np.zeros((4, 2, 2)), CyclicGroup(4))


class TestActOnField:
    def test_identity(self):
        f = RegularField(np.random.default_rng(0).standard_normal((2, 4, 5, 5)), CyclicGroup(4))
        np.testing.assert_array_equal(act_on_field(f, 0).values, f.values)

    def test_constant_channels_shift(self):
        vals = np.array([10.0, 20.0, 30.0, 40.0])[None, :, None, None] * np.ones((1, 4, 3, 3))
        out = act_on_field(RegularField(vals, CyclicGroup(4)), 1)
        np.testing.assert_array_equal(out.values[0, :, 1, 1], [40.0, 10.0, 20.0, 30.0])

    def test_full_cycle_n4_exact(self):
        g = CyclicGroup(4)
        f = RegularField(np.random.default_rng(1).standard_normal((2, 4, 6, 6)), g)
        out = f
        for _ in range(4):
            out = act_on_field(out, 1)
        np.testing.assert_array_equal(out.values, f.values)

    def test_full_cycle_n8_interior(self):
        g = CyclicGroup(8)
        f = RegularField(smooth_field(np.random.default_rng(2), 1, 8, 96), g)
        out = f
        for _ in range(8):
            out = act_on_field(out, 1)
        m = disk(96, 4)
        err = np.linalg.norm((out.values - f.values)[..., m]) / np.linalg.norm(f.values[..., m])
        assert err <= 2e-2

    @pytest.mark.parametrize("n", [8, 16])
    def test_inverse_round_trip(self, n):
        g = CyclicGroup(n)
        f = RegularField(smooth_field(np.random.default_rng(n), 1, n, 64), g)
        back = act_on_field(act_on_field(f, 1), n - 1)
        m = disk(64, 4)
        err = np.linalg.norm((back.values - f.values)[..., m]) / np.linalg.norm(f.values[..., m])
        assert err <= 2e-2

    def test_inverse_round_trip_exact_n4(self):
        g = CyclicGroup(4)
        f = RegularField(np.random.default_rng(3).standard_normal((1, 4, 5, 5)), g)
        np.testing.assert_array_equal(act_on_field(act_on_field(f, 3), 1).values, f.values)

    def test_norm_preserved(self):
        g8 = CyclicGroup(8)
        f = RegularField(smooth_field(np.random.default_rng(4), 2, 8, 64), g8)
        out = act_on_field(f, 1)
        m = disk(64, 2)
        assert np.linalg.norm(out.values[..., m]) == pytest.approx(np.linalg.norm(f.values[..., m]), rel=1e-2)
        g4 = CyclicGroup(4)
        h = RegularField(np.random.default_rng(5).standard_normal((1, 4, 6, 6)), g4)
        assert np.linalg.norm(act_on_field(h, 1).values) == np.linalg.norm(h.values)

    def test_square_required(self):
        f = RegularField(np.zeros((1, 4, 4, 6)), CyclicGroup(4))
        with pytest.raises(ValueError):
            act_on_field(f, 1)


class TestRRoI:
    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate RRoI"):
            RRoI(0, 0, 0, 1, 0)

    def test_theta_normalized(self):
        assert RRoI(0, 0, 1, 1, -math.pi / 2).theta == pytest.approx(3 * math.pi / 2)
        assert 0 <= normalize_angle(2 * math.pi) < 2 * math.pi

    def test_act_identity(self):
        b = RRoI(3, 4, 5, 2, 0.3)
        assert act_on_rroi(b, 0.0) == b

    def test_act_quarter_turn(self):
        # y points down, so a visual counter-clockwise quarter turn sends +x to -y
        b = act_on_rroi(RRoI(10, 0, 4, 2, 0), math.pi / 2, (0, 0))
        assert (b.x, b.y, b.w, b.h) == pytest.approx((0, -10, 4, 2), abs=1e-12)
        assert b.theta == pytest.approx(math.pi / 2)

    def test_agrees_with_image_rotation(self):
        img = np.zeros((1, 9, 9))
        img[0, 4, 7] = 1.0  # x=7, y=4
        rot = rotate_planar(img, math.pi / 2)
        y, x = np.argwhere(rot[0] == 1.0)[0]
        b = act_on_rroi(RRoI(7, 4, 1, 1, 0), math.pi / 2, (4, 4))
        assert (b.x, b.y) == pytest.approx((x, y))

    def test_two_half_turns(self):
        b = RRoI(3.5, -2.0, 4, 2, 5.9)
        c = act_on_rroi(act_on_rroi(b, math.pi, (1, 1)), math.pi, (1, 1))
        assert (c.x, c.y, c.w, c.h) == pytest.approx((b.x, b.y, b.w, b.h), abs=1e-12)
        assert c.theta == pytest.approx(b.theta, abs=1e-12)

    def test_group_action(self):
        b = RRoI(3.5, -2.0, 4, 2, 0.4)
        a1, a2, c = 0.7, 1.9, (2.0, 5.0)
        lhs = act_on_rroi(act_on_rroi(b, a1, c), a2, c)
        rhs = act_on_rroi(b, a1 + a2, c)
        np.testing.assert_allclose(lhs.as_tuple(), rhs.as_tuple(), atol=1e-12)
