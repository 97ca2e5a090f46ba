import numpy as np
import pytest

from protohead.errors import EmptyOverlap, InvariantViolation
from protohead.geometry import (
    ViewGeometry,
    bilinear_sample,
    bilinear_weights,
    identity_geometry,
    overlap_region,
    roi_align,
)


class TestOverlapRegion:
    def test_identical(self):
        g = ViewGeometry((0.1, 0.2, 0.8, 0.9), 4, 4)
        assert overlap_region(g, g) == g.rect

    def test_partial(self):
        ga = ViewGeometry((0.0, 0.0, 0.6, 0.6), 4, 4)
        gb = ViewGeometry((0.4, 0.4, 1.0, 1.0), 4, 4)
        assert overlap_region(ga, gb) == pytest.approx((0.4, 0.4, 0.6, 0.6))

    def test_disjoint(self):
        ga = ViewGeometry((0.0, 0.0, 0.3, 0.3), 4, 4)
        gb = ViewGeometry((0.5, 0.5, 1.0, 1.0), 4, 4)
        with pytest.raises(EmptyOverlap):
            overlap_region(ga, gb)

    def test_bad_rect_rejected(self):
        with pytest.raises(InvariantViolation):
            ViewGeometry((0.5, 0.0, 0.2, 1.0), 4, 4)


class TestRoiAlign:
    def test_constant_field(self):
        g = identity_geometry(5, 5)
        field = np.full((25, 3), 7.25)
        out = roi_align(field, g, (0.1, 0.3, 0.9, 0.8), 4)
        assert np.allclose(out, 7.25, atol=1e-12)

    def test_identity_crop_full_roi_is_identity(self):
        g = identity_geometry(6, 6)
        rng = np.random.default_rng(0)
        field = rng.normal(size=(36, 4))
        out = roi_align(field, g, (0.0, 0.0, 1.0, 1.0), 6)
        assert np.array_equal(out, field)

    def test_center_of_2x2_is_bilinear_average(self):
        g = identity_geometry(2, 2)
        field = np.array([[1.0], [2.0], [3.0], [4.0]])
        out = roi_align(field, g, (0.0, 0.0, 1.0, 1.0), 1)
        assert out[0, 0] == pytest.approx(2.5)

    def test_linearity(self):
        g = ViewGeometry((0.2, 0.1, 0.9, 0.8), 5, 5)
        roi = (0.3, 0.3, 0.7, 0.7)
        rng = np.random.default_rng(1)
        u = rng.normal(size=(25, 3))
        v = rng.normal(size=(25, 3))
        a, b = 2.5, -0.7
        lhs = roi_align(a * u + b * v, g, roi, 3)
        rhs = a * roi_align(u, g, roi, 3) + b * roi_align(v, g, roi, 3)
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(2)
        g = ViewGeometry((0.05, 0.0, 0.95, 1.0), 7, 7)
        field = rng.normal(size=(49, 2))
        out = roi_align(field, g, (0.1, 0.1, 0.9, 0.9), 5)
        assert out.min() >= field.min() - 1e-12
        assert out.max() <= field.max() + 1e-12

    def test_weights_rows_sum_to_one(self):
        g = ViewGeometry((0.1, 0.1, 0.8, 0.95), 6, 4)
        w = bilinear_weights(g, (0.2, 0.2, 0.7, 0.7), 3, 3)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_sparse_sampler_matches_dense(self):
        rng = np.random.default_rng(3)
        g = ViewGeometry((0.0, 0.05, 0.9, 1.0), 8, 8)
        roi = (0.1, 0.2, 0.85, 0.9)
        field = rng.normal(size=(64, 5))
        dense = bilinear_weights(g, roi, 4, 6) @ field
        sparse = bilinear_sample(field, g, roi, 4, 6)
        assert np.allclose(dense, sparse, atol=1e-12)

    def test_identical_crops_align_exactly(self):
        rng = np.random.default_rng(5)
        gh = gw = 8
        base = identity_geometry(gh, gw)
        field = rng.normal(size=(64, 3))
        rect = (0.1, 0.2, 0.8, 0.9)
        view_a = bilinear_sample(field, base, rect, gh, gw)
        view_b = bilinear_sample(field, base, rect, gh, gw)
        g = ViewGeometry(rect, gh, gw)
        roi = overlap_region(g, g)
        assert np.max(np.abs(roi_align(view_a, g, roi, 5) - roi_align(view_b, g, roi, 5))) <= 1e-6

    def test_two_views_of_static_scene_align(self):
        # resample a smooth scene into two crops; mapping both back onto the
        # shared overlap must agree
        rng = np.random.default_rng(4)
        gh = gw = 12
        base = identity_geometry(gh, gw)
        yy, xx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
        smooth = np.stack(
            [np.sin(xx / 3.0) + yy / 7.0, np.cos(yy / 4.0) * xx / 5.0], axis=-1
        ).reshape(gh * gw, 2)
        rect_a = (0.0, 0.0, 0.75, 0.75)
        rect_b = (0.25, 0.25, 1.0, 1.0)
        view_a = bilinear_sample(smooth, base, rect_a, gh, gw)
        view_b = bilinear_sample(smooth, base, rect_b, gh, gw)
        ga = ViewGeometry(rect_a, gh, gw)
        gb = ViewGeometry(rect_b, gh, gw)
        roi = overlap_region(ga, gb)
        al_a = roi_align(view_a, ga, roi, 7)
        al_b = roi_align(view_b, gb, roi, 7)
        # smooth fields resampled twice stay close; exactness is not expected
        assert np.max(np.abs(al_a - al_b)) < 0.06
