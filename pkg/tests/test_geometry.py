import math

import numpy as np
import pytest

from contrareg.geometry import RigidTransform2D, c4_compose, c4_inverse, validate_c4


def rotation_matrix_oracle(angle):
    """Independent 2x2 rotation matrix for the (x right, y down) convention."""
    return np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])


class TestApply:
    def test_identity_fixed_point(self):
        t = RigidTransform2D.identity()
        np.testing.assert_allclose(t.apply((5.0, 7.0)), [5.0, 7.0])

    def test_quarter_turn_unit_vector(self):
        t = RigidTransform2D(angle=math.pi / 2)
        np.testing.assert_allclose(t.apply((1.0, 0.0)), [0.0, 1.0], atol=1e-15)

    def test_offcenter_rotation_matches_matrix_oracle(self):
        t = RigidTransform2D(angle=math.pi / 6, center=(417.0, 417.0))
        p = np.array([0.0, 0.0])
        c = np.array([417.0, 417.0])
        expected = rotation_matrix_oracle(math.pi / 6) @ (p - c) + c
        np.testing.assert_allclose(t.apply(p), expected, atol=1e-9)

    def test_batched_points(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-100, 100, size=(50, 2))
        t = RigidTransform2D(angle=0.3, translation=(2.0, -5.0), center=(10.0, 20.0))
        batched = t.apply(pts)
        for i in range(len(pts)):
            np.testing.assert_allclose(batched[i], t.apply(pts[i]), atol=1e-12)

    def test_isometry_on_random_point_sets(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            t = RigidTransform2D(
                angle=rng.uniform(-math.pi, math.pi),
                translation=tuple(rng.uniform(-50, 50, 2)),
                center=tuple(rng.uniform(-50, 50, 2)),
            )
            pts = rng.uniform(-1e4, 1e4, size=(30, 2))
            mapped = t.apply(pts)
            d_before = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
            d_after = np.linalg.norm(mapped[:, None] - mapped[None, :], axis=-1)
            np.testing.assert_allclose(d_after, d_before, atol=1e-9 * max(1.0, d_before.max()))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            RigidTransform2D(angle=float("nan"))
        with pytest.raises(ValueError):
            RigidTransform2D.identity().apply((float("inf"), 0.0))


class TestComposeInvert:
    def test_compose_identity_law(self):
        t = RigidTransform2D(angle=0.4, translation=(3.0, -2.0), center=(5.0, 5.0))
        composed = RigidTransform2D.identity().compose(t)
        pts = np.random.default_rng(0).uniform(-20, 20, size=(10, 2))
        np.testing.assert_allclose(composed.apply(pts), t.apply(pts), atol=1e-9)

    def test_compose_with_inverse_is_identity(self):
        t = RigidTransform2D(angle=1.1, translation=(13.0, -7.5), center=(100.0, 40.0))
        round_trip = t.compose(t.inverse())
        pts = np.random.default_rng(1).uniform(-1e4, 1e4, size=(200, 2))
        np.testing.assert_allclose(round_trip.apply(pts), pts, atol=1e-9)
        assert round_trip.is_identity(tol=1e-9)

    def test_compose_matches_sequential_application(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            t1 = RigidTransform2D(
                angle=rng.uniform(-math.pi, math.pi),
                translation=tuple(rng.uniform(-30, 30, 2)),
                center=tuple(rng.uniform(-30, 30, 2)),
            )
            t2 = RigidTransform2D(
                angle=rng.uniform(-math.pi, math.pi),
                translation=tuple(rng.uniform(-30, 30, 2)),
                center=tuple(rng.uniform(-30, 30, 2)),
            )
            pts = rng.uniform(-100, 100, size=(100, 2))
            np.testing.assert_allclose(
                t1.compose(t2).apply(pts), t1.apply(t2.apply(pts)), atol=1e-9
            )

    def test_invert_identity(self):
        assert RigidTransform2D.identity().inverse().is_identity()

    def test_invert_pure_translation(self):
        inv = RigidTransform2D(translation=(3.0, 4.0)).inverse()
        assert inv.angle == 0.0
        np.testing.assert_allclose(inv.translation, (-3.0, -4.0))

    def test_invert_random_via_composition(self):
        rng = np.random.default_rng(4)
        t = RigidTransform2D(
            angle=rng.uniform(-math.pi, math.pi),
            translation=tuple(rng.uniform(-30, 30, 2)),
            center=tuple(rng.uniform(-30, 30, 2)),
        )
        assert t.compose(t.inverse()).is_identity(tol=1e-9)
        assert t.inverse().compose(t).is_identity(tol=1e-9)

    def test_with_center_preserves_mapping(self):
        t = RigidTransform2D(angle=0.7, translation=(5.0, 6.0), center=(1.0, 2.0))
        moved = t.with_center((40.0, -3.0))
        pts = np.random.default_rng(5).uniform(-50, 50, size=(20, 2))
        np.testing.assert_allclose(moved.apply(pts), t.apply(pts), atol=1e-10)
        assert moved.center == (40.0, -3.0)

    def test_as_matrix_agrees_with_apply(self):
        t = RigidTransform2D(angle=-0.9, translation=(1.5, 2.5), center=(3.0, 4.0))
        m = t.as_matrix()
        p = np.array([7.0, -2.0, 1.0])
        np.testing.assert_allclose((m @ p)[:2], t.apply((7.0, -2.0)), atol=1e-12)


class TestC4Group:
    def test_group_law_exhaustive(self):
        for k1 in range(4):
            for k2 in range(4):
                assert c4_compose(k1, k2) == (k1 + k2) % 4

    def test_identity_and_inverse(self):
        for k in range(4):
            assert c4_compose(k, c4_inverse(k)) == 0
            assert c4_compose(0, k) == k

    def test_validate_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            validate_c4(4)
        with pytest.raises(ValueError):
            validate_c4(-1)
