import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from serialtrack.geometry import BBox, Circle, iou_polygon, box_to_polygon
from serialtrack.transform import (AffineTransform2D, Direction, DisplacementField, NonConvergent,
                                   PairKind, PairTransform, SingularTransform, apply_affine,
                                   apply_field, identity_pair, invert_affine, invert_field,
                                   map_box, map_circle, map_point)


def sinusoid(amp=2.0, period=100.0):
    def fn(p):
        return np.column_stack([amp * np.sin(2 * math.pi * p[:, 1] / period),
                                amp * np.cos(2 * math.pi * p[:, 0] / period)])
    return fn


def sin_field(amp=2.0, period=100.0, spacing=5.0, n=81):
    return DisplacementField.from_function((0.0, 0.0), spacing, n, n, sinusoid(amp, period))


# --- affine -----------------------------------------------------------------

def test_apply_affine_examples():
    assert np.allclose(apply_affine(AffineTransform2D.identity(), (3, 4)), (3, 4))
    assert np.allclose(apply_affine(AffineTransform2D.translation(5, -3), (0, 0)), (5, -3))
    rot = AffineTransform2D.similarity(angle_deg=90)
    assert np.allclose(apply_affine(rot, (1, 0)), (0, 1), atol=1e-15)


def test_invert_affine_examples(rng):
    assert invert_affine(AffineTransform2D.identity()) == AffineTransform2D.identity()
    inv = invert_affine(AffineTransform2D.translation(5, -3))
    assert np.allclose(inv.matrix, AffineTransform2D.translation(-5, 3).matrix)
    m = np.eye(3)
    m[:2, :2] = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    m[:2, 2] = rng.normal(0, 50, 2)
    t = AffineTransform2D(m)
    pts = rng.uniform(-100, 100, size=(100, 2))
    assert np.max(np.abs(t.inverse().apply(t.apply(pts)) - pts)) < 1e-9
    assert np.allclose((t.inverse() @ t).matrix, np.eye(3), atol=1e-10)


def test_singular_affine_rejected():
    m = np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]])
    with pytest.raises(SingularTransform):
        invert_affine(AffineTransform2D(m))


similarities = st.builds(AffineTransform2D.similarity, st.floats(0.5, 2.0), st.floats(-180, 180),
                         st.floats(-500, 500), st.floats(-500, 500))


@settings(max_examples=100, deadline=None)
@given(similarities, similarities, similarities, st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_affine_composition_associative(ta, tb, tc, x, y):
    p = np.array([x, y])
    assert np.allclose((ta @ tb).apply(p), ta.apply(tb.apply(p)), atol=1e-9, rtol=1e-12)
    assert np.allclose(((ta @ tb) @ tc).apply(p), (ta @ (tb @ tc)).apply(p), atol=1e-9, rtol=1e-12)


# --- fields -----------------------------------------------------------------

def test_apply_field_examples():
    z = DisplacementField.zeros((0, 0), 10, 5, 5)
    assert np.allclose(apply_field(z, (12.5, 3)), (12.5, 3))
    c = DisplacementField((0, 0), 1, np.full((4, 4), 5.0), np.full((4, 4), -3.0))
    assert np.allclose(apply_field(c, (1, 1)), (6, -2))
    dx = np.array([[0.0, 10.0], [0.0, 10.0]])
    cell = DisplacementField((0, 0), 2, dx, np.zeros((2, 2)))
    assert apply_field(cell, (1, 1))[0] - 1 == pytest.approx(5.0)


def test_field_clamps_outside_domain():
    dx = np.array([[1.0, 2.0], [3.0, 4.0]])
    f = DisplacementField((0, 0), 1, dx, np.zeros((2, 2)))
    assert f.displacement(np.array([[-10.0, -10.0]]))[0, 0] == 1.0
    assert f.displacement(np.array([[50.0, 50.0]]))[0, 0] == 4.0


def test_invert_field_examples():
    z = DisplacementField.zeros((0, 0), 10, 6, 6)
    assert invert_field(z).is_zero()
    c = DisplacementField((0, 0), 10, np.full((30, 30), 3.0), np.full((30, 30), -1.5))
    g = invert_field(c, tol=0.01)
    assert np.allclose(g.dx, -3.0, atol=0.01) and np.allclose(g.dy, 1.5, atol=0.01)
    f = sin_field()
    g = invert_field(f, tol=0.01, max_iter=20)
    rng = np.random.default_rng(0)
    pts = rng.uniform(20, 380, size=(500, 2))
    assert np.max(np.linalg.norm(g.apply(f.apply(pts)) - pts, axis=1)) < 0.01 + 0.02
    nodes = f.nodes()
    inside = (nodes.min(axis=1) > 10) & (nodes.max(axis=1) < 390)
    assert np.max(np.linalg.norm(g.apply(f.apply(nodes[inside])) - nodes[inside], axis=1)) <= 0.01


def test_invert_field_nonconvergent():
    # a fold (displacement gradient beyond -1) has no inverse; iteration cannot settle
    f = DisplacementField.from_function((0, 0), 1.0, 40, 40,
                                        lambda p: np.column_stack([-3.0 * np.sin(p[:, 0] / 2), 0 * p[:, 0]]))
    with pytest.raises(NonConvergent) as exc:
        invert_field(f, tol=1e-3, max_iter=5)
    assert exc.value.residual > 1e-3


def test_field_continuity_sampled():
    f = sin_field()
    rng = np.random.default_rng(1)
    p = rng.uniform(0, 400, size=(1000, 2))
    d = rng.normal(size=(1000, 2))
    q = p + 1e-6 * d / np.linalg.norm(d, axis=1, keepdims=True)
    assert np.max(np.linalg.norm(f.apply(p) - f.apply(q), axis=1)) <= 1e-5


# --- pair transforms --------------------------------------------------------

def test_pair_kind_and_validation():
    assert identity_pair(3, 4).kind is PairKind.FORWARD_ADJACENT
    assert identity_pair(3, 5).kind is PairKind.BACKWARD_INTERLEAVE
    for s, t in ((3, 3), (3, 6), (4, 3)):
        with pytest.raises(ValueError):
            identity_pair(s, t)


def test_map_point_examples(rng):
    t = PairTransform(0, 1, AffineTransform2D.identity(), DisplacementField.zeros((0, 0), 10, 5, 5))
    for d in Direction:
        assert np.allclose(map_point(t, (7, 8), d), (7, 8))
    aff = AffineTransform2D.similarity(1.05, 12, 30, -20)
    pts = rng.uniform(0, 400, size=(100, 2))
    assert np.array_equal(PairTransform(0, 1, aff).forward(pts), aff.apply(pts))
    full = PairTransform(0, 1, aff, sin_field(), inverse_tol=0.01)
    inner = rng.uniform(60, 300, size=(100, 2))
    err = np.linalg.norm(full.inverse(full.forward(inner)) - inner, axis=1)
    assert err.max() < 2 * 0.01


def test_map_box_examples():
    b = BBox(10, 20, 40, 60)
    poly = map_box(identity_pair(0, 1), b)
    assert np.allclose(poly.vertices, b.corners())
    shifted = map_box(PairTransform(0, 1, AffineTransform2D.translation(5, -7)), b)
    assert iou_polygon(shifted, box_to_polygon(b.translated(5, -7))) == pytest.approx(1.0, abs=1e-12)
    rot = PairTransform(0, 1, AffineTransform2D.similarity(1.0, 30, center=(25, 40)))
    assert map_box(rot, b).area == pytest.approx(b.area, abs=1e-9)


def test_map_circle_scales_radius():
    t = PairTransform(0, 2, AffineTransform2D.similarity(2.0, 10, 5, 5))
    c = map_circle(t, Circle((1, 1), 3))
    assert c.radius == pytest.approx(6.0)
    back = map_circle(t, c, Direction.INVERSE)
    assert back.radius == pytest.approx(3.0)
    assert np.allclose(back.center, (1, 1))


def test_pointwise_field_inverse_is_tight():
    from serialtrack.transform import solve_field_inverse
    f = sin_field()
    rng = np.random.default_rng(2)
    p = rng.uniform(0, 400, size=(300, 2))
    back = solve_field_inverse(f, f.apply(p), tol=1e-6, max_iter=50)
    assert np.max(np.abs(back - p)) < 1e-5
