"""SDF renderers and primitive capsule encode/decode."""

import numpy as np
import pytest

from scenecaps.primitives import (
    PATCH,
    Detection,
    PatchEffects,
    PrimitiveCapsule,
    detect,
    pixel_agreement,
    standard_primitives,
    synth_dataset,
)
from scenecaps.sdf import (
    composite_over,
    render_shape,
    sdf_circle,
    sdf_gradient,
    sdf_square,
    sdf_triangle,
    shape_sdf,
)

from oracles import circle_rasterize


# --- SDF sign conventions ------------------------------------------------


def test_square_sdf_signs():
    # Center is inside (negative), far corner outside (positive).
    d_in = sdf_square(np.array([0.5]), np.array([0.5]), 0.5, 0.5, 0.0, 0.4, 0.4)
    d_out = sdf_square(np.array([0.95]), np.array([0.95]), 0.5, 0.5, 0.0, 0.4, 0.4)
    assert d_in[0] < 0 < d_out[0]
    # Boundary point: half-side is (w + h) / 4 = 0.2.
    d_edge = sdf_square(np.array([0.7]), np.array([0.5]), 0.5, 0.5, 0.0, 0.4, 0.4)
    assert d_edge[0] == pytest.approx(0.0, abs=1e-9)


def test_square_renders_true_square_regardless_of_aspect():
    # Side is the mean of w and h, so (0.3, 0.5) matches (0.4, 0.4).
    a = render_shape("square", 48, 0.5, 0.5, 0.0, 0.3, 0.5, 1.0)
    b = render_shape("square", 48, 0.5, 0.5, 0.0, 0.4, 0.4, 1.0)
    assert np.allclose(a, b, atol=1e-12)


def test_circle_sdf_is_axis_aligned_ellipse():
    # Rotation must not change the field.
    xs = np.linspace(0.1, 0.9, 7)
    ys = np.full_like(xs, 0.37)
    d0 = sdf_circle(xs, ys, 0.5, 0.5, 0.0, 0.4, 0.2)
    d1 = sdf_circle(xs, ys, 0.5, 0.5, 0.33, 0.4, 0.2)
    assert np.allclose(d0, d1)
    # Semi-axis: the point (0.7, 0.5) lies on the boundary for w = 0.4.
    edge = sdf_circle(np.array([0.7]), np.array([0.5]), 0.5, 0.5, 0.0, 0.4, 0.4)
    assert edge[0] == pytest.approx(0.0, abs=1e-6)


def test_triangle_sdf_apex_up():
    # Apex points toward -y (up in image coordinates) at rot 0.
    apex = sdf_triangle(np.array([0.5]), np.array([0.3]), 0.5, 0.5, 0.0, 0.4, 0.4)
    base_mid = sdf_triangle(np.array([0.5]), np.array([0.7]), 0.5, 0.5, 0.0, 0.4, 0.4)
    inside = sdf_triangle(np.array([0.5]), np.array([0.6]), 0.5, 0.5, 0.0, 0.4, 0.4)
    assert apex[0] == pytest.approx(0.0, abs=1e-9)
    assert base_mid[0] == pytest.approx(0.0, abs=1e-9)
    assert inside[0] < 0


def test_triangle_rotation_moves_apex():
    # Half a turn flips the apex to +y.
    apex_down = sdf_triangle(np.array([0.5]), np.array([0.7]), 0.5, 0.5, 0.5, 0.4, 0.4)
    assert apex_down[0] == pytest.approx(0.0, abs=1e-9)


def test_shape_sdf_dispatch():
    with pytest.raises(KeyError):
        shape_sdf("hexagon", np.zeros(1), np.zeros(1), 0.5, 0.5, 0, 0.2, 0.2)


# Rendered disc pixel count matches a brute-force rasterizer within the
# one-pixel anti-alias band.  Values frozen from oracles.circle_rasterize.
def test_circle_pixel_count_matches_oracle():
    res = 64
    img = render_shape("circle", res, 0.5, 0.5, 0.0, 0.5, 0.5, 1.0)
    lit = int(np.count_nonzero(img > 0.5))
    oracle = int(circle_rasterize(0.5, 0.5, 0.25, res).sum())
    # Perimeter is ~2*pi*r*res ~ 100 px; allow half that as AA slack.
    assert abs(lit - oracle) < 55


def test_render_empty_for_degenerate_shape():
    assert np.allclose(render_shape("square", 32, 0.5, 0.5, 0, 0.0, 0.0, 1.0), 0.0)
    assert np.allclose(render_shape("square", 32, 0.5, 0.5, 0, 0.3, 0.3, 0.0), 0.0)


def test_composite_painter_order():
    frame = composite_over(np.zeros((64, 64)), "square", 0.5, 0.5, 0, 0.5, 0.5, 0.4)
    assert frame[32, 32] == pytest.approx(0.4, abs=0.02)
    frame = composite_over(frame, "square", 0.5, 0.5, 0, 0.3, 0.3, 0.9)
    # Later (nearer) shape overwrites where it covers; rest untouched.
    assert frame[32, 32] == pytest.approx(0.9, abs=0.02)
    assert frame[32, 20] == pytest.approx(0.4, abs=0.02)


def test_sdf_gradient_unit_normals():
    g = sdf_gradient("circle", 0.9, 0.5, 0.5, 0.5, 0.0, 0.4, 0.4)
    assert np.hypot(*g) == pytest.approx(1.0, abs=1e-6)
    assert g[0] == pytest.approx(1.0, abs=1e-3)  # outward = +x here
    assert g[1] == pytest.approx(0.0, abs=1e-3)


# --- Primitive capsules ---------------------------------------------------


def test_standard_primitives_names_and_symmetry():
    caps = standard_primitives()
    assert [c.name for c in caps] == ["square", "triangle", "circle"]
    folds = {c.name: c.symmetry.fold for c in caps}
    assert folds == {"square": 4, "triangle": 1, "circle": None}


def test_render_then_encode_round_trip_square():
    sq = standard_primitives()[0]
    vals = sq.canonicalize(np.array([0.5, 0.55, 0.05, 0.3, 0.3, 0.9]))
    est, err = sq.encode(sq.render(vals))
    assert err < 0.25
    for name, truth in zip(("x", "y", None, "w", "h", "intensity"), vals):
        if name is not None:
            assert est.get(name) == pytest.approx(truth, abs=0.02), name
    # Rotation compared modulo the fold-4 symmetry.
    d = abs(est.get("rot") - vals[2]) % 0.25
    assert min(d, 0.25 - d) < 0.02


def test_render_then_encode_round_trip_triangle():
    tri = standard_primitives()[1]
    vals = tri.canonicalize(np.array([0.45, 0.5, 0.13, 0.4, 0.28, 0.8]))
    est, err = tri.encode(tri.render(vals))
    assert err < 0.25
    for name, truth in zip(("x", "y", "rot", "w", "h", "intensity"), vals):
        if name == "rot":
            d = abs(est.get(name) - truth) % 1.0
            assert min(d, 1.0 - d) < 0.02
        else:
            assert est.get(name) == pytest.approx(truth, abs=0.02), name


def test_render_then_encode_round_trip_circle():
    cir = standard_primitives()[2]
    vals = cir.canonicalize(np.array([0.52, 0.48, 0.7, 0.36, 0.22, 1.0]))
    est, err = cir.encode(cir.render(vals))
    assert err < 0.25
    for name, truth in zip(("x", "y", None, "w", "h", "intensity"), vals):
        if name is not None:
            assert est.get(name) == pytest.approx(truth, abs=0.02), name


def test_encode_blank_patch_reports_failure():
    cap = standard_primitives()[0]
    _, err = cap.encode(np.zeros((PATCH, PATCH)))
    assert err == pytest.approx(1.0)


def test_encode_wrong_shape_scores_worse_than_right_shape():
    caps = {c.name: c for c in standard_primitives()}
    tri = caps["triangle"]
    vals = tri.canonicalize(np.array([0.5, 0.5, 0.0, 0.45, 0.45, 1.0]))
    patch = tri.render(vals)
    _, err_tri = tri.encode(patch)
    _, err_cir = caps["circle"].encode(patch)
    assert err_tri < err_cir


def test_canonicalize_rules():
    caps = {c.name: c for c in standard_primitives()}
    sq = caps["square"].canonicalize(np.array([0.5, 0.5, 0.3, 0.2, 0.4, 1.0]))
    assert sq[3] == pytest.approx(0.3) and sq[4] == pytest.approx(0.3)
    assert sq[2] == pytest.approx(0.3 % 0.25)
    ci = caps["circle"].canonicalize(np.array([0.5, 0.5, 0.9, 0.2, 0.4, 1.0]))
    assert ci[2] == pytest.approx(0.0)
    assert ci[3] == pytest.approx(0.2) and ci[4] == pytest.approx(0.4)


def test_pixel_agreement_basics():
    a = render_shape("circle", PATCH, 0.5, 0.5, 0, 0.5, 0.5, 1.0)
    assert pixel_agreement(a, a) == pytest.approx(1.0)
    b = render_shape("circle", PATCH, 0.5, 0.5, 0, 0.2, 0.2, 1.0)
    assert 0.0 < pixel_agreement(a, b) < 1.0
    blank = np.zeros_like(a)
    assert pixel_agreement(blank, blank) == pytest.approx(0.0)


def test_sample_attributes_stay_on_manifold():
    rng = np.random.default_rng(1)
    for cap in standard_primitives():
        for _ in range(20):
            v = cap.sample_attributes(rng)
            assert np.allclose(cap.canonicalize(v), v, atol=1e-12)
            assert 0.0 <= v.min() and v.max() <= 1.0


def test_synth_dataset_deterministic_and_labeled():
    cap = standard_primitives()[0]
    d1 = synth_dataset(cap, 6, np.random.default_rng(42))
    d2 = synth_dataset(cap, 6, np.random.default_rng(42))
    assert len(d1) == 6
    for (p1, v1, o1), (p2, v2, o2) in zip(d1, d2):
        assert np.array_equal(p1, p2)
        assert np.allclose(v1, v2)
        assert o1 == o2
    with pytest.raises(ValueError):
        synth_dataset(cap, 0, np.random.default_rng(0))


def test_patch_effects_noise_and_occlusion():
    rng = np.random.default_rng(0)
    base = render_shape("circle", PATCH, 0.5, 0.5, 0, 0.5, 0.5, 1.0)
    eff = PatchEffects(noise_sigma=0.02, occlusion_prob=1.0)
    noisy, occluded = eff.apply(base, rng)
    assert occluded
    assert noisy.shape == base.shape
    assert not np.array_equal(noisy, base)
    assert noisy.min() >= 0.0 and noisy.max() <= 1.0


# --- Detection ------------------------------------------------------------


def test_detect_single_shape_in_frame():
    caps = standard_primitives()
    frame = composite_over(np.zeros((112, 112)), "circle", 0.30, 0.40, 0.0, 0.12, 0.12, 1.0)
    found = detect(frame, caps)
    assert len(found["circle"]) == 1
    det = found["circle"][0]
    assert det.p > 0.7
    assert det.values[0] == pytest.approx(0.30, abs=0.03)
    assert det.values[1] == pytest.approx(0.40, abs=0.03)
    assert det.values[3] == pytest.approx(0.12, abs=0.03)
    # No spurious squares or triangles at the disc location.
    assert len(found["square"]) == 0
    assert len(found["triangle"]) == 0


def test_detect_two_shapes():
    caps = standard_primitives()
    frame = np.zeros((112, 112))
    frame = composite_over(frame, "square", 0.25, 0.25, 0.0, 0.14, 0.14, 1.0)
    frame = composite_over(frame, "circle", 0.70, 0.65, 0.0, 0.13, 0.13, 0.8)
    found = detect(frame, caps)
    assert len(found["square"]) == 1
    assert len(found["circle"]) == 1
    assert found["square"][0].values[0] == pytest.approx(0.25, abs=0.03)
    assert found["circle"][0].values[0] == pytest.approx(0.70, abs=0.03)


def test_detect_empty_frame():
    found = detect(np.zeros((112, 112)), standard_primitives())
    assert all(len(v) == 0 for v in found.values())


def test_detection_bbox():
    det = Detection("square", np.array([0.5, 0.5, 0.0, 0.2, 0.2, 1.0]), 0.9)
    assert det.bbox == pytest.approx((0.4, 0.4, 0.6, 0.6))
