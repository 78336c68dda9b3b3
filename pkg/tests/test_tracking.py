"""Frame-to-frame association against the exhaustive matching oracle."""

import math

import numpy as np
import pytest

from scenecaps.attributes import pose_schema
from scenecaps.tracking import (
    CameraPose,
    ClassRelations,
    TrackedObject,
    apply_camera,
    cost_matrix,
    estimate_velocity,
    invert_camera,
    taylor_predict,
    track,
    track_weights,
)

from oracles import best_assignment

SCHEMA = pose_schema()
IDENTITY = [CameraPose.identity()]


def _obj(x, y, vx=0.0, vy=0.0, rot=0.0, w=0.2, h=0.2, i=1.0):
    vel = np.zeros(6)
    vel[0], vel[1] = vx, vy
    return TrackedObject(np.array([x, y, rot, w, h, i]), vel)


def _vals(x, y, rot=0.0, w=0.2, h=0.2, i=1.0):
    return np.array([x, y, rot, w, h, i])


def _class_cost(mat, relations, miss_penalty=0.25):
    total = sum(mat[i, j] for i, j in relations.pairs)
    total += (len(relations.left_only) + len(relations.right_only)) * miss_penalty
    return total


def test_identical_frames_identity_assignment():
    prev = {"circle": [_obj(0.3, 0.3), _obj(0.7, 0.6)]}
    new = {"circle": [_vals(0.3, 0.3), _vals(0.7, 0.6)]}
    result = track(SCHEMA, prev, new)
    rel = result.relations["circle"]
    assert rel.pairs == [(0, 0), (1, 1)]
    assert rel.left_only == [] and rel.right_only == []
    assert result.camera == CameraPose.identity()
    assert result.cost == pytest.approx(0.0, abs=1e-9)


# Two objects crossing paths: at matching time they sit closer to each
# other's old position than to their own, so a static nearest-neighbour
# match would swap them.  The motion model keeps them straight; the
# exhaustive oracle on the same cost matrix agrees. 
def test_crossing_objects_follow_velocity():
    prev = {"circle": [_obj(0.45, 0.5, vx=0.15), _obj(0.55, 0.5, vx=-0.15)]}
    new = {"circle": [_vals(0.39, 0.5), _vals(0.61, 0.5)]}
    result = track(SCHEMA, prev, new)
    assert result.relations["circle"].pairs == [(0, 1), (1, 0)]

    mat = cost_matrix(
        SCHEMA, prev["circle"], new["circle"], result.camera, track_weights(SCHEMA)
    )
    oracle_cost, oracle_pairs = best_assignment(mat, 0.25)
    assert oracle_pairs == [(0, 1), (1, 0)]
    assert _class_cost(mat, result.relations["circle"]) == pytest.approx(oracle_cost)


def test_object_leaving_frame_is_left_unmatched():
    prev = {"circle": [_obj(0.3, 0.3), _obj(0.9, 0.9)]}
    new = {"circle": [_vals(0.3, 0.3)]}
    rel = track(SCHEMA, prev, new, grid=IDENTITY).relations["circle"]
    assert rel.pairs == [(0, 0)]
    assert rel.left_only == [1]
    assert rel.right_only == []


def test_object_entering_frame_is_right_unmatched():
    prev = {"circle": [_obj(0.3, 0.3)]}
    new = {"circle": [_vals(0.3, 0.3), _vals(0.85, 0.2)]}
    rel = track(SCHEMA, prev, new, grid=IDENTITY).relations["circle"]
    assert rel.pairs == [(0, 0)]
    assert rel.left_only == []
    assert rel.right_only == [1]


def test_unknown_class_on_either_side():
    result = track(
        SCHEMA,
        {"circle": [_obj(0.4, 0.4)]},
        {"square": [_vals(0.4, 0.4)]},
        grid=IDENTITY,
    )
    assert result.relations["circle"].left_only == [0]
    assert result.relations["square"].right_only == [0]


# Invariant: for every class the returned assignment's cost equals the
# exhaustive oracle's optimum under the returned camera. 
def test_assignment_cost_matches_oracle_on_random_scenes():
    rng = np.random.default_rng(11)
    w = track_weights(SCHEMA)
    for _ in range(15):
        n = int(rng.integers(1, 5))
        prev = []
        for _ in range(n):
            vals = rng.uniform(0.25, 0.75, 6)
            vel = np.zeros(6)
            vel[:2] = rng.uniform(-0.03, 0.03, 2)
            prev.append(TrackedObject(vals, vel))
        new = []
        for obj in prev:
            if rng.random() < 0.8:  # some objects drop out
                new.append(
                    np.clip(obj.predicted(SCHEMA, 1.0) + rng.normal(0, 0.01, 6), 0, 1)
                )
        if rng.random() < 0.4:  # and some appear
            new.append(rng.uniform(0.25, 0.75, 6))
        rng.shuffle(new)

        result = track(SCHEMA, {"circle": prev}, {"circle": list(new)})
        mat = cost_matrix(SCHEMA, prev, list(new), result.camera, w)
        oracle_cost, _ = best_assignment(mat, 0.25)
        got = _class_cost(mat, result.relations["circle"])
        assert got == pytest.approx(oracle_cost, abs=1e-9)


# A rigid 2 px shift of every object is explained by the camera, not by
# object motion: the grid search lands on the exact compensating pose.
def test_camera_translation_recovered():
    prev = {"circle": [_obj(0.3, 0.4), _obj(0.6, 0.5), _obj(0.4, 0.7)]}
    shift = 2.0 / 112.0
    new = {"circle": [_vals(0.3 + shift, 0.4), _vals(0.6 + shift, 0.5), _vals(0.4 + shift, 0.7)]}
    result = track(SCHEMA, prev, new)
    assert result.relations["circle"].pairs == [(0, 0), (1, 1), (2, 2)]
    assert result.camera.shift[0] == pytest.approx(-shift)
    assert result.camera.shift[1] == pytest.approx(0.0)
    assert result.camera.angle == pytest.approx(0.0)
    assert result.cost == pytest.approx(0.0, abs=1e-9)


def test_camera_rotation_recovered():
    angle = math.radians(1.0)
    true_pose = CameraPose(angle, (0.0, 0.0))
    vals = [_vals(0.3, 0.4), _vals(0.6, 0.5), _vals(0.4, 0.7)]
    prev = {"circle": [TrackedObject(v, np.zeros(6)) for v in vals]}
    new = {"circle": [apply_camera(SCHEMA, v, true_pose) for v in vals]}
    result = track(SCHEMA, prev, new)
    assert result.relations["circle"].pairs == [(0, 0), (1, 1), (2, 2)]
    assert result.camera.angle == pytest.approx(-angle)
    assert result.cost == pytest.approx(0.0, abs=1e-9)


# The camera estimated from a sparse class carries over to a crowded
# one: seven shifted circles exceed the exhaustive cap, yet the fast
# path sees them through the pose recovered from two squares.
def test_fast_path_uses_camera_from_small_class():
    rng = np.random.default_rng(5)
    shift = 3.0 / 112.0
    sq = [_obj(0.25, 0.25), _obj(0.75, 0.7)]
    circles = [
        _obj(0.1 + 0.1 * k, (0.15 + 0.27 * k) % 0.8 + 0.1) for k in range(7)
    ]
    moved = CameraPose(0.0, (shift, 0.0))
    prev = {"square": sq, "circle": circles}
    new = {
        "square": [apply_camera(SCHEMA, o.values, moved) for o in sq],
        "circle": [apply_camera(SCHEMA, o.values, moved) for o in circles],
    }
    order = list(rng.permutation(7))
    new["circle"] = [new["circle"][k] for k in order]
    result = track(SCHEMA, prev, new)
    assert result.camera.shift[0] == pytest.approx(-shift)
    expected = sorted((i, order.index(i)) for i in range(7))
    assert result.relations["circle"].pairs == expected


# Spec property: wherever objects stay farther apart than four times
# the largest per-frame step, the epsilon-ball fast path reproduces the
# exhaustive optimum.  100 seeded scenes, 7 objects each. 
def test_fast_path_matches_brute_force_when_spaced():
    rng = np.random.default_rng(23)
    w = track_weights(SCHEMA)
    max_speed = 0.02
    for _ in range(100):
        centers = []
        while len(centers) < 7:
            cand = rng.uniform(0.1, 0.9, 2)
            if all(np.linalg.norm(cand - c) > 4 * max_speed + 0.06 for c in centers):
                centers.append(cand)
        prev = []
        for cx, cy in centers:
            vel = np.zeros(6)
            vel[:2] = rng.uniform(-max_speed, max_speed, 2)
            prev.append(TrackedObject(_vals(cx, cy), vel))
        new = [
            np.clip(o.predicted(SCHEMA, 1.0) + rng.normal(0.0, 0.003, 6), 0, 1)
            for o in prev
        ]
        order = list(rng.permutation(7))
        new = [new[k] for k in order]

        result = track(SCHEMA, {"c": prev}, {"c": new}, grid=IDENTITY)
        mat = cost_matrix(SCHEMA, prev, new, CameraPose.identity(), w)
        _, oracle_pairs = best_assignment(mat, 0.25)
        assert result.relations["c"].pairs == oracle_pairs


def test_relations_reject_duplicate_indices():
    with pytest.raises(ValueError):
        ClassRelations([(0, 0), (0, 1)], [], [])
    with pytest.raises(ValueError):
        ClassRelations([(0, 0)], [0], [])


def test_camera_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(25):
        pose = CameraPose(
            float(rng.uniform(-0.05, 0.05)), tuple(rng.uniform(-0.03, 0.03, 2))
        )
        vals = rng.uniform(0.0, 1.0, 6)
        back = invert_camera(SCHEMA, apply_camera(SCHEMA, vals, pose), pose)
        assert np.allclose(back, vals, atol=1e-12)


# --- Taylor prediction -------------------------------------------------------


def test_taylor_static_object_unchanged():
    vals = _vals(0.4, 0.6, rot=0.2)
    pred = taylor_predict(SCHEMA, [vals, vals])
    assert np.allclose(pred, vals)


def test_taylor_single_sample_fallback():
    vals = _vals(0.4, 0.6)
    assert np.allclose(taylor_predict(SCHEMA, [vals]), vals)


# Constant velocity: prediction lands exactly at position + v dt; the
# intensity change is carried forward, not extrapolated. 
def test_taylor_constant_velocity_exact():
    a = _vals(0.30, 0.50, i=0.8)
    b = _vals(0.35, 0.48, i=0.9)
    pred = taylor_predict(SCHEMA, [a, b])
    assert pred[0] == pytest.approx(0.40)
    assert pred[1] == pytest.approx(0.46)
    assert pred[5] == pytest.approx(0.9)


def test_taylor_rotation_wraps():
    a = _vals(0.5, 0.5, rot=0.85)
    b = _vals(0.5, 0.5, rot=0.95)
    pred = taylor_predict(SCHEMA, [a, b])
    assert pred[2] == pytest.approx(0.05)


def test_taylor_requires_history():
    with pytest.raises(ValueError):
        taylor_predict(SCHEMA, [])


def test_taylor_clamps_positions():
    a = _vals(0.80, 0.5)
    b = _vals(0.95, 0.5)
    pred = taylor_predict(SCHEMA, [a, b])
    assert pred[0] == 1.0


def test_estimate_velocity_rotation_short_way():
    vel = estimate_velocity(SCHEMA, _vals(0.5, 0.5, rot=0.95), _vals(0.5, 0.5, rot=0.05))
    assert vel[2] == pytest.approx(0.1)
    assert vel[3] == 0.0  # size slots never pick up velocity
