"""Cross-frame object association with joint camera estimation.

Matching minimizes, per object class, the summed weighted distance
between each previous object's first-order motion prediction and the
camera-transformed new observation, with a fixed penalty for every
object left unmatched on either side.  The camera (small rotation plus
pixel translation) is searched over a discrete grid and refined as
classes are processed in order of increasing population; crowded
classes beyond the exhaustive cap fall back to predict-then-match
within an epsilon ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attributes import AttributeSchema, slot_difference

# Weight per attribute class: stable slots (adjectives) dominate the
# match score, volatile ones (verbs) barely count.
DEFAULT_TRACK_WEIGHTS = {
    "position": 1.0,
    "size": 1.0,
    "rotation": 0.5,
    "adjective": 2.0,
    "verb": 0.1,
}

BRUTE_FORCE_CAP = 6
FAST_PATH_EPSILON = 0.05
MISS_PENALTY = 0.25

# Camera grid: rotations -2..+2 degrees by 0.5, shifts -3..+3 px by 1.
CAMERA_ANGLES = tuple(math.radians(0.5 * k) for k in range(-4, 5))
CAMERA_SHIFTS = tuple(range(-3, 4))


@dataclass(frozen=True)
class CameraPose:
    """Frame-to-frame camera motion: rotation about the frame center
    plus a translation, both in normalized image coordinates."""

    angle: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls()

    def to_json(self) -> dict:
        return {"angle": self.angle, "shift": list(self.shift)}

    @classmethod
    def from_json(cls, data: dict) -> "CameraPose":
        return cls(float(data["angle"]), tuple(float(v) for v in data["shift"]))


@dataclass
class TrackedObject:
    """One previous-frame object: attribute values plus an estimated
    per-slot velocity (zeros when the object has no history)."""

    values: np.ndarray
    velocity: np.ndarray | None = None

    def predicted(self, schema: AttributeSchema, dt: float) -> np.ndarray:
        if self.velocity is None:
            return np.asarray(self.values, dtype=float)
        pred = np.asarray(self.values, dtype=float) + np.asarray(self.velocity) * dt
        for i in schema.indices_of("rotation"):
            pred[i] = pred[i] % 1.0
        return pred


@dataclass
class ClassRelations:
    """Relations for one object class: matched (i, j) pairs plus the
    unmatched left (i, .) and right (., j) indices."""

    pairs: list[tuple[int, int]] = field(default_factory=list)
    left_only: list[int] = field(default_factory=list)
    right_only: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        left = [i for i, _ in self.pairs] + list(self.left_only)
        right = [j for _, j in self.pairs] + list(self.right_only)
        if len(left) != len(set(left)) or len(right) != len(set(right)):
            raise ValueError("each index may appear once per side")


@dataclass
class TrackResult:
    relations: dict[str, ClassRelations]
    camera: CameraPose
    cost: float


def track_weights(schema: AttributeSchema, overrides: dict | None = None) -> np.ndarray:
    table = dict(DEFAULT_TRACK_WEIGHTS)
    if overrides:
        table.update(overrides)
    return np.array([table[s.cls] for s in schema.slots])


def apply_camera(
    schema: AttributeSchema, values: np.ndarray, pose: CameraPose
) -> np.ndarray:
    """Rotate position slots about the frame center and shift them;
    rotation slots pick up the camera angle.  Other slots pass through."""
    out = np.array(values, dtype=float)
    pos = schema.indices_of("position")
    if len(pos) == 2 and pose.angle != 0.0:
        c, s = math.cos(pose.angle), math.sin(pose.angle)
        ix, iy = pos
        dx, dy = out[ix] - 0.5, out[iy] - 0.5
        out[ix] = 0.5 + c * dx - s * dy
        out[iy] = 0.5 + s * dx + c * dy
    for i, d in zip(pos, pose.shift):
        out[i] += d
    for i in schema.indices_of("rotation"):
        out[i] = (out[i] + pose.angle / (2.0 * math.pi)) % 1.0
    return out


def invert_camera(
    schema: AttributeSchema, values: np.ndarray, pose: CameraPose
) -> np.ndarray:
    """Inverse of apply_camera, used by the fast path's initial
    prediction (shift back, then rotate back)."""
    out = np.array(values, dtype=float)
    pos = schema.indices_of("position")
    for i, d in zip(pos, pose.shift):
        out[i] -= d
    if len(pos) == 2 and pose.angle != 0.0:
        c, s = math.cos(-pose.angle), math.sin(-pose.angle)
        ix, iy = pos
        dx, dy = out[ix] - 0.5, out[iy] - 0.5
        out[ix] = 0.5 + c * dx - s * dy
        out[iy] = 0.5 + s * dx + c * dy
    for i in schema.indices_of("rotation"):
        out[i] = (out[i] - pose.angle / (2.0 * math.pi)) % 1.0
    return out


def pair_cost(
    schema: AttributeSchema,
    prev: TrackedObject,
    new_values: np.ndarray,
    pose: CameraPose,
    weights: np.ndarray,
    dt: float = 1.0,
) -> float:
    pred = prev.predicted(schema, dt)
    moved = apply_camera(schema, np.asarray(new_values, dtype=float), pose)
    diff = slot_difference(schema, moved, pred)
    return float(np.linalg.norm(weights * diff))


def cost_matrix(
    schema: AttributeSchema,
    prev: list[TrackedObject],
    new: list[np.ndarray],
    pose: CameraPose,
    weights: np.ndarray,
    dt: float = 1.0,
) -> np.ndarray:
    mat = np.zeros((len(prev), len(new)))
    for i, p in enumerate(prev):
        for j, q in enumerate(new):
            mat[i, j] = pair_cost(schema, p, q, pose, weights, dt)
    return mat


def _match_exhaustive(cost: np.ndarray, miss_penalty: float) -> tuple[float, list]:
    """Depth-first minimum search over all unique-relation sets: each
    row takes a free column or stays unmatched, pruned on the running
    total.  Exact for the small per-class populations it is used on."""
    n, m = cost.shape
    best_total = math.inf
    best_pairs: list[tuple[int, int]] = []

    def descend(row: int, used: set, total: float, pairs: list) -> None:
        nonlocal best_total, best_pairs
        if total >= best_total:
            return
        if row == n:
            tail = total + (m - len(used)) * miss_penalty
            if tail < best_total:
                best_total = tail
                best_pairs = sorted(pairs)
            return
        for j in range(m):
            if j not in used:
                descend(
                    row + 1,
                    used | {j},
                    total + cost[row, j],
                    pairs + [(row, j)],
                )
        descend(row + 1, used, total + miss_penalty, pairs)

    descend(0, set(), 0.0, [])
    return best_total, best_pairs


def _relations_from_pairs(n: int, m: int, pairs: list) -> ClassRelations:
    left = {i for i, _ in pairs}
    right = {j for _, j in pairs}
    return ClassRelations(
        sorted(pairs),
        [i for i in range(n) if i not in left],
        [j for j in range(m) if j not in right],
    )


def _match_fast(
    schema: AttributeSchema,
    prev: list[TrackedObject],
    new: list[np.ndarray],
    pose: CameraPose,
    dt: float,
    epsilon: float,
) -> list[tuple[int, int]]:
    """Predict-then-search path for crowded classes: each prediction is
    pulled back into the current frame and matched greedily to the
    nearest observation inside the epsilon ball."""
    preds = [
        invert_camera(schema, p.predicted(schema, dt), pose) for p in prev
    ]
    limit = epsilon * dt * dt
    candidates = []
    for i, pred in enumerate(preds):
        for j, q in enumerate(new):
            d = float(
                np.linalg.norm(slot_difference(schema, pred, np.asarray(q, float)))
            )
            if d < limit:
                candidates.append((d, i, j))
    candidates.sort()
    used_i: set[int] = set()
    used_j: set[int] = set()
    pairs = []
    for _, i, j in candidates:
        if i not in used_i and j not in used_j:
            used_i.add(i)
            used_j.add(j)
            pairs.append((i, j))
    return sorted(pairs)


def camera_grid(resolution: int = 112) -> list[CameraPose]:
    poses = []
    for angle in CAMERA_ANGLES:
        for tx in CAMERA_SHIFTS:
            for ty in CAMERA_SHIFTS:
                poses.append(
                    CameraPose(angle, (tx / resolution, ty / resolution))
                )
    return poses


def track(
    schema: AttributeSchema,
    prev: dict[str, list[TrackedObject]],
    new: dict[str, list[np.ndarray]],
    weights: dict | None = None,
    dt: float = 1.0,
    grid: list[CameraPose] | None = None,
    miss_penalty: float = MISS_PENALTY,
    cap: int = BRUTE_FORCE_CAP,
    epsilon: float = FAST_PATH_EPSILON,
    resolution: int = 112,
) -> TrackResult:
    """Associate the two frames' objects class by class.

    Small classes are matched exhaustively, jointly with the camera:
    every grid pose is scored by the class's optimal assignment cost
    plus the re-scored cost of all pairs matched so far, so each class
    sharpens the camera estimate for the next.  After the sweep every
    class is re-matched once under the final camera, which makes the
    returned assignments exactly optimal for the returned pose.
    """
    w = track_weights(schema, weights)
    if grid is None:
        grid = camera_grid(resolution)
    names = sorted(
        set(prev) | set(new),
        key=lambda k: (len(prev.get(k, ())) + len(new.get(k, ())), k),
    )

    pose = CameraPose.identity()
    anchored: list[tuple[TrackedObject, np.ndarray]] = []
    for name in names:
        rows = prev.get(name, [])
        cols = [np.asarray(v, float) for v in new.get(name, [])]
        if not rows or not cols or max(len(rows), len(cols)) > cap:
            continue
        best = (math.inf, pose, [])
        for cand in grid:
            mat = cost_matrix(schema, rows, cols, cand, w, dt)
            total, pairs = _match_exhaustive(mat, miss_penalty)
            for p, q in anchored:
                total += pair_cost(schema, p, q, cand, w, dt)
            if total < best[0]:
                best = (total, cand, pairs)
        pose = best[1]
        anchored.extend((rows[i], cols[j]) for i, j in best[2])

    relations = {}
    total_cost = 0.0
    for name in names:
        rows = prev.get(name, [])
        cols = [np.asarray(v, float) for v in new.get(name, [])]
        if max(len(rows), len(cols)) > cap:
            pairs = _match_fast(schema, rows, cols, pose, dt, epsilon)
            mat = cost_matrix(schema, rows, cols, pose, w, dt)
            cost = sum(mat[i, j] for i, j in pairs)
            cost += (len(rows) + len(cols) - 2 * len(pairs)) * miss_penalty
        else:
            mat = cost_matrix(schema, rows, cols, pose, w, dt)
            cost, pairs = _match_exhaustive(mat, miss_penalty)
        relations[name] = _relations_from_pairs(len(rows), len(cols), pairs)
        total_cost += cost
    return TrackResult(relations, pose, total_cost)


def estimate_velocity(
    schema: AttributeSchema,
    before: np.ndarray,
    after: np.ndarray,
    dt: float = 1.0,
) -> np.ndarray:
    """Per-slot velocity on position and rotation slots only; rotation
    differences take the short way around the circle."""
    diff = slot_difference(schema, np.asarray(before, float), np.asarray(after, float))
    vel = np.zeros(len(schema))
    for cls in ("position", "rotation"):
        for i in schema.indices_of(cls):
            vel[i] = diff[i] / dt
    return vel


def taylor_predict(
    schema: AttributeSchema,
    history: list[np.ndarray],
    dt: float = 1.0,
) -> np.ndarray:
    """First-order extrapolation of the newest sample.

    Velocity comes from the last two samples and moves only position
    and rotation slots; everything else is carried forward.  A single
    sample falls back to zero velocity.  The result is clamped to the
    attribute range (rotations wrap instead).
    """
    if not history:
        raise ValueError("taylor_predict needs at least one sample")
    last = np.asarray(history[-1], dtype=float)
    if len(history) == 1:
        return last.copy()
    vel = estimate_velocity(schema, history[-2], last, dt)
    obj = TrackedObject(last, vel)
    pred = obj.predicted(schema, dt)
    rot = set(schema.indices_of("rotation"))
    for i in range(len(pred)):
        if i not in rot:
            pred[i] = min(1.0, max(0.0, pred[i]))
    return pred
