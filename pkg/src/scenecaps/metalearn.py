"""Growing the capsule network from scenes it cannot explain yet.

A scene whose observed forest keeps more than one root is incomplete: no
single axiom covers everything on screen.  This module turns such a frame
into a concrete proposal (which parts belong together, which capsule almost
explained them), lets an oracle or a learned decision matrix choose one of
four remedies, and applies it:

  A.1  add a route to an existing capsule
  A.2  add a new capsule wired to the parts
  B.1  retrain one attribute from the scene (with memory rescaling)
  B.2  add a new attribute to a capsule and all its ancestors, then train

New routes are trained one-shot from a single scene: a geometric prior
supplies parent labels, and randomized rigid/style/pose transforms blow the
one observation up into a training set.
"""

from __future__ import annotations

import csv
import itertools
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .attributes import (
    DEFAULT_WINDOW,
    AttributeSchema,
    AttributeVector,
    SlotSpec,
    WindowConfig,
    agreement,
)
from .capsnet import (
    DEFAULT_ACTIVATION_THRESHOLD,
    CapsuleNetwork,
    ObservationEntry,
    PassResult,
    Route,
    RouteSlot,
    SemanticCapsule,
    _centers,
    _part_size,
    forest_entries,
    forward_pass,
)
from .dimension import cbc_dimension, cbc_dimension_mc
from .mlp import RegressionModel, TrainConfig, route_widths, train

EPSILON_USE = 0.05
# Verdict bands for comparing an estimated dimension to the schema size.
PARAMETERIZATION_TOLERANCE = 0.5
# Per-slot agreement below this counts as a mismatched attribute.
MISMATCH_AGREEMENT = 0.5

ACTIONS = ("A.1", "A.2", "B.1", "B.2")
ACTION_SUMMARY = {
    "A.1": "add a route to an existing capsule",
    "A.2": "add a new capsule over the parts",
    "B.1": "retrain one attribute from the scene",
    "B.2": "add a new attribute and train it",
}


# ----------------------------------------------------------------------
# prior parent attributes


def _rotation(turns: float) -> np.ndarray:
    a = 2.0 * math.pi * float(turns)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def _pose_of(vec: AttributeVector) -> tuple[np.ndarray, float, np.ndarray]:
    """(position, rotation in turns, size) of a part, zero-padded to 2D."""
    pos = np.zeros(2)
    size = np.zeros(2)
    for axis, j in enumerate(vec.schema.indices_of("position")[:2]):
        pos[axis] = vec.values[j]
    for axis, j in enumerate(vec.schema.indices_of("size")[:2]):
        size[axis] = vec.values[j]
    rot_idx = vec.schema.indices_of("rotation")
    turns = float(vec.values[rot_idx[0]]) if rot_idx else 0.0
    return pos, turns, size


def prior_parent(
    schema: AttributeSchema, parts: Sequence[AttributeVector]
) -> AttributeVector:
    """Geometric prior for a parent's attributes given its parts.

    Rotation and every non-pose slot are size-weighted means of the parts
    that carry the slot; size and position come from the bounding box of
    all part corners, taken in the frame of the parent's prior rotation.
    Parts with zero total size fall back to an unweighted mean.
    """
    if not parts:
        raise ValueError("the prior needs at least one part")
    weights = [float(np.linalg.norm(_pose_of(p)[2])) for p in parts]
    if sum(weights) <= 0.0:
        weights = [1.0] * len(parts)

    out = np.zeros(len(schema))
    for j, spec in enumerate(schema.slots):
        if spec.cls in ("position", "size"):
            continue
        acc = wsum = 0.0
        for w, part in zip(weights, parts):
            if spec.name in part.schema.names:
                acc += w * part.get(spec.name)
                wsum += w
        out[j] = acc / wsum if wsum > 0.0 else 0.0

    rot_idx = schema.indices_of("rotation")
    frame = _rotation(out[rot_idx[0]] if rot_idx else 0.0)
    corners = []
    for part in parts:
        pos, turns, size = _pose_of(part)
        local = _rotation(turns)
        for sx, sy in itertools.product((-0.5, 0.5), repeat=2):
            corner = pos + local @ (size * (sx, sy))
            corners.append(frame.T @ corner)
    cloud = np.asarray(corners)
    lo, hi = cloud.min(axis=0), cloud.max(axis=0)
    center = frame @ ((lo + hi) / 2.0)
    extent = hi - lo
    for axis, j in enumerate(schema.indices_of("position")[:2]):
        out[j] = center[axis]
    for axis, j in enumerate(schema.indices_of("size")[:2]):
        out[j] = extent[axis]
    return AttributeVector(schema, np.clip(out, 0.0, 1.0))


# ----------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class RigidTransform:
    """Similarity transform applied to a whole part ensemble."""

    shift: tuple[float, float] = (0.0, 0.0)
    turns: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class VerbTrack:
    """Key poses of one verb attribute: (phase, part values), phases
    ascending and starting at 0 (the untouched original pose)."""

    name: str
    poses: tuple[tuple[float, tuple[float, ...]], ...]

    def __post_init__(self) -> None:
        phases = [t for t, _ in self.poses]
        if len(phases) < 2 or phases[0] != 0.0 or sorted(phases) != phases:
            raise ValueError("verb track needs ascending phases starting at 0")

    def sample(self, rng: np.random.Generator) -> tuple[float, np.ndarray]:
        """Random phase between two consecutive key poses, linearly mixed."""
        i = int(rng.integers(1, len(self.poses)))
        (t0, a), (t1, b) = self.poses[i - 1], self.poses[i]
        t = float(rng.uniform(t0, t1))
        frac = (t - t0) / (t1 - t0) if t1 > t0 else 0.0
        mixed = (1.0 - frac) * np.asarray(a) + frac * np.asarray(b)
        return t, mixed


@dataclass(frozen=True)
class AugmentConfig:
    """Transform ranges sized so a 4-layer route net can actually fit the
    manifold they span; wider rotation intervals stall one-shot training."""

    samples: int = 240
    translation: float = 0.12
    rotation: float = 0.1  # width of the turn interval, 1.0 = full circle
    scale_range: tuple[float, float] = (0.9, 1.1)
    dropout: float = 0.1
    epsilon_use: float = EPSILON_USE


def _offsets(schemas: Sequence[AttributeSchema]) -> list[tuple[int, int]]:
    spans, at = [], 0
    for s in schemas:
        spans.append((at, at + len(s)))
        at += len(s)
    return spans


def split_parts(
    schemas: Sequence[AttributeSchema], concat: np.ndarray
) -> list[AttributeVector]:
    return [
        AttributeVector(s, concat[lo:hi])
        for s, (lo, hi) in zip(schemas, _offsets(schemas))
    ]


def transform_parts(
    schemas: Sequence[AttributeSchema],
    concat: np.ndarray,
    t: RigidTransform,
    center: np.ndarray | None = None,
) -> np.ndarray:
    """Apply one similarity transform to every part in a concatenation.

    Positions rotate and scale about the ensemble center (mean of part
    centers by default), rotation slots pick up the turn, sizes scale.
    Results are clamped to the attribute range.
    """
    out = np.asarray(concat, dtype=float).copy()
    spans = _offsets(schemas)
    if center is None:
        centers = [_pose_of(AttributeVector(s, out[lo:hi]))[0] for s, (lo, hi) in zip(schemas, spans)]
        center = np.mean(centers, axis=0)
    rot = _rotation(t.turns)
    for schema, (lo, hi) in zip(schemas, spans):
        pos_idx = [lo + j for j in schema.indices_of("position")[:2]]
        if len(pos_idx) == 2:
            pos = out[pos_idx]
            out[pos_idx] = center + t.scale * (rot @ (pos - center)) + np.asarray(t.shift)
        for j in schema.indices_of("rotation"):
            out[lo + j] = (out[lo + j] + t.turns) % 1.0
        for j in schema.indices_of("size"):
            out[lo + j] *= t.scale
    return np.clip(out, 0.0, 1.0)


def unused_adjectives(
    schemas: Sequence[AttributeSchema],
    seeds: Sequence[np.ndarray],
    eps: float = EPSILON_USE,
) -> list[str]:
    """Adjective slot names whose stored values never reach eps."""
    spans = _offsets(schemas)
    names: dict[str, list[int]] = {}
    for schema, (lo, _) in zip(schemas, spans):
        for j in schema.indices_of("adjective"):
            names.setdefault(schema.names[j], []).append(lo + j)
    unused = []
    for name, cols in names.items():
        if all(abs(float(seed[c])) < eps for seed in seeds for c in cols):
            unused.append(name)
    return sorted(unused)


def _derivable_names(
    parent: AttributeSchema, schemas: Sequence[AttributeSchema]
) -> set[str]:
    part_names = {n for s in schemas for n in s.names}
    derived = set()
    for spec in parent.slots:
        if spec.cls in ("position", "size") or spec.name in part_names:
            derived.add(spec.name)
    return derived


def augment(
    schemas: Sequence[AttributeSchema],
    seeds: Sequence[np.ndarray],
    parent_schema: AttributeSchema,
    cfg: AugmentConfig = AugmentConfig(),
    rng: np.random.Generator | None = None,
    verb_tracks: Sequence[VerbTrack] = (),
    owner_overrides: Sequence[np.ndarray] | None = None,
    override_names: Iterable[str] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Blow seed observations up into (parts, parent) training pairs.

    Each sample runs pose interpolation (verb tracks), style randomization
    (unused adjectives get one shared random value per name) and a random
    rigid transform, then labels the result with the geometric prior.
    Parent slots that cannot be derived from the parts (or are listed in
    override_names) are copied from owner_overrides instead, so learned
    parent-only attributes survive retraining.  The untouched seeds are
    always included as the first pairs.
    """
    seeds = [np.asarray(s, dtype=float) for s in seeds]
    if not seeds:
        raise ValueError("augmentation needs at least one observation")
    if rng is None:
        rng = np.random.default_rng(0)
    if override_names is None:
        override_idx = [
            j
            for j, spec in enumerate(parent_schema.slots)
            if spec.name not in _derivable_names(parent_schema, schemas)
        ]
    else:
        override_idx = [parent_schema.index(n) for n in override_names]
    if owner_overrides is not None and len(owner_overrides) != len(seeds):
        raise ValueError("owner overrides must align with the seeds")

    free = unused_adjectives(schemas, seeds, cfg.epsilon_use)
    spans = _offsets(schemas)
    free_cols = {
        name: [
            lo + j
            for schema, (lo, _) in zip(schemas, spans)
            for j in schema.indices_of("adjective")
            if schema.names[j] == name
        ]
        for name in free
    }
    verb_cols = {
        track.name: [
            lo + j
            for schema, (lo, _) in zip(schemas, spans)
            for j in schema.indices_of("verb")
            if schema.names[j] == track.name
        ]
        for track in verb_tracks
    }

    def label(parts_concat: np.ndarray, seed_i: int) -> np.ndarray:
        y = prior_parent(parent_schema, split_parts(schemas, parts_concat)).values.copy()
        if owner_overrides is not None:
            for j in override_idx:
                y[j] = owner_overrides[seed_i][j]
        return y

    xs, ys = [], []
    for i, seed in enumerate(seeds):
        xs.append(seed.copy())
        ys.append(label(seed, i))
    for k in range(cfg.samples):
        i = k % len(seeds)
        sample = seeds[i].copy()
        for track in verb_tracks:
            phase, mixed = track.sample(rng)
            sample = mixed.copy()
            for c in verb_cols[track.name]:
                sample[c] = phase
        for name in free:
            value = float(rng.random())
            for c in free_cols[name]:
                sample[c] = value
        t = RigidTransform(
            shift=tuple(rng.uniform(-cfg.translation, cfg.translation, 2)),
            turns=float(rng.uniform(-cfg.rotation / 2.0, cfg.rotation / 2.0)),
            scale=float(rng.uniform(*cfg.scale_range)),
        )
        sample = transform_parts(schemas, sample, t)
        xs.append(sample)
        ys.append(label(sample, i))
    return np.asarray(xs), np.asarray(ys)


# ----------------------------------------------------------------------
# route training


@dataclass(frozen=True)
class TrainReport:
    samples: int
    encoder_loss: float
    decoder_loss: float
    mean_deviation: float
    max_deviation: float


DEFAULT_TRAIN = TrainConfig(epochs=1500, batch_size=16, learning_rate=0.1)


def seeds_from_memory(route: Route) -> list[np.ndarray]:
    return [np.asarray(concat, dtype=float) for _, concat, _ in route.memory]


def owners_from_memory(route: Route) -> list[np.ndarray]:
    return [np.asarray(owner, dtype=float) for _, _, owner in route.memory]


def train_route(
    route: Route,
    seeds: Sequence[np.ndarray],
    cfg: AugmentConfig = AugmentConfig(),
    train_cfg: TrainConfig = DEFAULT_TRAIN,
    rng: np.random.Generator | None = None,
    verb_tracks: Sequence[VerbTrack] = (),
    owner_overrides: Sequence[np.ndarray] | None = None,
    override_names: Iterable[str] | None = None,
) -> TrainReport:
    """Train a route's encoder and decoder from seed observations.

    The encoder gets whole-input-capsule dropout so occluded parts still
    decode to the right parent; the decoder trains on the clean pairs.
    Reports the reconstruction distance over the augmented set, whose max
    serves as the upper-bound estimate for admission sanity checks.
    """
    if not seeds:
        raise ValueError("cannot train a route without observations")
    schemas = [s.schema for s in route.slots]
    x, y = augment(
        schemas,
        seeds,
        route.owner_schema,
        cfg,
        rng,
        verb_tracks,
        owner_overrides,
        override_names,
    )
    groups = [range(lo, hi) for lo, hi in route.slot_offsets()]
    enc_cfg = replace(train_cfg, dropout=cfg.dropout)
    encoder, enc_loss = train(route.encoder, (x, y), enc_cfg, groups=groups)
    decoder, dec_loss = train(route.decoder, (y, x), train_cfg)
    route.encoder, route.decoder = encoder, decoder
    recon = decoder.infer(encoder.infer(x))
    dev = np.linalg.norm(recon - x, axis=1)
    return TrainReport(
        samples=len(x),
        encoder_loss=float(enc_loss),
        decoder_loss=float(dec_loss),
        mean_deviation=float(dev.mean()),
        max_deviation=float(dev.max()),
    )


def _stable_seed(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_route(
    network: CapsuleNetwork,
    route_id: int,
    part_names: Sequence[str],
    owner_schema: AttributeSchema,
    seed: int = 0,
) -> Route:
    slots = [RouteSlot(n, network.schema_of(n)) for n in part_names]
    in_dim = sum(len(s.schema) for s in slots)
    out_dim = len(owner_schema)
    encoder = RegressionModel(route_widths(in_dim, out_dim), seed=seed)
    decoder = RegressionModel(route_widths(out_dim, in_dim), seed=seed + 1)
    return Route(route_id, slots, owner_schema, encoder, decoder)


def merged_schema(network: CapsuleNetwork, part_names: Sequence[str]) -> AttributeSchema:
    schemas = [network.schema_of(n) for n in part_names]
    merged = schemas[0]
    for s in schemas[1:]:
        merged = merged.merge(s)
    return merged


# ----------------------------------------------------------------------
# features and the decision matrix


@dataclass(frozen=True)
class FeatureVector:
    """Booleans describing one incomplete scene (the matrix rows)."""

    shared_missing_parent: bool = False  # 1
    no_missing_parent: bool = False  # 2
    parts_tracked: bool = False  # 3
    single_unused_mismatch: bool = False  # 4
    pose_only_mismatch: bool = False  # 5
    majority_mismatch: bool = False  # 6
    underparameterized: bool = False  # 7
    balanced_parameterization: bool = False  # 8
    overparameterized: bool = False  # 9

    def __post_init__(self) -> None:
        if self.shared_missing_parent and self.no_missing_parent:
            raise ValueError("a missing parent cannot both exist and not exist")
        if sum((self.underparameterized, self.balanced_parameterization, self.overparameterized)) > 1:
            raise ValueError("parameterization verdicts are mutually exclusive")

    def as_tuple(self) -> tuple[bool, ...]:
        return (
            self.shared_missing_parent,
            self.no_missing_parent,
            self.parts_tracked,
            self.single_unused_mismatch,
            self.pose_only_mismatch,
            self.majority_mismatch,
            self.underparameterized,
            self.balanced_parameterization,
            self.overparameterized,
        )


FEATURE_NAMES = tuple(f.name for f in FeatureVector.__dataclass_fields__.values())


class DecisionMatrix:
    """Vote counts of past oracle answers per scene feature.

    Prediction sums the columns over the rows whose feature is true and
    takes the argmax; recording an answer adds one vote to the true rows.
    """

    def __init__(self, counts=None) -> None:
        if counts is None:
            counts = np.zeros((len(FEATURE_NAMES), len(ACTIONS)))
        counts = np.asarray(counts, dtype=float)
        if counts.shape != (len(FEATURE_NAMES), len(ACTIONS)):
            raise ValueError(f"decision matrix must be {len(FEATURE_NAMES)}x{len(ACTIONS)}")
        if (counts < 0).any():
            raise ValueError("vote counts cannot be negative")
        self.counts = counts

    def scores(self, features: FeatureVector) -> dict[str, float]:
        mask = np.asarray(features.as_tuple(), dtype=bool)
        sums = self.counts[mask].sum(axis=0) if mask.any() else np.zeros(len(ACTIONS))
        return dict(zip(ACTIONS, (float(v) for v in sums)))

    def predict(self, features: FeatureVector) -> str:
        scores = self.scores(features)
        return max(ACTIONS, key=lambda a: (scores[a], -ACTIONS.index(a)))

    def record(self, features: FeatureVector, action: str) -> None:
        if action not in ACTIONS:
            raise ValueError(f"unknown action {action!r}")
        mask = np.asarray(features.as_tuple(), dtype=bool)
        self.counts[mask, ACTIONS.index(action)] += 1.0

    def autonomous(
        self, features: FeatureVector, margin: float = 2.0, min_votes: float = 10.0
    ) -> bool:
        """Whether past votes are decisive enough to skip the oracle."""
        ranked = sorted(self.scores(features).values(), reverse=True)
        return ranked[0] >= min_votes and ranked[0] >= margin * ranked[1]

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature", *ACTIONS])
            for name, row in zip(FEATURE_NAMES, self.counts):
                writer.writerow([name, *(int(v) if v == int(v) else v for v in row)])

    @classmethod
    def load(cls, path) -> "DecisionMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][1:] != list(ACTIONS):
            raise ValueError("unrecognized decision matrix file")
        by_name = {r[0]: [float(v) for v in r[1:]] for r in rows[1:]}
        try:
            counts = [by_name[name] for name in FEATURE_NAMES]
        except KeyError as missing:
            raise ValueError(f"decision matrix is missing row {missing}") from None
        return cls(counts)


# ----------------------------------------------------------------------
# oracle records


@dataclass
class OracleQuestion:
    qid: int
    parts: tuple[str, ...]
    part_uids: tuple[int, ...]
    candidate: str | None = None
    candidate_p: float = 0.0
    candidate_route: int | None = None
    causes: dict[str, float] = field(default_factory=dict)
    features: FeatureVector = field(default_factory=FeatureVector)
    highlight: np.ndarray | None = None

    def to_json(self) -> dict:
        return {
            "id": self.qid,
            "candidate": self.candidate,
            "candidate_p": self.candidate_p,
            "parts": list(self.parts),
            "part_uids": list(self.part_uids),
            "causes": dict(self.causes),
            "features": list(self.features.as_tuple()),
            "highlight": None if self.highlight is None else "frame",
        }


@dataclass(frozen=True)
class OracleAnswer:
    qid: int
    action: str
    payload: str | None = None
    parts: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if self.action != "A.1" and not self.payload:
            raise ValueError(f"action {self.action} needs a payload name")

    def to_json(self) -> dict:
        data = {"id": self.qid, "action": self.action, "payload": self.payload}
        if self.parts is not None:
            data["parts"] = list(self.parts)
        return data

    @classmethod
    def from_json(cls, data: dict) -> "OracleAnswer":
        parts = data.get("parts")
        return cls(
            int(data.get("id", -1)),
            data["action"],
            data.get("payload"),
            None if parts is None else tuple(parts),
        )


class ScriptedOracle:
    """Replays a fixed answer list; each ask consumes the next entry."""

    def __init__(self, answers: Iterable[OracleAnswer | dict]) -> None:
        self._answers = [
            a if isinstance(a, OracleAnswer) else OracleAnswer.from_json(a)
            for a in answers
        ]
        self.transcript: list[tuple[OracleQuestion, OracleAnswer]] = []

    def ask(self, question: OracleQuestion) -> OracleAnswer:
        if not self._answers:
            raise RuntimeError("oracle script exhausted")
        answer = replace(self._answers.pop(0), qid=question.qid)
        self.transcript.append((question, answer))
        return answer


# ----------------------------------------------------------------------
# incompleteness detection


def _cluster_roots(
    roots: Sequence[ObservationEntry], uid_map: dict[int, ObservationEntry]
) -> list[list[ObservationEntry]]:
    """Group roots whose primitive leaves form one spatial blob.

    Leaves connect when their centers are closer than twice the smaller
    of their sizes (transitively); roots sharing a leaf blob group
    together.  Clustering on leaves rather than on the roots themselves
    keeps a scene-sized composite from swallowing every stray part via
    its own large extent.
    """
    leaf_uids = sorted(set().union(*(r.primitive_leaves() for r in roots)))
    index = {u: i for i, u in enumerate(leaf_uids)}
    parent = list(range(len(leaf_uids)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for ua, ub in itertools.combinations(leaf_uids, 2):
        a, b = uid_map[ua], uid_map[ub]
        ca, cb = _centers(a), _centers(b)
        if ca is None or cb is None:
            continue
        limit = 2.0 * min(_part_size(a), _part_size(b))
        if math.dist(ca, cb) < limit:
            parent[find(index[ua])] = find(index[ub])

    blob_to_roots: dict[int, list[ObservationEntry]] = {}
    root_blobs: list[tuple[ObservationEntry, set[int]]] = []
    for root in roots:
        blobs = {find(index[u]) for u in root.primitive_leaves()}
        root_blobs.append((root, blobs))
    # Roots sharing any blob merge into one group.
    groups: list[tuple[set[int], list[ObservationEntry]]] = []
    for root, blobs in root_blobs:
        merged = [g for g in groups if g[0] & blobs]
        for g in merged:
            groups.remove(g)
            blobs |= g[0]
        members = [root] + [m for g in merged for m in g[1]]
        groups.append((blobs, members))
    return [sorted(members, key=lambda e: e.uid) for _, members in groups]


def _uid_map(result: PassResult) -> dict[int, ObservationEntry]:
    return {e.uid: e for rows in result.tables.values() for e in rows}


def _best_unactivated(
    network: CapsuleNetwork,
    result: PassResult,
    sub: PassResult | None,
    leaves: set[int],
) -> ObservationEntry | None:
    """Strongest sub-threshold entry of a capsule the scene did not admit."""
    if sub is None:
        return None
    best: ObservationEntry | None = None
    for name in network.semantic:
        if result.tables.get(name):
            continue
        for entry in sub.tables.get(name, ()):
            if not (entry.primitive_leaves() & leaves):
                continue
            if best is None or (entry.p, -entry.uid) > (best.p, -best.uid):
                best = entry
    return best


def _mismatch_profile(
    network: CapsuleNetwork, entry: ObservationEntry, cfg: WindowConfig
) -> tuple[set[str], set[str], int, int, Route]:
    """Slot names/classes disagreeing with the route's expectations."""
    caps = network.semantic[entry.capsule]
    route = next(r for r in caps.routes if r.id == entry.route_id)
    inputs = [
        (0.0, None) if c is None else (c.p, c.attrs) for c in entry.children
    ]
    symmetries = [network.symmetry_of(s.capsule) for s in route.slots]
    rr = route.forward(inputs, symmetries, cfg)
    names: set[str] = set()
    classes: set[str] = set()
    mismatched = total = 0
    for child, expected, symmetry in zip(entry.children, rr.expected, symmetries):
        if child is None or expected is None:
            continue
        z = agreement(child.attrs, expected, symmetry, cfg)
        total += len(z)
        for j, spec in enumerate(child.attrs.schema.slots):
            if z[j] < MISMATCH_AGREEMENT:
                mismatched += 1
                names.add(spec.name)
                classes.add(spec.cls)
    return names, classes, mismatched, total, route


def _attribute_unused(route: Route, name: str, eps: float = EPSILON_USE) -> bool:
    # Column positions of the named slot across all route inputs.
    cols = [
        lo + slot.schema.index(name)
        for slot, (lo, _) in zip(route.slots, route.slot_offsets())
        if name in slot.schema.names
    ]
    if not cols or not route.memory:
        return True
    return all(abs(float(concat[c])) < eps for _, concat, _ in route.memory for c in cols)


def _scene_features(
    network: CapsuleNetwork,
    chosen: Sequence[ObservationEntry],
    leaves: set[int],
    candidate: ObservationEntry | None,
    tracked: frozenset[int],
    cfg: WindowConfig,
    rng: np.random.Generator,
) -> tuple[FeatureVector, int | None]:
    kwargs: dict[str, bool] = {
        "shared_missing_parent": candidate is not None,
        "no_missing_parent": candidate is None,
        "parts_tracked": bool(leaves) and leaves <= tracked,
    }
    route_id: int | None = None
    if candidate is not None and candidate.route_id is not None:
        names, classes, mismatched, total, route = _mismatch_profile(
            network, candidate, cfg
        )
        route_id = route.id
        kwargs["single_unused_mismatch"] = (
            len(names) == 1 and _attribute_unused(route, next(iter(names)))
        )
        kwargs["pose_only_mismatch"] = bool(names) and classes <= {
            "position",
            "rotation",
            "size",
        }
        kwargs["majority_mismatch"] = total > 0 and mismatched > total / 2
        report = parameterization_report(
            len(network.schema_of(candidate.capsule)),
            decoder=route.decoder,
            rng=rng,
            points_per_run=256,
            runs=12,
        )
        kwargs["underparameterized"] = report["verdict"] == "under"
        kwargs["balanced_parameterization"] = report["verdict"] == "balance"
        kwargs["overparameterized"] = report["verdict"] == "over"
    return FeatureVector(**kwargs), route_id


def detect_incomplete(
    network: CapsuleNetwork,
    result: PassResult,
    sub: PassResult | None = None,
    matrix: DecisionMatrix | None = None,
    tracked: frozenset[int] = frozenset(),
    cfg: WindowConfig = DEFAULT_WINDOW,
    rng: np.random.Generator | None = None,
) -> list[OracleQuestion]:
    """Staged proposals for a scene the network cannot cover in one axiom.

    Empty iff the observed forest already has a single root.  Otherwise
    proposals come in priority order: the largest spatially connected
    group of roots first, then stray primitive roots no admitted semantic
    observation explains, and finally all roots at once (the scene-level
    parent).  sub is a threshold-free pass used to spot capsules that
    almost activated.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    roots = forest_entries(result)
    if len(roots) <= 1:
        return []
    flat = [e for rows in result.tables.values() for e in rows]
    uid_map = {e.uid: e for e in flat}
    explained = set().union(
        set(),
        *(
            e.primitive_leaves()
            for e in flat
            if e.capsule not in network.primitives
        ),
    )

    proposals: list[list[ObservationEntry]] = []
    clusters = _cluster_roots(roots, uid_map)
    multi = sorted(
        (c for c in clusters if len(c) > 1),
        key=lambda c: (-len(c), c[0].uid),
    )
    proposals.extend(multi)
    in_multi = {e.uid for c in multi for e in c}
    strays = [
        [r]
        for r in roots
        if r.uid not in in_multi
        and r.capsule in network.primitives
        and r.uid not in explained
    ]
    proposals.extend(strays)
    if not multi and not strays:
        proposals.append(list(roots))

    questions = []
    for qid, chosen in enumerate(proposals):
        leaves = set().union(*(e.primitive_leaves() for e in chosen))
        candidate = _best_unactivated(network, result, sub, leaves)
        features, route_id = _scene_features(
            network, chosen, leaves, candidate, tracked, cfg, rng
        )
        questions.append(
            OracleQuestion(
                qid=qid,
                parts=tuple(e.capsule for e in chosen),
                part_uids=tuple(e.uid for e in chosen),
                candidate=None if candidate is None else candidate.capsule,
                candidate_p=0.0 if candidate is None else candidate.p,
                candidate_route=route_id,
                causes=matrix.scores(features) if matrix is not None else {},
                features=features,
            )
        )
    return questions


def highlight_frame(
    network: CapsuleNetwork,
    result: PassResult,
    question: OracleQuestion,
    resolution: int = 112,
) -> np.ndarray:
    """Render only the proposed parts, for showing to the oracle."""
    from .capsnet import render_tree

    flat = [e for rows in result.tables.values() for e in rows]
    uid_to_tree = {e.uid: t for e, t in zip(flat, result.trees)}
    frame = np.zeros((resolution, resolution))
    for uid in question.part_uids:
        frame = np.maximum(frame, render_tree(network, uid_to_tree[uid], resolution))
    return frame


# ----------------------------------------------------------------------
# decisions and actions


def decide(
    question: OracleQuestion,
    matrix: DecisionMatrix | None = None,
    oracle: "ScriptedOracle | Callable[[OracleQuestion], OracleAnswer | None] | None" = None,
    autonomy: bool = False,
    margin: float = 2.0,
    min_votes: float = 10.0,
    auto_name: str | None = None,
) -> tuple[OracleAnswer | None, str]:
    """Pick an action for one question; returns (answer, source).

    With autonomy enabled and a decisive matrix, the answer is synthesized
    without asking (A.2 invents a name, A.1 reuses the candidate); any
    action needing a payload we cannot invent falls back to the oracle.
    An oracle returning None defers the scene: no mutation happens.
    """
    if matrix is not None and autonomy and matrix.autonomous(question.features, margin, min_votes):
        action = matrix.predict(question.features)
        if action == "A.2":
            return OracleAnswer(question.qid, action, auto_name or "object"), "matrix"
        if action == "A.1" and question.candidate is not None:
            return OracleAnswer(question.qid, action, question.candidate), "matrix"
    if oracle is None:
        raise ValueError("no oracle available to answer the question")
    ask = oracle.ask if hasattr(oracle, "ask") else oracle
    answer = ask(question)
    if answer is None:
        return None, "deferred"
    if answer.action not in ACTIONS:
        raise ValueError(f"oracle returned unknown action {answer.action!r}")
    if matrix is not None:
        matrix.record(question.features, answer.action)
    return answer, "oracle"


def _resolve_parts(
    network: CapsuleNetwork,
    result: PassResult,
    question: OracleQuestion,
    names: Sequence[str] | None,
) -> list[ObservationEntry]:
    """Bind part names from an answer to concrete table entries.

    Preference order per name: an entry that is itself a proposed root,
    then one whose leaves lie inside the proposal, then anything observed;
    ties break toward higher activation.  Combinations covering more of
    the proposed leaves win over partial overlaps, and the spatially
    tightest of those wins, which keeps a shared name (two circles on
    screen) attached to the cluster under discussion.
    """
    uid_map = _uid_map(result)
    root_uids = set(question.part_uids)
    prop_leaves = set().union(
        *(uid_map[u].primitive_leaves() for u in question.part_uids)
    )
    if names is None:
        return [uid_map[u] for u in question.part_uids]

    ranked_per_name = []
    for name in names:
        rows = result.tables.get(name, [])
        if not rows:
            raise ValueError(f"no observed {name!r} entry to bind")

        def tier(e: ObservationEntry) -> int:
            if e.uid in root_uids:
                return 0
            if e.primitive_leaves() <= prop_leaves:
                return 1
            return 2

        ranked = sorted(rows, key=lambda e: (tier(e), -e.p, e.uid))[:4]
        ranked_per_name.append([(tier(e), e) for e in ranked])

    best: tuple | None = None
    chosen: list[ObservationEntry] | None = None
    for combo in itertools.product(*ranked_per_name):
        entries = [e for _, e in combo]
        if len({e.uid for e in entries}) != len(entries):
            continue
        tiers = sum(t for t, _ in combo)
        covered = len(
            set().union(*(e.primitive_leaves() for e in entries)) & prop_leaves
        )
        spread = 0.0
        centers = [c for c in (_centers(e) for e in entries) if c is not None]
        for a, b in itertools.combinations(centers, 2):
            spread += math.dist(a, b)
        key = (tiers, -covered, spread, tuple(e.uid for e in entries))
        if best is None or key < best:
            best, chosen = key, entries
    if chosen is None:
        raise ValueError("answer names cannot bind to distinct entries")
    return chosen


def append_scaled_observation(
    route: Route, attr: str, concat: np.ndarray
) -> float:
    """Store a new observation of one adjective, rescaling memory to [0,1].

    The attribute's value is the input-space distance to the stored
    zero-reference, measured against the current reference distance; an
    observation farther out than the old unit becomes the new reference
    and every stored value shrinks accordingly.
    """
    j = route.owner_schema.index(attr)
    concat = np.asarray(concat, dtype=float)
    owners = owners_from_memory(route)
    seeds = seeds_from_memory(route)
    if not owners:
        value = 1.0
    else:
        vals = [float(o[j]) for o in owners]
        zero = seeds[int(np.argmin(vals))]
        d_new = float(np.linalg.norm(concat - zero))
        if max(vals) < EPSILON_USE:
            value = 1.0
        else:
            one = seeds[int(np.argmax(vals))]
            d_ref = float(np.linalg.norm(one - zero))
            ratio = d_new / d_ref if d_ref > 1e-12 else 1.0
            if ratio > 1.0:
                route.memory = [
                    (ps, c, [v / ratio if k == j else v for k, v in enumerate(o)])
                    for ps, c, o in route.memory
                ]
                value = 1.0
            else:
                value = ratio
    schemas = [s.schema for s in route.slots]
    owner = prior_parent(route.owner_schema, split_parts(schemas, concat)).values
    owner[j] = value
    route.memory.append(([1.0] * route.arity, concat.tolist(), owner.tolist()))
    return value


def _insert_zeros(values: Sequence[float], positions: Sequence[int]) -> list[float]:
    out = list(values)
    for pos in sorted(positions):
        out.insert(pos, 0.0)
    return out


def add_attribute(
    network: CapsuleNetwork,
    capsule: str,
    spec: SlotSpec,
    scene: np.ndarray | None = None,
    cfg: AugmentConfig = AugmentConfig(),
    train_cfg: TrainConfig = DEFAULT_TRAIN,
    rng: np.random.Generator | None = None,
) -> list[str]:
    """Grow a capsule's schema (and every ancestor's) by one attribute.

    Every route whose owner or inputs changed is rebuilt at its new width
    with the stored memory zero-padded at the new slot; when a scene is
    given it is appended to the capsule's first route with the new
    attribute set to 1 (the initial binary contrast), and every rebuilt
    route with memory is retrained.
    """
    if capsule not in network.semantic:
        raise ValueError(f"unknown semantic capsule {capsule!r}")
    affected = {capsule}
    frontier = [capsule]
    while frontier:
        for parent in network.parents_of(frontier.pop()):
            if parent not in affected:
                affected.add(parent)
                frontier.append(parent)
    for name in affected:
        if spec.name in network.schema_of(name).names:
            raise ValueError(f"capsule {name!r} already has slot {spec.name!r}")
    for name in affected:
        caps = network.semantic[name]
        caps.schema = AttributeSchema(list(caps.schema.slots) + [spec])

    rebuilt: list[tuple[str, Route]] = []
    for name, caps in network.semantic.items():
        for i, route in enumerate(caps.routes):
            owner_grown = name in affected
            slots_grown = any(s.capsule in affected for s in route.slots)
            if not owner_grown and not slots_grown:
                continue
            old_spans = route.slot_offsets()
            new_slots = [
                RouteSlot(s.capsule, network.schema_of(s.capsule)) for s in route.slots
            ]
            # Where the new slot lands inside the concatenated input.
            inserted, shift = [], 0
            for old_slot, new_slot, (lo, hi) in zip(route.slots, new_slots, old_spans):
                if len(new_slot.schema) > len(old_slot.schema):
                    inserted.append(hi + shift)
                    shift += 1
            seed_id = _stable_seed(f"{name}/{route.id}/{spec.name}")
            fresh = make_route(
                network, route.id, [s.capsule for s in new_slots], caps.schema, seed_id
            )
            fresh.p_bar = list(route.p_bar)
            fresh._p_counts = list(route._p_counts)
            for ps, concat, owner in route.memory:
                grown_concat = _insert_zeros(concat, inserted)
                grown_owner = list(owner) + [0.0] if owner_grown else list(owner)
                fresh.memory.append((list(ps), grown_concat, grown_owner))
            caps.routes[i] = fresh
            rebuilt.append((name, fresh))

    if scene is not None:
        target = network.semantic[capsule].routes[0]
        schemas = [s.schema for s in target.slots]
        grown = network.schema_of(capsule)
        owner = prior_parent(grown, split_parts(schemas, scene)).values
        owner[grown.index(spec.name)] = 1.0
        target.memory.append(
            ([1.0] * target.arity, np.asarray(scene, dtype=float).tolist(), owner.tolist())
        )

    for name, route in rebuilt:
        if not route.memory:
            continue
        train_route(
            route,
            seeds_from_memory(route),
            cfg,
            train_cfg,
            rng,
            owner_overrides=owners_from_memory(route),
            override_names={spec.name} if spec.name in route.owner_schema.names else None,
        )
    return sorted(affected)


def apply_answer(
    network: CapsuleNetwork,
    question: OracleQuestion,
    answer: OracleAnswer,
    result: PassResult,
    cfg: AugmentConfig = AugmentConfig(),
    train_cfg: TrainConfig = DEFAULT_TRAIN,
    rng: np.random.Generator | None = None,
) -> str:
    """Mutate the network per one answer; returns the touched capsule."""
    if answer.action in ("A.1", "A.2"):
        parts = _resolve_parts(network, result, question, answer.parts)
        seeds = [np.concatenate([p.attrs.values for p in parts])]
        part_names = [p.capsule for p in parts]
        if answer.action == "A.2":
            name = answer.payload
            if name in network:
                raise ValueError(f"capsule {name!r} already exists")
            caps = SemanticCapsule(name, merged_schema(network, part_names))
            route = make_route(network, 0, part_names, caps.schema, _stable_seed(name))
            train_route(route, seeds, cfg, train_cfg, rng)
            network.add_semantic(caps)
            network.add_route(name, route)
            return name
        owner = answer.payload or question.candidate
        if owner not in network.semantic:
            raise ValueError(f"cannot add a route to unknown capsule {owner!r}")
        caps = network.semantic[owner]
        rid = max((r.id for r in caps.routes), default=-1) + 1
        route = make_route(network, rid, part_names, caps.schema, _stable_seed(f"{owner}/{rid}"))
        train_route(route, seeds, cfg, train_cfg, rng)
        network.add_route(owner, route)
        return owner

    if answer.action == "B.1":
        if ":" in answer.payload:
            cname, attr = answer.payload.split(":", 1)
        else:
            cname, attr = question.candidate, answer.payload
        if cname not in network.semantic:
            raise ValueError(f"no capsule to retrain for attribute {attr!r}")
        caps = network.semantic[cname]
        route = next(
            (r for r in caps.routes if r.id == question.candidate_route),
            caps.routes[0],
        )
        parts = _resolve_parts(network, result, question, answer.parts)
        concat = np.concatenate([p.attrs.values for p in parts])
        append_scaled_observation(route, attr, concat)
        train_route(
            route,
            seeds_from_memory(route),
            cfg,
            train_cfg,
            rng,
            owner_overrides=owners_from_memory(route),
            override_names={attr},
        )
        return cname

    # B.2: a new attribute on the candidate capsule and its ancestors.
    payload = answer.payload
    cls = "adjective"
    if ":" in payload:
        payload, cls = payload.split(":", 1)
    cname = question.candidate
    if cname is None:
        raise ValueError("no candidate capsule to extend with a new attribute")
    parts = _resolve_parts(network, result, question, answer.parts)
    route = network.semantic[cname].routes[0]
    expected = [s.capsule for s in route.slots]
    if sorted(p.capsule for p in parts) == sorted(expected):
        scene = np.concatenate(
            [p.attrs.values for p in sorted(parts, key=lambda e: expected.index(e.capsule))]
        )
    else:
        scene = None
    add_attribute(network, cname, SlotSpec(payload, cls), scene, cfg, train_cfg, rng)
    return cname


# ----------------------------------------------------------------------
# the meta-learning loop


@dataclass(frozen=True)
class PipelineStep:
    question: OracleQuestion
    answer: OracleAnswer
    source: str
    capsule: str


def learn_scene(
    network: CapsuleNetwork,
    tables: dict[str, list[ObservationEntry]],
    oracle=None,
    matrix: DecisionMatrix | None = None,
    threshold: float = DEFAULT_ACTIVATION_THRESHOLD,
    cfg: AugmentConfig = AugmentConfig(),
    train_cfg: TrainConfig = DEFAULT_TRAIN,
    tracked: frozenset[int] = frozenset(),
    autonomy: bool = False,
    max_rounds: int | None = None,
    rng: np.random.Generator | None = None,
    window: WindowConfig = DEFAULT_WINDOW,
) -> list[PipelineStep]:
    """Repeat propose/decide/apply until one axiom covers the scene.

    tables holds the primitive observations of a single frame; the network
    mutates in place.  Returns the steps taken (empty when the scene was
    already covered).  A deferred oracle answer stops the loop with the
    network untouched by that question.
    """
    steps: list[PipelineStep] = []
    rounds = 0
    while True:
        result = forward_pass(network, tables, activation_threshold=threshold, cfg=window)
        sub = forward_pass(
            network, tables, activation_threshold=0.0, cfg=window, update_stats=False
        )
        questions = detect_incomplete(
            network, result, sub, matrix, tracked, window, rng
        )
        if not questions:
            return steps
        if max_rounds is None:
            max_rounds = 2 * len(forest_entries(result)) + 2
        if rounds >= max_rounds:
            raise RuntimeError(
                f"scene did not reduce to a single axiom in {max_rounds} rounds"
            )
        question = replace(questions[0], qid=rounds)
        auto_name = f"object-{len(network.semantic) + 1}"
        answer, source = decide(
            question, matrix, oracle, autonomy, auto_name=auto_name
        )
        if answer is None:
            return steps
        capsule = apply_answer(network, question, answer, result, cfg, train_cfg, rng)
        steps.append(PipelineStep(question, answer, source, capsule))
        rounds += 1


# ----------------------------------------------------------------------
# parameterization audit


def decoder_image_sampler(decoder: RegressionModel):
    """Sampler over random sub-boxes of the decoder's input cube."""

    def sampler(rng: np.random.Generator, count: int) -> np.ndarray:
        lo = rng.random(decoder.input_dim) * 0.5
        width = 0.25 + 0.25 * rng.random()
        box = np.clip(lo + width * rng.random((count, decoder.input_dim)), 0.0, 1.0)
        return decoder.infer(box)

    return sampler


def parameterization_report(
    schema_dim: int,
    data=None,
    decoder: RegressionModel | None = None,
    rng: np.random.Generator | None = None,
    points_per_run: int = 400,
    runs: int = 32,
) -> dict:
    """Compare a capsule's effective dimension to its schema size.

    The effective dimension comes either from given observation data or
    from sampling the decoder's image.  More measured dimensions than
    slots means the capsule is underparameterized, fewer means slots are
    redundant, and anything within the tolerance counts as balanced.
    """
    if data is not None:
        est = cbc_dimension(np.asarray(data, dtype=float))
    elif decoder is not None:
        est = cbc_dimension_mc(
            decoder_image_sampler(decoder), points_per_run, runs, rng
        )
    else:
        raise ValueError("need observation data or a decoder to audit")
    diff = est - schema_dim
    if diff > PARAMETERIZATION_TOLERANCE:
        verdict = "under"
    elif diff < -PARAMETERIZATION_TOLERANCE:
        verdict = "over"
    else:
        verdict = "balance"
    return {"dim_cbc": float(est), "dim": int(schema_dim), "verdict": verdict}
