"""Learned interaction physics over parse trees.

The pieces, roughly in pipeline order: rendered surface distances between
subtrees, discovery of movable objects by sweeping verb slots through route
decoders, box-counting classification into rigid/static/jointed profiles,
sender-receiver interaction triplets, a relation net plus an anchored object
net trained from tracked frame sequences, and synthetic scene generators
that double as the training-data source.

Attribute deltas use dt = 1 (one frame) throughout. Velocities entering
features and targets are scaled by ``velocity_scale`` so that typical
per-frame motion lands in a range plain SGD handles well.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial.distance import cdist

from . import sdf
from .attributes import (
    AttributeSchema,
    AttributeVector,
    pose_schema,
    slot_difference,
)
from .capsnet import (
    CapsuleNetwork,
    ObservationEntry,
    ParseTree,
    forward_pass,
    render_tree,
)
from .dimension import cbc_dimension, normalize_cloud
from .mlp import RegressionModel, TrainConfig, train

VELOCITY_SCALE = 20.0
# Aggregated effects below this (scaled) magnitude are numerical leakage of
# the relation net, not contacts; zeroing them keeps free flight exact.
EFFECT_FLOOR = 0.05
CONTACT_EPS = 2.0 / 112.0
DIM_TOLERANCE = 0.25
NOISE_FLOOR = 0.02
RADIUS_FACTOR = 4.0


# ----------------------------------------------------------------------
# scene state


@dataclass
class BodyState:
    """One object in one frame: its parse subtree plus the external force
    (fx, fy, torque) acting on the transition out of this frame."""

    oid: int
    tree: ParseTree
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.force = np.asarray(self.force, dtype=float)
        if self.force.shape != (3,):
            raise ValueError("force must be (fx, fy, torque)")

    @property
    def symbol(self) -> str:
        return self.tree.capsule

    @property
    def values(self) -> np.ndarray:
        return self.tree.attrs.values


def sequence_to_json(frames: list[list[BodyState]]) -> dict:
    return {
        "v": 1,
        "frames": [
            [
                {"oid": b.oid, "force": b.force.tolist(), "tree": b.tree.to_json()}
                for b in frame
            ]
            for frame in frames
        ],
    }


def sequence_from_json(data: dict) -> list[list[BodyState]]:
    if data.get("v") != 1:
        raise ValueError(f"unsupported sequence payload version {data.get('v')!r}")
    return [
        [
            BodyState(row["oid"], ParseTree.from_json(row["tree"]), row["force"])
            for row in frame
        ]
        for frame in data["frames"]
    ]


def circle_tree(x: float, y: float, r: float, intensity: float = 0.9,
                name: str = "circle") -> ParseTree:
    vals = np.clip([x, y, 0.0, 2 * r, 2 * r, intensity], 0.0, 1.0)
    return ParseTree(name, AttributeVector(pose_schema(), vals), 1.0)


def lobe_axis(rot: float) -> np.ndarray:
    """Unit direction along a two-lobe body's long axis, rot in turns."""
    a = 2 * math.pi * rot
    return np.array([-math.sin(a), math.cos(a)])


def lobe_centers(x: float, y: float, rot: float, w: float, h: float) -> np.ndarray:
    off = (h - w) / 2.0 * lobe_axis(rot)
    c = np.array([x, y])
    return np.stack([c + off, c - off])


def eight_tree(symbol: str, x: float, y: float, rot: float, w: float, h: float,
               intensity: float = 0.9, lobe: str = "circle",
               route_id: int | None = 0) -> ParseTree:
    """Figure-eight subtree: two tangent discs of diameter w along the axis.

    h is the overall length; h = 2w makes the lobes exactly tangent.
    """
    schema = pose_schema()
    rot = rot % 1.0
    root = AttributeVector(schema, np.clip([x, y, rot, w, h, intensity], 0, 1))
    kids = []
    for cx, cy in lobe_centers(x, y, rot, w, h):
        vals = np.clip([cx, cy, rot, w, w, intensity], 0.0, 1.0)
        kids.append(ParseTree(lobe, AttributeVector(schema, vals), 1.0))
    return ParseTree(symbol, root, 1.0, route_id, kids)


# ----------------------------------------------------------------------
# rendered surface distance


def _lit_points(frame: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """(mask, boundary points in scene units) of a rendered frame."""
    mask = frame > sdf.LIT_THRESHOLD
    if not mask.any():
        raise ValueError("subtree renders no lit pixels")
    border = mask & ~binary_erosion(mask)
    if not border.any():
        border = mask
    rows, cols = np.nonzero(border)
    pts = np.stack([(cols + 0.5) / resolution, (rows + 0.5) / resolution], axis=1)
    return mask, pts


def _surface_normal(network: CapsuleNetwork, tree: ParseTree, point: np.ndarray) -> np.ndarray:
    """Outward normal of the leaf whose boundary is closest to the point."""
    best, best_leaf = None, None
    for leaf in tree.leaves():
        kind = network.primitives[leaf.capsule].kind
        x, y, rot, w, h, _ = leaf.attrs.values
        d = float(sdf.shape_sdf(kind, point[0], point[1], x, y, rot, w, h))
        if best is None or d < best:
            best, best_leaf = d, leaf
    kind = network.primitives[best_leaf.capsule].kind
    x, y, rot, w, h, _ = best_leaf.attrs.values
    return sdf.sdf_gradient(kind, point[0], point[1], x, y, rot, w, h)


def _pair_distance(
    network: CapsuleNetwork,
    tree_a: ParseTree,
    tree_b: ParseTree,
    rendered_a: tuple[np.ndarray, np.ndarray],
    rendered_b: tuple[np.ndarray, np.ndarray],
) -> tuple[float, np.ndarray, np.ndarray]:
    mask_a, pts_a = rendered_a
    mask_b, pts_b = rendered_b
    res = mask_a.shape[0]
    shared = mask_a & mask_b
    if shared.any():
        row, col = np.argwhere(shared)[0]
        p = np.array([(col + 0.5) / res, (row + 0.5) / res])
        return 0.0, _surface_normal(network, tree_a, p), _surface_normal(network, tree_b, p)
    d = cdist(pts_a, pts_b)
    dmin = float(d.min())
    # The minimizing pixel pair wobbles within a quantization band; the
    # centroid of all near-minimal pixels per side steadies it, and both
    # normals are read at the segment midpoint, where the field gradients
    # are least sensitive to that wobble.
    near = d <= dmin + 3.0 / res
    pa = pts_a[near.any(axis=1)].mean(axis=0)
    pb = pts_b[near.any(axis=0)].mean(axis=0)
    mid = (pa + pb) / 2.0
    return (
        dmin,
        _surface_normal(network, tree_a, mid),
        _surface_normal(network, tree_b, mid),
    )


def min_distance(
    network: CapsuleNetwork,
    tree_a: ParseTree,
    tree_b: ParseTree,
    resolution: int = 112,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Minimum surface distance between two rendered subtrees.

    Each subtree renders alone; overlap of lit pixels gives distance zero,
    otherwise the closest boundary-pixel pair decides. Returns the distance
    in scene units and the outward surface normals at the two minimizing
    points. Raises ValueError when a subtree renders nothing.
    """
    ra = _lit_points(render_tree(network, tree_a, resolution), resolution)
    rb = _lit_points(render_tree(network, tree_b, resolution), resolution)
    return _pair_distance(network, tree_a, tree_b, ra, rb)


# ----------------------------------------------------------------------
# rigid subtree posing


def transform_subtree(tree: ParseTree, new_root) -> ParseTree:
    """Re-pose a whole subtree from new root attributes.

    Leaf offsets rotate with the root's rotation delta and scale with the
    mean size ratio; leaf rotation slots shift by the same delta. Non-pose
    slots are left alone. Positions clamp to the canvas.
    """
    schema = tree.attrs.schema
    if isinstance(new_root, AttributeVector):
        new_vals = new_root.values
    else:
        new_vals = np.clip(np.asarray(new_root, dtype=float), 0.0, 1.0)
    old_vals = tree.attrs.values
    pos = list(schema.indices_of("position")[:2])
    rots = schema.indices_of("rotation")
    sizes = schema.indices_of("size")

    old_c = old_vals[pos] if len(pos) == 2 else np.zeros(2)
    new_c = new_vals[pos] if len(pos) == 2 else np.zeros(2)
    old_rot = float(old_vals[rots[0]]) if rots else 0.0
    new_rot = float(new_vals[rots[0]]) if rots else 0.0
    d_rot = new_rot - old_rot
    ratios = [new_vals[i] / old_vals[i] for i in sizes if old_vals[i] > 1e-9]
    scale = float(np.mean(ratios)) if ratios else 1.0

    a_old = 2 * math.pi * old_rot
    a_new = 2 * math.pi * new_rot
    undo = np.array([[math.cos(-a_old), -math.sin(-a_old)],
                     [math.sin(-a_old), math.cos(-a_old)]])
    redo = np.array([[math.cos(a_new), -math.sin(a_new)],
                     [math.sin(a_new), math.cos(a_new)]])

    def move(node: ParseTree) -> ParseTree:
        s = node.attrs.schema
        vals = node.attrs.values.copy()
        npos = list(s.indices_of("position")[:2])
        if len(npos) == 2:
            local = undo @ (vals[npos] - old_c)
            vals[npos] = np.clip(new_c + redo @ (local * scale), 0.0, 1.0)
        for i in s.indices_of("rotation"):
            vals[i] = (vals[i] + d_rot) % 1.0
        for i in s.indices_of("size"):
            vals[i] = np.clip(vals[i] * scale, 0.0, 1.0)
        kids = [move(c) for c in node.children]
        return ParseTree(node.capsule, AttributeVector(s, vals), node.p,
                         node.route_id, kids)

    moved = move(tree)
    return ParseTree(tree.capsule, AttributeVector(schema, new_vals), tree.p,
                     tree.route_id, moved.children)


# ----------------------------------------------------------------------
# interactable discovery and interaction spaces


@dataclass
class InteractionSpaces:
    """Sampled configuration clouds for a set of objects.

    sizes[i] and poses[i] hold one row per sample; relative[(i, j)] holds
    receiver-frame offsets (dx, dy, drot) and distances[(i, j)] rendered
    surface gaps for object pairs.
    """

    objects: dict[int, ParseTree] = field(default_factory=dict)
    symbols: dict[int, str] = field(default_factory=dict)
    sizes: dict[int, np.ndarray] = field(default_factory=dict)
    poses: dict[int, np.ndarray] = field(default_factory=dict)
    relative: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    distances: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)


def _has_verbs(schema: AttributeSchema) -> bool:
    return bool(schema.indices_of("verb"))


def _subtree_has_verbs(node: ParseTree) -> bool:
    if _has_verbs(node.attrs.schema):
        return True
    return any(_subtree_has_verbs(c) for c in node.children)


def scene_objects(trees: list[ParseTree]) -> list[tuple[ParseTree, list[tuple[ParseTree, int]]]]:
    """Movable bodies of a parse forest.

    Verb-free subtrees count whole; anything under a verb-bearing node
    splits into that node's children, recursively. Returns (subtree, chain)
    pairs where chain lists (ancestor, child index) hops from the root.
    """
    out = []

    def visit(node: ParseTree, chain: list) -> None:
        if not _subtree_has_verbs(node):
            out.append((node, chain))
            return
        for i, child in enumerate(node.children):
            visit(child, chain + [(node, i)])

    for root in trees:
        visit(root, [])
    return out


def _route_of(network: CapsuleNetwork, node: ParseTree):
    caps = network.semantic[node.capsule]
    if node.route_id is not None:
        for r in caps.routes:
            if r.id == node.route_id:
                return r
    if not caps.routes:
        raise ValueError(f"capsule {node.capsule!r} has no routes")
    return caps.routes[0]


def _match_slots(network: CapsuleNetwork, node: ParseTree) -> list[int]:
    """Route slot index for each child, matched at the observed attributes.

    Children of the same capsule are assigned jointly by least total
    attribute distance; route slot order and child drawing order differ.
    """
    route = _route_of(network, node)
    decoded = np.clip(route.decoder.infer(node.attrs.values), 0.0, 1.0)
    spans = route.slot_offsets()
    best_perm, best_cost = None, None
    candidates = []
    for child in node.children:
        candidates.append([k for k, s in enumerate(route.slots) if s.capsule == child.capsule])
    for perm in itertools.product(*candidates):
        if len(set(perm)) != len(perm):
            continue
        cost = 0.0
        for child, k in zip(node.children, perm):
            lo, hi = spans[k]
            cost += float(np.abs(decoded[lo:hi] - child.attrs.values).sum())
        if best_cost is None or cost < best_cost:
            best_cost, best_perm = cost, perm
    if best_perm is None:
        raise ValueError(f"children of {node.capsule!r} do not match its route slots")
    return list(best_perm)


def _sweep(network: CapsuleNetwork, chain: list[tuple[ParseTree, int]],
           slot_maps: dict[int, list[int]], verbs: dict[int, np.ndarray]) -> np.ndarray:
    """Attributes of the chain's endpoint with ancestor verbs overridden."""
    top, _ = chain[0]
    vals = top.attrs.values.copy()
    node = top
    for anc, child_idx in chain:
        override = verbs.get(id(anc))
        if override is not None:
            vi = list(anc.attrs.schema.indices_of("verb"))
            vals = vals.copy()
            vals[vi] = override
        route = _route_of(network, anc)
        lo, hi = route.slot_offsets()[slot_maps[id(anc)][child_idx]]
        vals = np.clip(route.decoder.infer(np.clip(vals, 0.0, 1.0)), 0.0, 1.0)[lo:hi]
        node = anc.children[child_idx]
    return vals


def _pose_columns(schema: AttributeSchema, vals: np.ndarray) -> np.ndarray:
    pos = list(schema.indices_of("position")[:2])
    rots = schema.indices_of("rotation")
    rot = vals[rots[0]] if rots else 0.0
    return np.array([*(vals[pos] if len(pos) == 2 else (0.0, 0.0)), rot])


def _relative_pose(pose_i: np.ndarray, pose_j: np.ndarray) -> np.ndarray:
    a = -2 * math.pi * pose_i[2]
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    dxy = rot @ (pose_j[:2] - pose_i[:2])
    drot = (pose_j[2] - pose_i[2] + 0.5) % 1.0 - 0.5
    return np.array([dxy[0], dxy[1], drot])


def find_interactables(
    network: CapsuleNetwork,
    trees: list[ParseTree],
    samples: int = 600,
    pair_samples: int = 20,
    resolution: int = 112,
    rng: np.random.Generator | None = None,
) -> InteractionSpaces:
    """Objects that verb-bearing ancestors can move, with their swept spaces.

    Verb slots of every ancestor on an object's chain are sampled uniformly
    and pushed through the route decoders; the resulting size and pose
    clouds (and, for pairs under a common root, relative poses and rendered
    distances) feed the physical-property classifier. A forest without
    verbs yields no interactables.
    """
    rng = rng or np.random.default_rng(0)
    spaces = InteractionSpaces()
    spots = []
    for node, chain in scene_objects(trees):
        if any(_has_verbs(anc.attrs.schema) for anc, _ in chain):
            spots.append((node, chain))
    if not spots:
        return spaces

    slot_maps: dict[int, list[int]] = {}
    for _, chain in spots:
        for anc, _ in chain:
            if id(anc) not in slot_maps:
                slot_maps[id(anc)] = _match_slots(network, anc)

    def draw_verbs(nodes: list[ParseTree]) -> dict[int, np.ndarray]:
        out = {}
        for n in nodes:
            k = len(n.attrs.schema.indices_of("verb"))
            if k:
                out[id(n)] = rng.uniform(0.0, 1.0, k)
        return out

    for oid, (node, chain) in enumerate(spots):
        spaces.objects[oid] = node
        spaces.symbols[oid] = node.capsule
        verb_nodes = [anc for anc, _ in chain]
        schema = node.attrs.schema
        size_rows, pose_rows = [], []
        for _ in range(samples):
            vals = _sweep(network, chain, slot_maps, draw_verbs(verb_nodes))
            size_rows.append(vals[list(schema.indices_of("size"))])
            pose_rows.append(_pose_columns(schema, vals))
        spaces.sizes[oid] = np.array(size_rows)
        spaces.poses[oid] = np.array(pose_rows)

    ids = sorted(spaces.objects)
    for i, j in itertools.combinations(ids, 2):
        node_i, chain_i = spots[i]
        node_j, chain_j = spots[j]
        if not chain_i or not chain_j or chain_i[0][0] is not chain_j[0][0]:
            continue
        verb_nodes = [a for a, _ in chain_i] + [a for a, _ in chain_j]
        rel_rows, dist_rows = [], []
        for k in range(samples):
            verbs = draw_verbs(verb_nodes)
            vi = _sweep(network, chain_i, slot_maps, verbs)
            vj = _sweep(network, chain_j, slot_maps, verbs)
            pi = _pose_columns(node_i.attrs.schema, vi)
            pj = _pose_columns(node_j.attrs.schema, vj)
            rel_rows.append(_relative_pose(pi, pj))
            if k < pair_samples:
                d, _, _ = min_distance(
                    network,
                    transform_subtree(node_i, vi),
                    transform_subtree(node_j, vj),
                    resolution,
                )
                dist_rows.append(d)
        spaces.relative[(i, j)] = np.array(rel_rows)
        spaces.distances[(i, j)] = np.array(dist_rows)
    return spaces


def observed_spaces(
    network: CapsuleNetwork,
    frames: list[list[BodyState]],
    pair_samples: int = 20,
    resolution: int = 112,
) -> InteractionSpaces:
    """The same configuration clouds, but read off a tracked sequence."""
    spaces = InteractionSpaces()
    per_oid: dict[int, list[BodyState]] = {}
    together: dict[tuple[int, int], list[int]] = {}
    for t, frame in enumerate(frames):
        ids = sorted(b.oid for b in frame)
        for b in frame:
            per_oid.setdefault(b.oid, []).append(b)
        for i, j in itertools.combinations(ids, 2):
            together.setdefault((i, j), []).append(t)

    for oid, states in sorted(per_oid.items()):
        schema = states[-1].tree.attrs.schema
        spaces.objects[oid] = states[-1].tree
        spaces.symbols[oid] = states[-1].symbol
        spaces.sizes[oid] = np.array(
            [s.values[list(schema.indices_of("size"))] for s in states]
        )
        spaces.poses[oid] = np.array(
            [_pose_columns(schema, s.values) for s in states]
        )

    by_frame = [{b.oid: b for b in frame} for frame in frames]
    for (i, j), ts in sorted(together.items()):
        rel = []
        for t in ts:
            bi, bj = by_frame[t][i], by_frame[t][j]
            rel.append(
                _relative_pose(
                    _pose_columns(bi.tree.attrs.schema, bi.values),
                    _pose_columns(bj.tree.attrs.schema, bj.values),
                )
            )
        spaces.relative[(i, j)] = np.array(rel)
        step = max(1, len(ts) // max(1, pair_samples))
        dist = []
        for t in ts[::step][:pair_samples]:
            d, _, _ = min_distance(
                network, by_frame[t][i].tree, by_frame[t][j].tree, resolution
            )
            dist.append(d)
        spaces.distances[(i, j)] = np.array(dist)
    return spaces


# ----------------------------------------------------------------------
# physical properties


@dataclass(frozen=True)
class JointLink:
    partner: int
    dof: int


@dataclass
class PhysicalProfile:
    oid: int
    symbol: str
    rigid: bool = True
    static: bool = False
    dof: int = 0
    joints: tuple[JointLink, ...] = ()

    @property
    def dynamic(self) -> bool:
        return not self.static


def _cloud_dimension(cloud: np.ndarray, noise_floor: float) -> float:
    cloud = np.asarray(cloud, dtype=float)
    if cloud.ndim == 1:
        cloud = cloud[:, None]
    if len(cloud) < 2:
        return 0.0
    extent = float((cloud.max(axis=0) - cloud.min(axis=0)).max())
    if extent < noise_floor:
        return 0.0
    return cbc_dimension(normalize_cloud(cloud))


def classify_properties(
    spaces: InteractionSpaces,
    dim_tolerance: float = DIM_TOLERANCE,
    contact_eps: float = CONTACT_EPS,
    noise_floor: float = NOISE_FLOOR,
) -> dict[int, PhysicalProfile]:
    """Rigid/static/joint decisions from configuration-cloud dimensions.

    An object is rigid when its size cloud has dimension within tolerance
    of zero, static when its pose cloud does; its degrees of freedom are
    the rounded pose-cloud dimension. A pair whose sampled surface distance
    never leaves contact while its relative pose still moves on a proper
    submanifold is reported as a joint on both partners.
    """
    profiles: dict[int, PhysicalProfile] = {}
    joint_map: dict[int, list[JointLink]] = {oid: [] for oid in spaces.objects}
    for pair, dists in sorted(spaces.distances.items()):
        if len(dists) == 0 or dists.max() >= contact_eps:
            continue
        rel = spaces.relative.get(pair)
        if rel is None or len(rel) < 2:
            continue
        dim_rel = _cloud_dimension(rel, noise_floor)
        if dim_tolerance < dim_rel < rel.shape[1] - dim_tolerance:
            dof = int(round(dim_rel))
            i, j = pair
            joint_map[i].append(JointLink(j, dof))
            joint_map[j].append(JointLink(i, dof))
    for oid in sorted(spaces.objects):
        dim_s = _cloud_dimension(spaces.sizes[oid], noise_floor)
        dim_q = _cloud_dimension(spaces.poses[oid], noise_floor)
        static = dim_q <= dim_tolerance
        profiles[oid] = PhysicalProfile(
            oid,
            spaces.symbols[oid],
            rigid=dim_s <= dim_tolerance,
            static=static,
            dof=0 if static else int(round(dim_q)),
            joints=tuple(joint_map[oid]),
        )
    return profiles


def default_profile(oid: int, symbol: str) -> PhysicalProfile:
    return PhysicalProfile(oid, symbol, rigid=True, static=False, dof=2)


# ----------------------------------------------------------------------
# feature context and triplets


@dataclass(frozen=True)
class PhysicsContext:
    """Fixed feature vocabulary for one scene family.

    symbols and the union schema pin the one-hot and slot layout, so the
    same trained nets read frames from any scene in the family.
    """

    symbols: tuple[str, ...]
    schema: AttributeSchema
    velocity_scale: float = VELOCITY_SCALE

    @property
    def block_size(self) -> int:
        return len(self.symbols) + 2 * len(self.schema) + 4

    @property
    def feature_size(self) -> int:
        return 2 * self.block_size + 6

    def one_hot(self, symbol: str) -> np.ndarray:
        out = np.zeros(len(self.symbols))
        out[self.symbols.index(symbol)] = 1.0
        return out

    def align(self, schema: AttributeSchema, values: np.ndarray) -> np.ndarray:
        out = np.zeros(len(self.schema))
        for k, name in enumerate(schema.names):
            out[self.schema.index(name)] = values[k]
        return out

    def unalign(self, schema: AttributeSchema, aligned: np.ndarray) -> np.ndarray:
        return np.array([aligned[self.schema.index(n)] for n in schema.names])

    def force_delta(self, force: np.ndarray) -> np.ndarray:
        """Aligned per-slot velocity change of a unit-mass (fx, fy, torque)."""
        out = np.zeros(len(self.schema))
        pos = self.schema.indices_of("position")[:2]
        out[pos[0]] = force[0]
        out[pos[1]] = force[1]
        rots = self.schema.indices_of("rotation")
        if rots:
            out[rots[0]] = force[2]
        return out

    def to_json(self) -> dict:
        return {
            "symbols": list(self.symbols),
            "schema": self.schema.to_json(),
            "velocity_scale": self.velocity_scale,
        }

    @classmethod
    def from_json(cls, data: dict) -> "PhysicsContext":
        return cls(
            tuple(data["symbols"]),
            AttributeSchema.from_json(data["schema"]),
            float(data["velocity_scale"]),
        )


def physics_context(network: CapsuleNetwork, velocity_scale: float = VELOCITY_SCALE) -> PhysicsContext:
    names = sorted(set(network.primitives) | set(network.semantic))
    schema = pose_schema()
    for name in names:
        schema = schema.merge(network.schema_of(name))
    return PhysicsContext(tuple(names), schema, velocity_scale)


def context_from_sequences(
    sequences: list[list[list[BodyState]]], velocity_scale: float = VELOCITY_SCALE
) -> PhysicsContext:
    """Context for frames whose capsules may not all live in one network."""
    names: set[str] = set()
    schema = pose_schema()
    for seq in sequences:
        for frame in seq:
            for b in frame:
                if b.symbol not in names:
                    names.add(b.symbol)
                    schema = schema.merge(b.tree.attrs.schema)
    return PhysicsContext(tuple(sorted(names)), schema, velocity_scale)


@dataclass
class InteractionTriplet:
    """Sender-object, receiver-object and their relation, feature-ready.

    Block layout per object: one-hot symbol, aligned attributes, scaled
    slot velocities, static/dynamic one-hot, rigid/elastic one-hot. The
    relation is (distance, joint flag, sender normal, receiver normal).
    """

    sender: int
    receiver: int
    sender_block: np.ndarray
    receiver_block: np.ndarray
    relation: np.ndarray

    def features(self) -> np.ndarray:
        return np.concatenate([self.sender_block, self.receiver_block, self.relation])


def _object_block(
    context: PhysicsContext,
    symbol: str,
    aligned: np.ndarray,
    scaled_vel: np.ndarray,
    profile: PhysicalProfile,
) -> np.ndarray:
    flags = np.array(
        [
            1.0 if profile.static else 0.0,
            0.0 if profile.static else 1.0,
            1.0 if profile.rigid else 0.0,
            0.0 if profile.rigid else 1.0,
        ]
    )
    return np.concatenate([context.one_hot(symbol), aligned, scaled_vel, flags])


def interaction_radius(frame: list[BodyState], factor: float = RADIUS_FACTOR) -> float:
    best = 0.0
    for b in frame:
        sizes = b.tree.attrs.schema.indices_of("size")
        if sizes:
            best = max(best, float(b.values[list(sizes)].max()))
    return factor * best if best > 0 else math.inf


def build_triplets(
    network: CapsuleNetwork,
    context: PhysicsContext,
    previous: list[list | BodyState] | list[BodyState],
    current: list[BodyState],
    profiles: dict[int, PhysicalProfile] | None = None,
    radius: float | None = None,
    resolution: int = 160,
) -> list[InteractionTriplet]:
    """All ordered sender/receiver pairs within the interaction radius.

    Velocities come from the previous frame (zero for newcomers); the
    radius defaults to RADIUS_FACTOR times the largest object size in the
    current frame; pass math.inf to disable gating. Surface distances are
    rendered once per unordered pair.
    """
    if radius is None:
        radius = interaction_radius(current)
    prev_by = {b.oid: b for b in previous}
    profiles = profiles or {}
    bodies = sorted(current, key=lambda b: b.oid)

    aligned: dict[int, np.ndarray] = {}
    vel: dict[int, np.ndarray] = {}
    blocks: dict[int, np.ndarray] = {}
    centers: dict[int, np.ndarray] = {}
    for b in bodies:
        schema = b.tree.attrs.schema
        cur = context.align(schema, b.values)
        aligned[b.oid] = cur
        prev = prev_by.get(b.oid)
        if prev is None:
            v = np.zeros(len(context.schema))
        else:
            v = context.velocity_scale * slot_difference(
                context.schema, context.align(schema, prev.values), cur
            )
        vel[b.oid] = v
        prof = profiles.get(b.oid) or default_profile(b.oid, b.symbol)
        blocks[b.oid] = _object_block(context, b.symbol, cur, v, prof)
        pos = list(context.schema.indices_of("position")[:2])
        centers[b.oid] = cur[pos]

    rendered: dict[int, tuple] = {}
    pair_cache: dict[tuple[int, int], tuple] = {}
    out = []
    for s in bodies:
        for r in bodies:
            if s.oid == r.oid:
                continue
            if float(np.hypot(*(centers[s.oid] - centers[r.oid]))) > radius:
                continue
            key = (min(s.oid, r.oid), max(s.oid, r.oid))
            if key not in pair_cache:
                for b in (s, r):
                    if b.oid not in rendered:
                        rendered[b.oid] = _lit_points(
                            render_tree(network, b.tree, resolution), resolution
                        )
                lo, hi = (s, r) if s.oid < r.oid else (r, s)
                pair_cache[key] = _pair_distance(
                    network, lo.tree, hi.tree, rendered[lo.oid], rendered[hi.oid]
                )
            d, n_lo, n_hi = pair_cache[key]
            n_s, n_r = (n_lo, n_hi) if s.oid < r.oid else (n_hi, n_lo)
            prof_r = profiles.get(r.oid)
            joint = 0.0
            if prof_r and any(j.partner == s.oid for j in prof_r.joints):
                joint = 1.0
            out.append(
                InteractionTriplet(
                    s.oid,
                    r.oid,
                    blocks[s.oid],
                    blocks[r.oid],
                    np.array([d, joint, *n_s, *n_r]),
                )
            )
    out.sort(key=lambda t: (t.sender, t.receiver))
    return out


# ----------------------------------------------------------------------
# models


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=float)
        sd = x.std(axis=0)
        # Near-constant columns pass through unscaled; a tiny std would
        # explode any off-distribution value at inference time.
        sd = np.where(sd < 1e-8, 1.0, sd)
        return cls(x.mean(axis=0), sd)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def reverse(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "Standardizer":
        return cls(np.asarray(data["mean"]), np.asarray(data["std"]))


@dataclass
class PhysicsTrainReport:
    sequences: int
    transitions: int
    relation_samples: int
    object_samples: int
    relation_loss: float
    object_loss: float


@dataclass
class PhysicsModels:
    """Trained relation and object nets plus everything needed to run them."""

    context: PhysicsContext
    relation_net: RegressionModel
    object_net: RegressionModel
    relation_in: Standardizer
    relation_out: Standardizer
    object_in: Standardizer
    object_out: Standardizer
    radius: float | None
    resolution: int
    effect_floor: float
    report: PhysicsTrainReport

    def relation_effect(self, features: np.ndarray) -> np.ndarray:
        return self.relation_out.reverse(
            self.relation_net.infer(self.relation_in.forward(features))
        )

    def next_velocity(
        self, receiver_block: np.ndarray, scaled_vel: np.ndarray,
        effect: np.ndarray, force: np.ndarray,
    ) -> np.ndarray:
        """Anchored object-net step: exact ballistics when nothing acts.

        The net is evaluated against its own zero-effect baseline, so free
        flight integrates without accumulating regression bias.
        """
        force_feat = self.context.velocity_scale * np.asarray(force, dtype=float)
        if not effect.any() and not force_feat.any():
            return scaled_vel
        x1 = np.concatenate([receiver_block, effect, force_feat])
        x0 = np.concatenate([receiver_block, np.zeros_like(effect), np.zeros(3)])
        d1 = self.object_out.reverse(self.object_net.infer(self.object_in.forward(x1)))
        d0 = self.object_out.reverse(self.object_net.infer(self.object_in.forward(x0)))
        return scaled_vel + (d1 - d0)

    def to_json(self) -> dict:
        return {
            "v": 1,
            "context": self.context.to_json(),
            "relation_net": self.relation_net.to_json(),
            "object_net": self.object_net.to_json(),
            "relation_in": self.relation_in.to_json(),
            "relation_out": self.relation_out.to_json(),
            "object_in": self.object_in.to_json(),
            "object_out": self.object_out.to_json(),
            "radius": None if self.radius is None else
                      ("inf" if math.isinf(self.radius) else self.radius),
            "resolution": self.resolution,
            "effect_floor": self.effect_floor,
            "report": self.report.__dict__,
        }

    @classmethod
    def from_json(cls, data: dict) -> "PhysicsModels":
        if data.get("v") != 1:
            raise ValueError(f"unsupported model payload version {data.get('v')!r}")
        radius = data["radius"]
        if radius == "inf":
            radius = math.inf
        return cls(
            PhysicsContext.from_json(data["context"]),
            RegressionModel.from_json(data["relation_net"]),
            RegressionModel.from_json(data["object_net"]),
            Standardizer.from_json(data["relation_in"]),
            Standardizer.from_json(data["relation_out"]),
            Standardizer.from_json(data["object_in"]),
            Standardizer.from_json(data["object_out"]),
            radius,
            int(data["resolution"]),
            float(data["effect_floor"]),
            PhysicsTrainReport(**data["report"]),
        )


# ----------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainPhysicsConfig:
    relation_stages: tuple[tuple[int, float], ...] = ((500, 0.1), (300, 0.03), (150, 0.01))
    relation_batch: int = 128
    relation_width: int = 64
    relation_layers: int = 6
    # Impulse laws hinge on velocity-times-normal products; the default
    # small init puts those on a flat plateau, a hotter first layer does not.
    relation_gain: float = 1.0
    object_stages: tuple[tuple[int, float], ...] = ((500, 0.08), (200, 0.02))
    object_batch: int = 64
    object_width: int = 32
    object_layers: int = 2
    boost: int = 4
    augmentations: int = 10
    contact_gap: float = 0.04
    shift: float = 0.12


def _feature_indexer(context: PhysicsContext):
    """Index bundles into a triplet feature vector, for augmentation."""
    s = len(context.symbols)
    a = len(context.schema)
    b = context.block_size
    pos = list(context.schema.indices_of("position")[:2])
    rots = list(context.schema.indices_of("rotation"))
    bundles = {
        "pos_pairs": [],
        "vel_pairs": [],
        "rot_slots": [],
        "rot_vel": [],
        "normal_pairs": [],
    }
    for base in (0, b):
        at = base + s
        bundles["pos_pairs"].append([at + pos[0], at + pos[1]])
        bundles["vel_pairs"].append([at + a + pos[0], at + a + pos[1]])
        bundles["rot_slots"].extend(at + i for i in rots)
        bundles["rot_vel"].extend(at + a + i for i in rots)
    bundles["normal_pairs"].append([2 * b + 2, 2 * b + 3])
    bundles["normal_pairs"].append([2 * b + 4, 2 * b + 5])
    bundles["target_pos"] = pos
    bundles["target_rot"] = rots
    bundles["distance"] = 2 * b
    return bundles


def _augment_pair(
    feat: np.ndarray, target: np.ndarray, ix: dict, rng: np.random.Generator,
    shift: float,
) -> tuple[np.ndarray, np.ndarray] | None:
    """One rigid-motion copy of a relation sample, or None when it would
    push a body off the canvas. Mirroring is applied only to samples with
    no rotational content since reflected orientations are shape-specific.
    """
    f = feat.copy()
    t = target.copy()
    a = rng.uniform(0.0, 2 * math.pi)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    pivot = rng.uniform(0.3, 0.7, 2)
    delta = rng.uniform(-shift, shift, 2)

    rotational = (
        any(abs(f[i]) > 1e-9 for i in ix["rot_slots"])
        or any(abs(f[i]) > 1e-9 for i in ix["rot_vel"])
        or any(abs(t[i]) > 1e-9 for i in ix["target_rot"])
    )
    mirror = (not rotational) and rng.random() < 0.5
    flip = np.array([[1.0, 0.0], [0.0, -1.0]])

    def vec_map(v):
        v = rot @ v
        return flip @ v if mirror else v

    for p in ix["pos_pairs"]:
        moved = vec_map(f[p] - pivot) + pivot + delta
        if moved.min() < 0.04 or moved.max() > 0.96:
            return None
        f[p] = moved
    for p in ix["vel_pairs"]:
        f[p] = vec_map(f[p])
    for p in ix["normal_pairs"]:
        f[p] = vec_map(f[p])
    turn = a / (2 * math.pi)
    for i in ix["rot_slots"]:
        f[i] = (f[i] + turn) % 1.0
    tp = ix["target_pos"]
    t[tp] = vec_map(t[tp])
    return f, t


def _training_arrays(
    network: CapsuleNetwork,
    context: PhysicsContext,
    sequences: list[list[list[BodyState]]],
    profiles_by_seq: list[dict[int, PhysicalProfile]],
    cfg: TrainPhysicsConfig,
    radius: float | None,
    resolution: int,
    rng: np.random.Generator,
):
    ix = _feature_indexer(context)
    scale = context.velocity_scale
    a = len(context.schema)
    rel_x: list[np.ndarray] = []
    rel_y: list[np.ndarray] = []
    obj_x: list[np.ndarray] = []
    obj_y: list[np.ndarray] = []
    transitions = 0
    motion = 0.0

    def emit_relation(feat, target):
        rel_x.append(feat)
        rel_y.append(target)

    def emit_hot(feat, target):
        for _ in range(cfg.boost):
            emit_relation(feat, target)
        for _ in range(cfg.augmentations):
            copy = _augment_pair(feat, target, ix, rng, cfg.shift)
            if copy is not None:
                emit_relation(*copy)

    for seq, profiles in zip(sequences, profiles_by_seq):
        for t in range(1, len(seq) - 1):
            prev, cur, nxt = seq[t - 1], seq[t], seq[t + 1]
            triplets = build_triplets(
                network, context, prev, cur, profiles, radius, resolution
            )
            by_receiver: dict[int, list[InteractionTriplet]] = {}
            for trip in triplets:
                by_receiver.setdefault(trip.receiver, []).append(trip)
            prev_by = {b.oid: b for b in prev}
            nxt_by = {b.oid: b for b in nxt}
            for body in sorted(cur, key=lambda b: b.oid):
                if body.oid not in prev_by or body.oid not in nxt_by:
                    continue
                schema = body.tree.attrs.schema
                al_prev = context.align(schema, prev_by[body.oid].values)
                al_cur = context.align(schema, body.values)
                al_nxt = context.align(schema, nxt_by[body.oid].values)
                vel = scale * slot_difference(context.schema, al_prev, al_cur)
                vel_next = scale * slot_difference(context.schema, al_cur, al_nxt)
                force = np.asarray(body.force, dtype=float)
                kick = scale * context.force_delta(force)
                e_gt = vel_next - vel - kick
                transitions += 1
                motion = max(motion, float(np.abs(vel).max()))

                senders = by_receiver.get(body.oid, [])
                if len(senders) == 1:
                    trip = senders[0]
                    feat = trip.features()
                    gap = float(trip.relation[0])
                    contact = float(np.abs(e_gt).max()) > EFFECT_FLOOR
                    if gap < cfg.contact_gap or contact:
                        emit_hot(feat, e_gt)
                        if contact and gap < CONTACT_EPS:
                            emit_hot(*_overlapped_twin(context, ix, feat, e_gt))
                    else:
                        emit_relation(feat, e_gt)

                total = e_gt if senders else np.zeros(a)
                prof = profiles.get(body.oid) or default_profile(body.oid, body.symbol)
                block = _object_block(context, body.symbol, al_cur, vel, prof)
                force_feat = scale * force
                obj_x.append(np.concatenate([block, total, force_feat]))
                obj_y.append(vel_next)
                if total.any() or force_feat.any():
                    obj_x.append(np.concatenate([block, np.zeros(a), np.zeros(3)]))
                    obj_y.append(vel)

    if transitions == 0:
        raise ValueError("sequences are too short to form any transition")
    if motion < 1e-9:
        raise ValueError("sequences show no motion; nothing to learn from")
    return rel_x, rel_y, obj_x, obj_y, transitions


def _overlapped_twin(context, ix, feat, target):
    """Contact sample re-posed at penetration depth, distance pinned to zero.

    Rollouts can momentarily overlap bodies; without these twins the
    relation net has never seen that state and cannot recover from it.
    """
    f = feat.copy()
    ps, pr = ix["pos_pairs"]
    d = f[pr] - f[ps]
    norm = float(np.hypot(*d))
    dirn = d / norm if norm > 1e-9 else np.array([1.0, 0.0])
    sizes = [
        feat[len(context.symbols) + base + i]
        for base in (0, context.block_size)
        for i in context.schema.indices_of("size")
    ]
    pull = float(f[ix["distance"]]) + 0.4 * (min(sizes) / 2.0 if sizes else 0.02)
    f[ps] = f[ps] + dirn * pull / 2.0
    f[pr] = f[pr] - dirn * pull / 2.0
    f[ix["distance"]] = 0.0
    return f, target.copy()


def _fit(
    widths: list[int],
    x: np.ndarray,
    y: np.ndarray,
    stages: tuple[tuple[int, float], ...],
    batch: int,
    seed: int,
    gain: float = 1.0,
) -> tuple[RegressionModel, float]:
    model = RegressionModel(widths, seed=seed)
    if gain != 1.0:
        model.weights[0] = model.weights[0] * gain
    loss = math.inf
    for k, (epochs, lr) in enumerate(stages):
        model, loss = train(
            model,
            (x, y),
            TrainConfig(epochs=epochs, batch_size=batch, learning_rate=lr, seed=seed + k),
        )
    return model, loss


def train_physics(
    network: CapsuleNetwork,
    sequences: list[list[list[BodyState]]],
    config: TrainPhysicsConfig = TrainPhysicsConfig(),
    context: PhysicsContext | None = None,
    profiles: list[dict[int, PhysicalProfile]] | None = None,
    radius: float | None = None,
    resolution: int = 160,
    seed: int = 0,
) -> PhysicsModels:
    """Fit the relation and object nets on tracked frame sequences.

    Effects are attributed per pair, so relation targets are only taken
    from receivers with exactly one sender in range; the object net trains
    on every receiver with the ground-truth effect sum teacher-forced.
    Profiles default to dynamic-and-rigid for every body, matching what
    prediction assumes when none are supplied.
    """
    if not sequences:
        raise ValueError("need at least one sequence")
    if context is None:
        context = context_from_sequences(sequences)
    if profiles is None:
        profiles = [
            {b.oid: default_profile(b.oid, b.symbol) for f in seq for b in f}
            for seq in sequences
        ]
    rng = np.random.default_rng(seed)
    rel_x, rel_y, obj_x, obj_y, transitions = _training_arrays(
        network, context, sequences, profiles, config, radius, resolution, rng
    )
    if not rel_x:
        raise ValueError("no pair came within the interaction radius")

    rx = np.array(rel_x)
    ry = np.array(rel_y)
    ox = np.array(obj_x)
    oy = np.array(obj_y)
    rel_in, rel_out = Standardizer.fit(rx), Standardizer.fit(ry)
    obj_in, obj_out = Standardizer.fit(ox), Standardizer.fit(oy)

    a = len(context.schema)
    rel_widths = [context.feature_size] + [config.relation_width] * config.relation_layers + [a]
    obj_widths = [context.block_size + a + 3] + [config.object_width] * config.object_layers + [a]
    relation, rel_loss = _fit(
        rel_widths, rel_in.forward(rx), rel_out.forward(ry),
        config.relation_stages, config.relation_batch, seed,
        gain=config.relation_gain,
    )
    objective, obj_loss = _fit(
        obj_widths, obj_in.forward(ox), obj_out.forward(oy),
        config.object_stages, config.object_batch, seed + 100,
    )
    report = PhysicsTrainReport(
        sequences=len(sequences),
        transitions=transitions,
        relation_samples=len(rx),
        object_samples=len(ox),
        relation_loss=float(rel_loss),
        object_loss=float(obj_loss),
    )
    return PhysicsModels(
        context, relation, objective, rel_in, rel_out, obj_in, obj_out,
        radius, resolution, EFFECT_FLOOR, report,
    )


# ----------------------------------------------------------------------
# prediction


@dataclass
class EffectVector:
    """Sum of incoming relation effects for one receiver, plus the external
    force; zero total and zero force means exact free flight."""

    receiver: int
    total: np.ndarray
    force: np.ndarray

    @property
    def passive(self) -> bool:
        return not self.total.any() and not self.force.any()


def aggregate_effects(
    models: PhysicsModels,
    triplets: list[InteractionTriplet],
    forces: dict[int, np.ndarray] | None = None,
) -> dict[int, EffectVector]:
    """Per-receiver effect sums with the numerical floor applied."""
    forces = forces or {}
    totals: dict[int, np.ndarray] = {}
    for trip in triplets:
        e = models.relation_effect(trip.features())
        if trip.receiver in totals:
            totals[trip.receiver] = totals[trip.receiver] + e
        else:
            totals[trip.receiver] = e
    out = {}
    for oid, total in totals.items():
        if float(np.abs(total).max()) < models.effect_floor:
            total = np.zeros_like(total)
        out[oid] = EffectVector(oid, total, np.asarray(forces.get(oid, np.zeros(3)), dtype=float))
    return out


def _entry_variant(
    network: CapsuleNetwork, symbol: str, adopted: np.ndarray, predicted: np.ndarray,
) -> np.ndarray:
    """Symmetry variant of adopted attributes closest to the prediction."""
    schema = network.schema_of(symbol)
    variants = network.symmetry_of(symbol).variants(schema, adopted)
    return min(
        variants,
        key=lambda v: float(np.abs(slot_difference(schema, predicted, v)).max()),
    )


def predict_step(
    network: CapsuleNetwork,
    models: PhysicsModels,
    previous: list[BodyState],
    current: list[BodyState],
    forces: dict[int, np.ndarray] | None = None,
    profiles: dict[int, PhysicalProfile] | None = None,
    refeed: bool = True,
    threshold: float = 0.7,
) -> list[BodyState]:
    """One physics step: effects, anchored integration, re-observation.

    Forces map oid to (fx, fy, torque) acting on this transition. With
    refeed the moved leaves re-enter a forward pass and each semantic
    object adopts the matching admitted entry (picking the symmetry
    variant nearest the raw prediction); objects the pass fails to
    re-detect carry the propagated prediction instead.
    """
    context = models.context
    scale = context.velocity_scale
    forces = {k: np.asarray(v, dtype=float) for k, v in (forces or {}).items()}
    triplets = build_triplets(
        network, context, previous, current, profiles,
        models.radius, models.resolution,
    )
    effects = aggregate_effects(models, triplets, forces)
    prev_by = {b.oid: b for b in previous}

    moved: dict[int, ParseTree] = {}
    for body in sorted(current, key=lambda b: b.oid):
        schema = body.tree.attrs.schema
        al_cur = context.align(schema, body.values)
        prev = prev_by.get(body.oid)
        if prev is None:
            vel = np.zeros(len(context.schema))
        else:
            vel = scale * slot_difference(
                context.schema, context.align(schema, prev.values), al_cur
            )
        ev = effects.get(body.oid)
        total = ev.total if ev is not None else np.zeros(len(context.schema))
        force = forces.get(body.oid, np.zeros(3))
        if not total.any() and not force.any():
            vel_next = vel
        else:
            prof = (profiles or {}).get(body.oid) or default_profile(body.oid, body.symbol)
            block = _object_block(context, body.symbol, al_cur, vel, prof)
            vel_next = models.next_velocity(block, vel, total, force)

        delta = vel_next / scale
        nxt = al_cur.copy()
        circular = context.schema.circular_mask()
        nxt[circular] = (nxt[circular] + delta[circular]) % 1.0
        nxt[~circular] = np.clip(nxt[~circular] + delta[~circular], 0.0, 1.0)
        moved[body.oid] = transform_subtree(body.tree, context.unalign(schema, nxt))

    if refeed:
        moved = redetect(network, moved, threshold)
    return [BodyState(oid, moved[oid], np.zeros(3)) for oid in sorted(moved)]


def redetect(
    network: CapsuleNetwork, moved: dict[int, ParseTree], threshold: float = 0.7,
) -> dict[int, ParseTree]:
    """Feed trees' leaves back through the network, one object at a time.

    An admitted parse whose leaves exactly cover an object's replaces that
    object's tree (symmetry variants reconciled against the old root); trees
    the network cannot re-admit are carried forward unchanged.  Used both for
    re-observing predicted states and for grounding fabricated scenes.
    """
    tables: dict[str, list[ObservationEntry]] = {n: [] for n in network.primitives}
    leaf_uids: dict[int, set[int]] = {}
    uid = 0
    for oid in sorted(moved):
        owned = set()
        for leaf in moved[oid].leaves():
            if leaf.capsule not in tables:
                return moved
            tables[leaf.capsule].append(
                ObservationEntry(uid, leaf.capsule, 1.0, leaf.attrs)
            )
            owned.add(uid)
            uid += 1
        leaf_uids[oid] = owned

    result = forward_pass(
        network, tables, activation_threshold=threshold, update_stats=False
    )
    flat = [e for rows in result.tables.values() for e in rows]
    by_uid = {e.uid: t for e, t in zip(flat, result.trees)}

    out = dict(moved)
    for oid, tree in moved.items():
        if tree.capsule in network.primitives:
            continue
        matches = [
            e
            for e in result.entries(tree.capsule)
            if e.primitive_leaves() == leaf_uids[oid] and e.p >= threshold
        ]
        if not matches:
            continue
        best = max(matches, key=lambda e: e.p)
        seen = by_uid[best.uid]
        vals = _entry_variant(network, tree.capsule, seen.attrs.values, tree.attrs.values)
        out[oid] = ParseTree(
            tree.capsule,
            AttributeVector(network.schema_of(tree.capsule), vals),
            best.p,
            seen.route_id,
            seen.children,
        )
    return out


def predict_rollout(
    network: CapsuleNetwork,
    models: PhysicsModels,
    previous: list[BodyState],
    current: list[BodyState],
    steps: int,
    forces=None,
    profiles: dict[int, PhysicalProfile] | None = None,
    refeed: bool = True,
    threshold: float = 0.7,
) -> list[list[BodyState]]:
    """Iterate predict_step over a sliding two-frame window.

    forces may be a constant oid map or a callable step -> oid map.
    """
    frames = [previous, current]
    out = []
    for k in range(steps):
        step_forces = forces(k) if callable(forces) else forces
        nxt = predict_step(
            network, models, frames[-2], frames[-1], step_forces,
            profiles, refeed, threshold,
        )
        out.append(nxt)
        frames.append(nxt)
    return out


# ----------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneConfig:
    frames: int = 60
    bodies: int = 2
    radii: tuple[float, float] = (0.05, 0.09)
    speed: tuple[float, float] = (0.004, 0.012)
    arrival: tuple[float, float] = (18.0, 35.0)
    force_scale: float = 4e-4
    restitution: float = 1.0
    margin: float = 0.03
    intensity: float = 0.9


def simulate_discs(
    p0: np.ndarray,
    v0: np.ndarray,
    radii: np.ndarray,
    frames: int,
    forces: np.ndarray | None = None,
    restitution: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Unit-mass disc integrator: constant forces, equal-split impulses.

    Per frame: velocities take the force kick, positions advance, then
    every overlapping pair that is still approaching exchanges the
    restitution impulse along the center line and de-overlaps half each.
    Returns positions and velocities, shape (frames + 1, n, 2).
    """
    n = len(radii)
    p = np.array(p0, dtype=float)
    v = np.array(v0, dtype=float)
    f = np.zeros((n, 2)) if forces is None else np.asarray(forces, dtype=float)
    ps, vs = [p.copy()], [v.copy()]
    for _ in range(frames):
        v = v + f
        p = p + v
        for i in range(n):
            for j in range(i + 1, n):
                d = p[j] - p[i]
                dist = float(np.hypot(*d))
                overlap = radii[i] + radii[j] - dist
                if overlap <= 0 or dist <= 0:
                    continue
                nrm = d / dist
                rel = float(np.dot(v[i] - v[j], nrm))
                if rel > 0:
                    kick = (1 + restitution) * rel / 2.0
                    v[i] = v[i] - kick * nrm
                    v[j] = v[j] + kick * nrm
                p[i] = p[i] - nrm * overlap / 2.0
                p[j] = p[j] + nrm * overlap / 2.0
        ps.append(p.copy())
        vs.append(v.copy())
    return np.array(ps), np.array(vs)


def _discs_to_frames(
    ps: np.ndarray, vs: np.ndarray, radii: np.ndarray,
    forces: np.ndarray | None, intensity: float,
) -> list[list[BodyState]]:
    frames = []
    n = ps.shape[1]
    f = np.zeros((n, 2)) if forces is None else forces
    for t in range(ps.shape[0]):
        frame = []
        for k in range(n):
            frame.append(
                BodyState(
                    k,
                    circle_tree(ps[t, k, 0], ps[t, k, 1], radii[k], intensity),
                    np.array([f[k, 0], f[k, 1], 0.0]),
                )
            )
        frames.append(frame)
    return frames


def _emitted_gaps(ps: np.ndarray, radii: np.ndarray) -> np.ndarray:
    gaps = []
    n = ps.shape[1]
    for i in range(n):
        for j in range(i + 1, n):
            gaps.append(np.hypot(*(ps[:, j] - ps[:, i]).T) - radii[i] - radii[j])
    return np.min(gaps, axis=0)


def _in_bounds(ps: np.ndarray, radii: np.ndarray, margin: float) -> bool:
    lo = ps - radii[None, :, None]
    hi = ps + radii[None, :, None]
    return bool(lo.min() >= margin and hi.max() <= 1.0 - margin)


def _aimed_scene(rng: np.random.Generator, cfg: SceneConfig, want: str):
    n = cfg.bodies
    radii = rng.uniform(*cfg.radii, n)
    target = rng.uniform(0.35, 0.65, 2)
    hit_t = rng.uniform(*cfg.arrival)
    p0 = np.zeros((n, 2))
    v0 = np.zeros((n, 2))
    for k in range(n):
        ang = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(0.25, 0.42)
        p0[k] = target + dist * np.array([math.cos(ang), math.sin(ang)])
        aim = target + rng.uniform(-0.02, 0.02, 2)
        if want == "miss":
            aim = aim + rng.uniform(0.06, 0.12) * np.array(
                [math.cos(ang + math.pi / 2), math.sin(ang + math.pi / 2)]
            )
        span = aim - p0[k]
        reach = float(np.hypot(*span))
        speed = float(np.clip(reach / (hit_t * rng.uniform(0.92, 1.08)), *cfg.speed))
        v0[k] = span / reach * speed
    for i in range(n):
        for j in range(i + 1, n):
            if np.hypot(*(p0[j] - p0[i])) < radii[i] + radii[j] + 0.03:
                return None
    ps, vs = simulate_discs(p0, v0, radii, cfg.frames, None, cfg.restitution)
    if not _in_bounds(ps, radii, cfg.margin):
        return None
    gap = float(_emitted_gaps(ps, radii).min())
    if want == "collision" and gap > 1e-9:
        return None
    if want == "miss" and not (0.0005 < gap < 0.05):
        return None
    return ps, vs, radii, None


def _forced_scene(rng: np.random.Generator, cfg: SceneConfig):
    radii = rng.uniform(*cfg.radii, 2)
    p0 = np.array([rng.uniform(0.2, 0.4, 2), rng.uniform(0.6, 0.8, 2)])
    v0 = rng.uniform(-0.004, 0.004, (2, 2))
    forces = np.zeros((2, 2))
    forces[0] = rng.uniform(-cfg.force_scale, cfg.force_scale, 2)
    ps, vs = simulate_discs(p0, v0, radii, cfg.frames, forces, cfg.restitution)
    if not _in_bounds(ps, radii, cfg.margin):
        return None
    if float(_emitted_gaps(ps, radii).min()) <= 1e-9:
        return None
    return ps, vs, radii, forces


def _contact_scene(rng: np.random.Generator, cfg: SceneConfig):
    radii = rng.uniform(*cfg.radii, 2)
    depth = rng.uniform(0.0, 0.5 * radii.min())
    ang = rng.uniform(0, 2 * math.pi)
    dirn = np.array([math.cos(ang), math.sin(ang)])
    center = rng.uniform(0.3, 0.7, 2)
    dist = radii.sum() - depth
    p0 = np.array([center - dirn * dist / 2, center + dirn * dist / 2])
    v0 = np.zeros((2, 2))
    for k in range(2):
        speed = rng.uniform(0.002, 0.012)
        if rng.random() < 0.6:
            head = (p0[1 - k] - p0[k]) / max(float(np.hypot(*(p0[1 - k] - p0[k]))), 1e-6)
            jig = rng.uniform(-0.4, 0.4)
            v0[k] = speed * (head + jig * np.array([-head[1], head[0]]))
        else:
            a = rng.uniform(0, 2 * math.pi)
            v0[k] = speed * np.array([math.cos(a), math.sin(a)])
    ps, vs = simulate_discs(p0, v0, radii, 5, None, cfg.restitution)
    if not _in_bounds(ps, radii, cfg.margin):
        return None
    return ps, vs, radii, None


def synthetic_scenes(
    count: int,
    kind: str = "collision",
    cfg: SceneConfig = SceneConfig(),
    seed: int = 0,
) -> list[list[list[BodyState]]]:
    """Generated disc sequences of one flavor.

    Kinds: collision (aimed, synchronized arrival), miss (near pass,
    boundary-zero evidence), forced (one disc under constant force, no
    contact), contact (short scenes spawned at penetration, approach
    biased). Rejection sampling keeps every scene inside the canvas.
    """
    builders = {
        "collision": lambda r: _aimed_scene(r, cfg, "collision"),
        "miss": lambda r: _aimed_scene(r, cfg, "miss"),
        "forced": lambda r: _forced_scene(r, cfg),
        "contact": lambda r: _contact_scene(r, cfg),
    }
    if kind not in builders:
        raise ValueError(f"unknown scene kind {kind!r}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        scene = None
        for _ in range(400):
            scene = builders[kind](rng)
            if scene is not None:
                break
        if scene is None:
            raise RuntimeError(f"could not sample a {kind!r} scene in 400 tries")
        ps, vs, radii, forces = scene
        out.append(_discs_to_frames(ps, vs, radii, forces, cfg.intensity))
    return out


def training_mix(
    collisions: int = 60,
    contacts: int = 60,
    misses: int = 10,
    forced: int = 10,
    cfg: SceneConfig = SceneConfig(),
    seed: int = 0,
) -> list[list[list[BodyState]]]:
    """The scene diet the default training recipe was tuned on."""
    out = []
    out += synthetic_scenes(collisions, "collision", cfg, seed)
    out += synthetic_scenes(contacts, "contact", cfg, seed + 1)
    out += synthetic_scenes(misses, "miss", cfg, seed + 2)
    out += synthetic_scenes(forced, "forced", cfg, seed + 3)
    return out


# ----------------------------------------------------------------------
# pinned rotor scenes


@dataclass(frozen=True)
class RotorConfig:
    frames: int = 48
    lobe_width: float = 0.11
    center: tuple[float, float] = (0.5, 0.5)
    disc_radius: tuple[float, float] = (0.045, 0.065)
    speed: tuple[float, float] = (0.008, 0.016)
    spin: tuple[float, float] = (0.0, 0.0)
    restitution: float = 1.0
    margin: float = 0.03
    intensity: float = 0.9


def simulate_rotor(
    theta0: float,
    omega0: float,
    p0: np.ndarray,
    v0: np.ndarray,
    disc_r: float,
    cfg: RotorConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """A disc against a pinned two-lobe rotor.

    The rotor's center is fixed; impacts on a lobe exchange an impulse
    that respects its rotational inertia (two unit point lobes), spinning
    it while deflecting the disc. Returns (theta, omega, positions,
    velocities) over frames + 1 samples; theta in turns.
    """
    w = cfg.lobe_width
    h = 2 * w
    off = (h - w) / 2.0
    inertia = 2 * off * off
    lobe_r = w / 2.0
    c = np.asarray(cfg.center, dtype=float)
    theta, omega = float(theta0), float(omega0)
    p = np.array(p0, dtype=float)
    v = np.array(v0, dtype=float)
    ths, oms, ps, vs = [theta], [omega], [p.copy()], [v.copy()]
    for _ in range(cfg.frames):
        theta = (theta + omega) % 1.0
        p = p + v
        for lc in lobe_centers(c[0], c[1], theta, w, h):
            d = p - lc
            dist = float(np.hypot(*d))
            overlap = disc_r + lobe_r - dist
            if overlap <= 0 or dist <= 0:
                continue
            nrm = d / dist
            contact = lc + lobe_r * nrm
            r_vec = contact - c
            spin_v = 2 * math.pi * omega * np.array([-r_vec[1], r_vec[0]])
            rel = float(np.dot(v - spin_v, nrm))
            if rel < 0:
                lever = float(r_vec[0] * nrm[1] - r_vec[1] * nrm[0])
                denom = 1.0 + lever * lever / inertia
                j = -(1 + cfg.restitution) * rel / denom
                v = v + j * nrm
                omega = omega - j * lever / inertia / (2 * math.pi)
            p = p + nrm * overlap
        ths.append(theta)
        oms.append(omega)
        ps.append(p.copy())
        vs.append(v.copy())
    return np.array(ths), np.array(oms), np.array(ps), np.array(vs)


def rotor_scenes(
    count: int,
    cfg: RotorConfig = RotorConfig(),
    seed: int = 0,
    symbol: str = "eight",
) -> list[list[list[BodyState]]]:
    """Disc-strikes-rotor sequences; the rotor must visibly turn."""
    rng = np.random.default_rng(seed)
    w = cfg.lobe_width
    h = 2 * w
    c = np.asarray(cfg.center, dtype=float)
    out = []
    for _ in range(count):
        for _ in range(400):
            theta0 = rng.uniform(0.02, 0.48)
            omega0 = rng.uniform(*cfg.spin) if cfg.spin[1] > 0 else 0.0
            disc_r = rng.uniform(*cfg.disc_radius)
            lobe = lobe_centers(c[0], c[1], theta0, w, h)[rng.integers(2)]
            ang = rng.uniform(0, 2 * math.pi)
            start = lobe + rng.uniform(0.25, 0.38) * np.array([math.cos(ang), math.sin(ang)])
            if start.min() < 0.1 or start.max() > 0.9:
                continue
            aim = lobe + rng.uniform(-0.015, 0.015, 2)
            span = aim - start
            reach = float(np.hypot(*span))
            speed = rng.uniform(*cfg.speed)
            v0 = span / reach * speed
            ths, oms, ps, vs = simulate_rotor(theta0, omega0, start, v0, disc_r, cfg)
            lo = ps - disc_r
            hi = ps + disc_r
            if lo.min() < cfg.margin or hi.max() > 1.0 - cfg.margin:
                continue
            hit = np.nonzero(np.abs(np.diff(oms)) > 1e-12)[0]
            if len(hit) == 0 or hit[0] > cfg.frames - 8:
                continue
            total_turn = float(np.abs(oms[hit[0] + 1 :]).sum())
            if total_turn < 0.02:
                continue
            frames = []
            for t in range(len(ths)):
                frames.append(
                    [
                        BodyState(0, eight_tree(symbol, c[0], c[1], ths[t], w, h, cfg.intensity)),
                        BodyState(1, circle_tree(ps[t, 0], ps[t, 1], disc_r, cfg.intensity)),
                    ]
                )
            out.append(frames)
            break
        else:
            raise RuntimeError("could not sample a rotor scene in 400 tries")
    return out


# ----------------------------------------------------------------------
# sequences from remembered frames


def sequence_from_trees(frames: list[list[ParseTree]]) -> list[list[BodyState]]:
    """Tracked BodyState frames from per-frame parse forests.

    Objects follow the scene-objects rule; identity is kept across frames
    with the class-wise tracker, new arrivals get fresh ids, and forces
    are zero since remembered video carries none.
    """
    from .tracking import TrackedObject, track

    out: list[list[BodyState]] = []
    prev_states: dict[str, list[tuple[int, np.ndarray]]] = {}
    next_oid = 0
    schema_by_symbol: dict[str, AttributeSchema] = {}
    union = pose_schema()

    for trees in frames:
        objs = [node for node, _ in scene_objects(trees)]
        for node in objs:
            if node.capsule not in schema_by_symbol:
                schema_by_symbol[node.capsule] = node.attrs.schema
                union = union.merge(node.attrs.schema)

        by_symbol: dict[str, list[ParseTree]] = {}
        for node in objs:
            by_symbol.setdefault(node.capsule, []).append(node)

        def aligned(node: ParseTree) -> np.ndarray:
            vals = np.zeros(len(union))
            for k, name in enumerate(node.attrs.schema.names):
                vals[union.index(name)] = node.attrs.values[k]
            return vals

        frame_states: list[BodyState] = []
        new_prev: dict[str, list[tuple[int, np.ndarray]]] = {}
        if not out:
            for sym in sorted(by_symbol):
                for node in by_symbol[sym]:
                    frame_states.append(BodyState(next_oid, node))
                    new_prev.setdefault(sym, []).append((next_oid, aligned(node)))
                    next_oid += 1
        else:
            prev_groups = {
                sym: [TrackedObject(vals) for _, vals in rows]
                for sym, rows in prev_states.items()
            }
            new_groups = {
                sym: [aligned(n) for n in nodes] for sym, nodes in by_symbol.items()
            }
            result = track(union, prev_groups, new_groups)
            for sym in sorted(by_symbol):
                nodes = by_symbol[sym]
                rel = result.relations.get(sym)
                matched = dict()
                if rel:
                    for i, j in rel.pairs:
                        matched[j] = prev_states[sym][i][0]
                for j, node in enumerate(nodes):
                    oid = matched.get(j)
                    if oid is None:
                        oid = next_oid
                        next_oid += 1
                    frame_states.append(BodyState(oid, node))
                    new_prev.setdefault(sym, []).append((oid, aligned(node)))
        prev_states = new_prev
        out.append(sorted(frame_states, key=lambda b: b.oid))
    return out


def sequences_from_memory(memory) -> list[list[list[BodyState]]]:
    """One tracked sequence per time-line of an episodic store."""
    out = []
    chain = memory.main_chain()
    if chain:
        out.append(sequence_from_trees([obs.trees for obs in chain]))
    return out
