"""Semantic capsules, routing-by-agreement, and the dual grammar.

A semantic capsule names a visual concept (a noun); each of its routes is
one inverted production rule: an encoder maps the concatenated attributes
of the rule's parts to the capsule's own attributes, a decoder maps them
back to expected part attributes.  The activation probability of a route
measures how well the actual parts agree with the expectation, weighted by
how plausible each part's own activation history makes it.  A forward pass
fills observation tables level by level and yields observed parse trees;
generation walks decoders down to primitives and renders painter-style.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attributes import (
    DEFAULT_WINDOW,
    AttributeSchema,
    AttributeVector,
    NO_SYMMETRY,
    RotationalSymmetry,
    WindowConfig,
    mean_agreement,
    window,
)
from .mlp import RegressionModel, route_widths
from .primitives import PATCH, Detection, PrimitiveCapsule
from . import sdf

DEFAULT_ACTIVATION_THRESHOLD = 0.7
TOP_K_PER_SLOT = 8
ROUTE_MEMORY_CAP = 1024


# ----------------------------------------------------------------------
# routes


@dataclass(frozen=True)
class RouteSlot:
    """One ordered input position of a route."""

    capsule: str
    schema: AttributeSchema


@dataclass
class RouteResult:
    """Outcome of running one route on one input assignment."""

    p: float
    attrs: AttributeVector | None
    expected: list[AttributeVector | None]


class Route:
    """Inverted production rule: parts -> owner, with learned inverses."""

    def __init__(
        self,
        route_id: int,
        slots: Sequence[RouteSlot],
        owner_schema: AttributeSchema,
        encoder: RegressionModel,
        decoder: RegressionModel,
    ) -> None:
        if not slots:
            raise ValueError("a route needs at least one input slot")
        in_dim = sum(len(s.schema) for s in slots)
        if encoder.input_dim != in_dim or encoder.output_dim != len(owner_schema):
            raise ValueError("encoder dims do not match slots -> owner schema")
        if decoder.input_dim != len(owner_schema) or decoder.output_dim != in_dim:
            raise ValueError("decoder dims do not match owner schema -> slots")
        self.id = int(route_id)
        self.slots = tuple(slots)
        self.owner_schema = owner_schema
        self.encoder = encoder
        self.decoder = decoder
        # Running mean activation of each input slot over admitted
        # observations; None until the first one arrives.
        self.p_bar: list[float | None] = [None] * len(slots)
        self._p_counts: list[int] = [0] * len(slots)
        # (p per slot, concatenated input attrs, owner attrs) triples.
        self.memory: list[tuple[list[float], list[float], list[float]]] = []

    @property
    def arity(self) -> int:
        return len(self.slots)

    def slot_offsets(self) -> list[tuple[int, int]]:
        spans = []
        at = 0
        for s in self.slots:
            spans.append((at, at + len(s.schema)))
            at += len(s.schema)
        return spans

    def forward(
        self,
        inputs: Sequence[tuple[float, AttributeVector | None]],
        symmetries: Sequence[RotationalSymmetry] | None = None,
        cfg: WindowConfig = DEFAULT_WINDOW,
    ) -> RouteResult:
        """Run the route on one assignment; inputs use (0.0, None) for
        0-capsules standing in for occluded or missing parts."""
        if len(inputs) != self.arity:
            raise ValueError(f"route {self.id} expects {self.arity} inputs")
        if symmetries is None:
            symmetries = [NO_SYMMETRY] * self.arity
        contributing = [i for i, (p, a) in enumerate(inputs) if a is not None and p > 0.0]
        if not contributing:
            return RouteResult(0.0, None, [None] * self.arity)

        concat = np.zeros(self.encoder.input_dim)
        for i, ((p_i, a_i), (lo, hi)) in enumerate(zip(inputs, self.slot_offsets())):
            if a_i is not None:
                concat[lo:hi] = a_i.values
        owner_vals = np.clip(self.encoder.infer(concat), 0.0, 1.0)
        attrs = AttributeVector(self.owner_schema, owner_vals)

        decoded = np.clip(self.decoder.infer(owner_vals), 0.0, 1.0)
        expected: list[AttributeVector | None] = []
        for slot, (lo, hi) in zip(self.slots, self.slot_offsets()):
            expected.append(AttributeVector(slot.schema, decoded[lo:hi]))

        total = 0.0
        for i in contributing:
            p_i, a_i = inputs[i]
            z = mean_agreement(a_i, expected[i], symmetries[i], cfg)
            ratio = p_i / self.p_bar[i] - 1.0 if self.p_bar[i] else 0.0
            total += z * float(window(ratio, cfg.half_width("activation")))
        p = total / len(contributing)
        return RouteResult(float(p), attrs, expected)

    def observe_admitted(
        self, inputs: Sequence[tuple[float, AttributeVector | None]], attrs: AttributeVector
    ) -> None:
        """Update per-slot activation statistics and the route memory."""
        ps = []
        concat = np.zeros(self.encoder.input_dim)
        for i, ((p_i, a_i), (lo, hi)) in enumerate(zip(inputs, self.slot_offsets())):
            ps.append(float(p_i))
            if a_i is None:
                continue
            concat[lo:hi] = a_i.values
            n = self._p_counts[i]
            prev = self.p_bar[i] if self.p_bar[i] is not None else 0.0
            self.p_bar[i] = (prev * n + p_i) / (n + 1)
            self._p_counts[i] = n + 1
        self.memory.append((ps, concat.tolist(), attrs.values.tolist()))
        if len(self.memory) > ROUTE_MEMORY_CAP:
            del self.memory[: len(self.memory) - ROUTE_MEMORY_CAP]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "slots": [[s.capsule, s.schema.to_json()] for s in self.slots],
            "owner_schema": self.owner_schema.to_json(),
            "encoder": self.encoder.to_json(),
            "decoder": self.decoder.to_json(),
            "p_bar": self.p_bar,
            "p_counts": self._p_counts,
            "memory": self.memory[-ROUTE_MEMORY_CAP:],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Route":
        route = cls(
            data["id"],
            [RouteSlot(c, AttributeSchema.from_json(s)) for c, s in data["slots"]],
            AttributeSchema.from_json(data["owner_schema"]),
            RegressionModel.from_json(data["encoder"]),
            RegressionModel.from_json(data["decoder"]),
        )
        route.p_bar = [None if v is None else float(v) for v in data["p_bar"]]
        route._p_counts = [int(v) for v in data["p_counts"]]
        route.memory = [tuple(t) for t in data.get("memory", [])]
        return route


# ----------------------------------------------------------------------
# capsules and the network


class SemanticCapsule:
    """Non-terminal symbol: named concept with one route per rule."""

    def __init__(
        self,
        name: str,
        schema: AttributeSchema,
        symmetry: RotationalSymmetry = NO_SYMMETRY,
    ) -> None:
        self.name = name
        self.schema = schema
        self.symmetry = symmetry
        self.routes: list[Route] = []
        # Mean admitted activation; doubles as depth (visibility) hint.
        self.p_bar_omega: float = 1.0
        self._omega_count: int = 0

    def add_route(self, route: Route) -> None:
        if route.owner_schema != self.schema:
            raise ValueError("route output schema differs from capsule schema")
        if any(r.id == route.id for r in self.routes):
            raise ValueError(f"duplicate route id {route.id} on {self.name}")
        self.routes.append(route)

    def note_admitted(self, p: float) -> None:
        n = self._omega_count
        base = self.p_bar_omega if n else 0.0
        self.p_bar_omega = (base * n + p) / (n + 1)
        self._omega_count = n + 1

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "schema": self.schema.to_json(),
            "symmetry": self.symmetry.fold,
            "routes": [r.to_json() for r in self.routes],
            "p_bar_omega": self.p_bar_omega,
            "omega_count": self._omega_count,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SemanticCapsule":
        caps = cls(
            data["name"],
            AttributeSchema.from_json(data["schema"]),
            RotationalSymmetry(data.get("symmetry", 1)),
        )
        for rd in data["routes"]:
            caps.add_route(Route.from_json(rd))
        caps.p_bar_omega = float(data.get("p_bar_omega", 1.0))
        caps._omega_count = int(data.get("omega_count", 0))
        return caps


class CapsuleNetwork:
    """All capsules of one agent; structurally a DAG from parts to wholes."""

    def __init__(self, patch: int = PATCH) -> None:
        self.patch = patch
        self.primitives: dict[str, PrimitiveCapsule] = {}
        self.semantic: dict[str, SemanticCapsule] = {}

    # -- structure -----------------------------------------------------

    def __contains__(self, name: str) -> bool:
        return name in self.primitives or name in self.semantic

    def capsule_names(self) -> list[str]:
        return list(self.primitives) + list(self.semantic)

    def symmetry_of(self, name: str) -> RotationalSymmetry:
        if name in self.primitives:
            return self.primitives[name].symmetry
        return self.semantic[name].symmetry

    def schema_of(self, name: str) -> AttributeSchema:
        if name in self.primitives:
            return self.primitives[name].schema
        return self.semantic[name].schema

    def add_primitive(self, caps: PrimitiveCapsule) -> None:
        if caps.name in self:
            raise ValueError(f"capsule {caps.name!r} already exists")
        self.primitives[caps.name] = caps

    def add_semantic(self, caps: SemanticCapsule) -> None:
        if caps.name in self:
            raise ValueError(f"capsule {caps.name!r} already exists")
        self.semantic[caps.name] = caps

    def add_route(self, owner: str, route: Route) -> None:
        if owner not in self.semantic:
            raise ValueError(f"unknown semantic capsule {owner!r}")
        for slot in route.slots:
            if slot.capsule not in self:
                raise ValueError(f"route references unknown capsule {slot.capsule!r}")
            if owner in self._descendants(slot.capsule) or slot.capsule == owner:
                raise ValueError(f"route would make {owner!r} its own ancestor")
        self.semantic[owner].add_route(route)

    def _children_of(self, name: str) -> set[str]:
        caps = self.semantic.get(name)
        if caps is None:
            return set()
        return {slot.capsule for route in caps.routes for slot in route.slots}

    def _descendants(self, name: str) -> set[str]:
        seen: set[str] = set()
        frontier = [name]
        while frontier:
            for child in self._children_of(frontier.pop()):
                if child not in seen:
                    seen.add(child)
                    frontier.append(child)
        return seen

    def level_of(self, name: str) -> int:
        if name in self.primitives:
            return 0
        caps = self.semantic[name]
        if not caps.routes:
            return 1
        return 1 + max(
            self.level_of(slot.capsule) for route in caps.routes for slot in route.slots
        )

    def levels(self) -> list[list[str]]:
        """Semantic capsule names grouped by level, ascending."""
        by_level: dict[int, list[str]] = {}
        for name in self.semantic:
            by_level.setdefault(self.level_of(name), []).append(name)
        return [sorted(by_level[k]) for k in sorted(by_level)]

    def parents_of(self, name: str) -> set[str]:
        return {
            owner
            for owner, caps in self.semantic.items()
            if any(slot.capsule == name for route in caps.routes for slot in route.slots)
        }

    def top_capsules(self) -> list[str]:
        """Capsules that feed no other capsule (axiom candidates)."""
        return [n for n in self.capsule_names() if not self.parents_of(n)]

    # -- persistence ----------------------------------------------------

    def to_json(self) -> dict:
        return {
            "version": 1,
            "patch": self.patch,
            "primitives": [
                {"kind": c.kind, "patch": c.patch} for c in self.primitives.values()
            ],
            "semantic": [c.to_json() for c in self.semantic.values()],
        }

    @classmethod
    def from_json(cls, data: dict) -> "CapsuleNetwork":
        if data.get("version") != 1:
            raise ValueError(f"unsupported network version {data.get('version')!r}")
        net = cls(patch=int(data.get("patch", PATCH)))
        for pd in data["primitives"]:
            net.add_primitive(PrimitiveCapsule(pd["kind"], pd["patch"]))
        for sd in data["semantic"]:
            caps = SemanticCapsule.from_json(sd)
            net.add_semantic(caps)
        # Route wiring is validated against the finished capsule set.
        for caps in net.semantic.values():
            for route in caps.routes:
                for slot in route.slots:
                    if slot.capsule not in net:
                        raise ValueError(
                            f"route on {caps.name!r} references unknown {slot.capsule!r}"
                        )
        return net


# ----------------------------------------------------------------------
# forward pass


@dataclass
class ObservationEntry:
    """One admitted row of a capsule's per-frame observation table."""

    uid: int
    capsule: str
    p: float
    attrs: AttributeVector
    route_id: int | None = None
    children: list["ObservationEntry | None"] = field(default_factory=list)

    def primitive_leaves(self) -> set[int]:
        if not self.children:
            return {self.uid}
        leaves: set[int] = set()
        for child in self.children:
            if child is not None:
                leaves |= child.primitive_leaves()
        return leaves


@dataclass
class ParseTree:
    """Observed or generated derivation; children in drawing order."""

    capsule: str
    attrs: AttributeVector
    p: float
    route_id: int | None = None
    children: list["ParseTree"] = field(default_factory=list)

    def leaves(self) -> list["ParseTree"]:
        if not self.children:
            return [self]
        out = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def to_json(self) -> dict:
        return {
            "capsule": self.capsule,
            "attrs": self.attrs.values.tolist(),
            "schema": self.attrs.schema.to_json(),
            "p": self.p,
            "route_id": self.route_id,
            "children": [c.to_json() for c in self.children],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ParseTree":
        return cls(
            data["capsule"],
            AttributeVector(AttributeSchema.from_json(data["schema"]), data["attrs"]),
            float(data["p"]),
            data.get("route_id"),
            [cls.from_json(c) for c in data.get("children", [])],
        )


@dataclass
class PassResult:
    """Observation tables of one forward pass plus derived parse trees."""

    tables: dict[str, list[ObservationEntry]]
    trees: list[ParseTree]
    truncated: bool = False

    def entries(self, capsule: str) -> list[ObservationEntry]:
        return self.tables.get(capsule, [])


def select_route(candidates: Sequence[tuple[int, RouteResult]]) -> tuple[int, RouteResult]:
    """Argmax by activation; ties break to the lowest route id."""
    if not candidates:
        raise ValueError("select_route requires at least one candidate")
    return max(candidates, key=lambda c: (c[1].p, -c[0]))


def _centers(entry: ObservationEntry) -> tuple[float, float] | None:
    names = entry.attrs.schema.names
    if "x" in names and "y" in names:
        return entry.attrs.get("x"), entry.attrs.get("y")
    return None


def _part_size(entry: ObservationEntry) -> float:
    names = entry.attrs.schema.names
    dims = [entry.attrs.get(n) for n in ("w", "h") if n in names]
    return max(dims) if dims else 0.0


def _spatially_plausible(parts: Sequence[ObservationEntry]) -> bool:
    """Candidate parts must sit within 2x the largest part's size."""
    real = [p for p in parts if p is not None]
    if len(real) < 2:
        return True
    limit = 2.0 * max(_part_size(p) for p in real)
    centers = [_centers(p) for p in real]
    if any(c is None for c in centers):
        return True
    for a, b in itertools.combinations(centers, 2):
        if np.hypot(a[0] - b[0], a[1] - b[1]) >= limit:
            return False
    return True


def primitive_tables(
    network: CapsuleNetwork, detections: dict[str, list[Detection]]
) -> dict[str, list[ObservationEntry]]:
    """Convert detector output into level-0 observation entries."""
    tables: dict[str, list[ObservationEntry]] = {}
    uid = 0
    for name, caps in network.primitives.items():
        rows = []
        for det in detections.get(name, []):
            rows.append(
                ObservationEntry(
                    uid, name, det.p, AttributeVector(caps.schema, det.values)
                )
            )
            uid += 1
        tables[name] = rows
    return tables


def forward_pass(
    network: CapsuleNetwork,
    tables: dict[str, list[ObservationEntry]],
    activation_threshold: float = DEFAULT_ACTIVATION_THRESHOLD,
    top_k: int = TOP_K_PER_SLOT,
    cfg: WindowConfig = DEFAULT_WINDOW,
    update_stats: bool = True,
) -> PassResult:
    """Fill observation tables level by level and assemble parse trees.

    Every assignment of child entries to route slots is tried, including
    0-capsule substitutions for all proper subsets of slots; per input
    configuration only the best-agreeing route survives, and it is
    admitted if p exceeds the threshold.
    """
    tables = {name: list(rows) for name, rows in tables.items()}
    for name in network.semantic:
        # Tables never persist across passes.
        assert not tables.get(name), "semantic tables must start empty"
        tables[name] = []
    truncated = False
    uid = 1 + max(
        (e.uid for rows in tables.values() for e in rows), default=-1
    )

    for level in network.levels():
        for name in level:
            caps = network.semantic[name]
            # configuration key -> (route id, result, assignment)
            best: dict[frozenset, tuple[int, RouteResult, list]] = {}
            for route in caps.routes:
                pools: list[list[ObservationEntry | None]] = []
                for slot in route.slots:
                    rows = sorted(
                        tables.get(slot.capsule, []), key=lambda e: -e.p
                    )
                    if len(rows) > top_k:
                        rows = rows[:top_k]
                        truncated = True
                    pools.append(list(rows) + [None])
                symmetries = [network.symmetry_of(s.capsule) for s in route.slots]
                for assign in itertools.product(*pools):
                    real = [e for e in assign if e is not None]
                    if not real:
                        continue
                    # The same table entry cannot fill two slots at once.
                    if len({e.uid for e in real}) != len(real):
                        continue
                    if not _spatially_plausible(assign):
                        continue
                    inputs = [
                        (0.0, None) if e is None else (e.p, e.attrs) for e in assign
                    ]
                    result = route.forward(inputs, symmetries, cfg)
                    if result.attrs is None:
                        continue
                    key = frozenset(e.uid for e in real)
                    held = best.get(key)
                    if held is None or (result.p, -route.id) > (held[1].p, -held[0]):
                        best[key] = (route.id, result, list(assign))

            for key in sorted(best, key=lambda k: sorted(k)):
                route_id, result, assign = best[key]
                if result.p <= activation_threshold:
                    continue
                entry = ObservationEntry(
                    uid, name, result.p, result.attrs, route_id, list(assign)
                )
                uid += 1
                tables[name].append(entry)
                if update_stats:
                    route = next(r for r in caps.routes if r.id == route_id)
                    inputs = [
                        (0.0, None) if e is None else (e.p, e.attrs) for e in assign
                    ]
                    route.observe_admitted(inputs, result.attrs)
                    caps.note_admitted(result.p)

    trees = [
        _entry_to_tree(network, e)
        for rows in tables.values()
        for e in rows
    ]
    return PassResult(tables, trees, truncated)


def _drawing_order(network: CapsuleNetwork, name: str) -> float:
    if name in network.semantic:
        return network.semantic[name].p_bar_omega
    return 1.0


def _entry_to_tree(network: CapsuleNetwork, entry: ObservationEntry) -> ParseTree:
    children = [c for c in entry.children if c is not None]
    # Less visible parts (lower stored mean activation) draw first.
    children.sort(key=lambda c: (_drawing_order(network, c.capsule), c.uid))
    return ParseTree(
        entry.capsule,
        entry.attrs,
        entry.p,
        entry.route_id,
        [_entry_to_tree(network, c) for c in children],
    )


def forest_entries(result: PassResult) -> list[ObservationEntry]:
    """Greedy cover of the primitive entries by the strongest roots.

    Picks entries in order of (leaf coverage, activation), skipping any
    whose primitive leaves were already explained; leftovers surface as
    their own (possibly primitive) roots.
    """
    flat = [e for rows in result.tables.values() for e in rows]
    order = sorted(flat, key=lambda e: (-len(e.primitive_leaves()), -e.p, e.uid))
    covered: set[int] = set()
    picked = []
    for entry in order:
        leaves = entry.primitive_leaves()
        if leaves & covered:
            continue
        covered |= leaves
        picked.append(entry)
    picked.sort(key=lambda e: e.uid)
    return picked


def observed_forest(result: PassResult) -> list[ParseTree]:
    """Parse trees of the greedy root cover, in table order."""
    flat = [e for rows in result.tables.values() for e in rows]
    uid_to_tree = {e.uid: t for e, t in zip(flat, result.trees)}
    return [uid_to_tree[e.uid] for e in forest_entries(result)]


# ----------------------------------------------------------------------
# generation (feed-backward)


def generate(
    network: CapsuleNetwork,
    axiom: str,
    attrs: AttributeVector | Sequence[float],
    resolution: int = 112,
    route_choice: dict[str, int] | None = None,
) -> tuple[ParseTree, np.ndarray]:
    """Decode an axiom's attributes down to primitives and render them.

    route_choice optionally pins a route id per capsule name; by default
    the route with the highest historical slot activation is used.
    """
    if axiom not in network:
        raise ValueError(f"unknown capsule {axiom!r}")
    if not isinstance(attrs, AttributeVector):
        attrs = AttributeVector(network.schema_of(axiom), attrs)

    def expand(name: str, vec: AttributeVector) -> ParseTree:
        if name in network.primitives:
            return ParseTree(name, vec, 1.0)
        caps = network.semantic[name]
        if not caps.routes:
            raise ValueError(f"capsule {name!r} has no routes to decode through")
        route = _pick_route(caps, route_choice)
        decoded = np.clip(route.decoder.infer(vec.values), 0.0, 1.0)
        children = []
        for slot, (lo, hi) in zip(route.slots, route.slot_offsets()):
            child_vec = AttributeVector(slot.schema, decoded[lo:hi])
            children.append(expand(slot.capsule, child_vec))
        children.sort(key=lambda t: _drawing_order(network, t.capsule))
        return ParseTree(name, vec, 1.0, route.id, children)

    tree = expand(axiom, attrs)
    frame = render_tree(network, tree, resolution)
    return tree, frame


def _pick_route(caps: SemanticCapsule, route_choice: dict[str, int] | None) -> Route:
    if route_choice and caps.name in route_choice:
        wanted = route_choice[caps.name]
        for route in caps.routes:
            if route.id == wanted:
                return route
        raise ValueError(f"capsule {caps.name!r} has no route {wanted}")
    def mean_p_bar(route: Route) -> float:
        known = [v for v in route.p_bar if v is not None]
        return sum(known) / len(known) if known else 0.0
    return max(caps.routes, key=lambda r: (mean_p_bar(r), -r.id))


def render_tree(
    network: CapsuleNetwork, tree: ParseTree, resolution: int = 112
) -> np.ndarray:
    """Painter-style rendering of a tree's primitive leaves."""
    frame = np.zeros((resolution, resolution))
    for leaf in tree.leaves():
        if leaf.capsule not in network.primitives:
            raise ValueError(f"leaf {leaf.capsule!r} is not a primitive capsule")
        kind = network.primitives[leaf.capsule].kind
        x, y, rot, w, h, intensity = leaf.attrs.values
        frame = sdf.composite_over(frame, kind, x, y, rot, w, h, intensity)
    return frame


# ----------------------------------------------------------------------
# grammar view


@dataclass(frozen=True)
class GrammarRule:
    owner: str
    route_id: int
    parts: tuple[str, ...]


@dataclass
class GrammarView:
    """The network read as a generative grammar."""

    terminals: tuple[str, ...]
    nonterminals: tuple[str, ...]
    axioms: tuple[str, ...]
    rules: tuple[GrammarRule, ...]
    schemas: dict[str, list]

    def to_json(self) -> dict:
        return {
            "terminals": list(self.terminals),
            "nonterminals": list(self.nonterminals),
            "axioms": list(self.axioms),
            "rules": [
                {"owner": r.owner, "route_id": r.route_id, "parts": list(r.parts)}
                for r in self.rules
            ],
            "schemas": self.schemas,
        }


def export_grammar(network: CapsuleNetwork) -> GrammarView:
    rules = []
    for caps in network.semantic.values():
        for route in caps.routes:
            rules.append(
                GrammarRule(caps.name, route.id, tuple(s.capsule for s in route.slots))
            )
    return GrammarView(
        terminals=tuple(sorted(network.primitives)),
        nonterminals=tuple(sorted(network.semantic)),
        axioms=tuple(sorted(network.top_capsules())),
        rules=tuple(sorted(rules, key=lambda r: (r.owner, r.route_id))),
        schemas={n: network.schema_of(n).to_json() for n in network.capsule_names()},
    )


def import_grammar(view: GrammarView, patch: int = PATCH, seed: int = 0) -> CapsuleNetwork:
    """Rebuild a structurally identical network with fresh route models."""
    net = CapsuleNetwork(patch=patch)
    for name in view.terminals:
        net.add_primitive(PrimitiveCapsule(name, patch))
    for name in view.nonterminals:
        net.add_semantic(
            SemanticCapsule(name, AttributeSchema.from_json(view.schemas[name]))
        )
    for i, rule in enumerate(view.rules):
        slots = [
            RouteSlot(p, AttributeSchema.from_json(view.schemas[p])) for p in rule.parts
        ]
        in_dim = sum(len(s.schema) for s in slots)
        out_dim = len(AttributeSchema.from_json(view.schemas[rule.owner]))
        net.add_route(
            rule.owner,
            Route(
                rule.route_id,
                slots,
                AttributeSchema.from_json(view.schemas[rule.owner]),
                RegressionModel(route_widths(in_dim, out_dim), seed=seed + 2 * i),
                RegressionModel(route_widths(out_dim, in_dim), seed=seed + 2 * i + 1),
            ),
        )
    return net
