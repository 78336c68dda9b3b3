"""Episodic memory: time-ordered parse trees on branching time-lines.

The main time-line holds only perceived observations; predictions and
fabrications live on forks (or, with no origin at all, on fresh root
time-lines).  Forks can merge back into any other time-line as long as
the graph stays acyclic.  Storage is an append-only JSON-lines log of
observations plus a small index file for the graph structure, so a
crash can lose at most the last partially written line.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field

from .capsnet import ParseTree
from .tracking import CameraPose

KINDS = ("perceived", "predicted", "fabricated")
MAIN_TIMELINE = 0


@dataclass
class Observation:
    """One remembered frame: the parse trees observed (or imagined) at
    time t, with the camera pose and free-form source metadata."""

    id: int
    kind: str
    t: float
    trees: list[ParseTree]
    camera: CameraPose = field(default_factory=CameraPose)
    meta: dict = field(default_factory=dict)
    timeline: int = MAIN_TIMELINE

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown observation kind {self.kind!r}")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "t": self.t,
            "timeline": self.timeline,
            "camera": self.camera.to_json(),
            "meta": self.meta,
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Observation":
        return cls(
            int(data["id"]),
            data["kind"],
            float(data["t"]),
            [ParseTree.from_json(t) for t in data["trees"]],
            CameraPose.from_json(data["camera"]),
            data.get("meta", {}),
            int(data.get("timeline", MAIN_TIMELINE)),
        )


def scene_graph(obs: Observation) -> dict:
    """Flatten an observation into scene-graph JSON: symbol nodes with
    part-of edges plus a meta block (type, time, camera)."""
    nodes = []

    def walk(tree: ParseTree, parent: int | None) -> None:
        node_id = len(nodes)
        nodes.append(
            {
                "id": node_id,
                "symbol": tree.capsule,
                "attributes": dict(
                    zip(tree.attrs.schema.names, tree.attrs.values.tolist())
                ),
                "part_of": parent,
            }
        )
        for child in tree.children:
            walk(child, node_id)

    for tree in obs.trees:
        walk(tree, None)
    return {
        "meta": {"type": obs.kind, "time": obs.t, "camera": obs.camera.to_json()},
        "nodes": nodes,
    }


@dataclass
class Timeline:
    id: int
    origin: int | None  # observation id this time-line forked from
    nodes: list[int] = field(default_factory=list)


class TimelineGraph:
    """Fork/merge bookkeeping over observation ids.

    The main time-line is a plain chain; every fork hangs off exactly
    one origin observation, and merge edges may point anywhere that
    does not close a cycle.
    """

    def __init__(self) -> None:
        self.timelines: dict[int, Timeline] = {
            MAIN_TIMELINE: Timeline(MAIN_TIMELINE, None)
        }
        self.merges: list[tuple[int, int]] = []  # (from obs, to obs)

    def fork(self, origin_obs: int | None) -> int:
        tid = max(self.timelines) + 1
        self.timelines[tid] = Timeline(tid, origin_obs)
        return tid

    def add_node(self, timeline_id: int, obs_id: int) -> None:
        self.timelines[timeline_id].nodes.append(obs_id)

    def edges(self) -> list[tuple[int, int]]:
        out = []
        for tl in self.timelines.values():
            chain = tl.nodes
            if tl.origin is not None and chain:
                out.append((tl.origin, chain[0]))
            out.extend(zip(chain, chain[1:]))
        out.extend(self.merges)
        return out

    def is_acyclic(self, extra: tuple[int, int] | None = None) -> bool:
        adj: dict[int, list[int]] = {}
        edges = self.edges() + ([extra] if extra else [])
        for a, b in edges:
            adj.setdefault(a, []).append(b)
        state: dict[int, int] = {}  # 1 in progress, 2 done

        def visit(node: int) -> bool:
            state[node] = 1
            for nxt in adj.get(node, ()):
                mark = state.get(nxt)
                if mark == 1 or (mark is None and not visit(nxt)):
                    return False
            state[node] = 2
            return True

        return all(state.get(n) == 2 or visit(n) for n in list(adj))

    def merge(self, fork_id: int, target_obs: int, target_timeline: int) -> None:
        fork = self.timelines[fork_id]
        if not fork.nodes:
            raise ValueError("cannot merge an empty time-line")
        if target_timeline == fork_id:
            raise ValueError("cannot merge a time-line into itself")
        edge = (fork.nodes[-1], target_obs)
        if not self.is_acyclic(edge):
            raise ValueError("merge would create a cycle")
        self.merges.append(edge)

    def to_json(self) -> dict:
        return {
            "timelines": {
                str(t.id): {"origin": t.origin, "nodes": t.nodes}
                for t in self.timelines.values()
            },
            "merges": [list(e) for e in self.merges],
        }

    @classmethod
    def from_json(cls, data: dict) -> "TimelineGraph":
        graph = cls()
        for key, val in data.get("timelines", {}).items():
            tid = int(key)
            graph.timelines[tid] = Timeline(tid, val["origin"], list(val["nodes"]))
        graph.merges = [tuple(e) for e in data.get("merges", [])]
        return graph


def _tree_distance(a: list[ParseTree], b: list[ParseTree]) -> float:
    """Mean slot distance between the two observations' root trees,
    matched greedily by capsule name; missing counterparts count as 1."""
    remaining = list(b)
    dists = []
    for tree in a:
        match = next((t for t in remaining if t.capsule == tree.capsule), None)
        if match is None:
            dists.append(1.0)
            continue
        remaining.remove(match)
        diff = tree.attrs.values - match.attrs.values
        dists.append(float(abs(diff).mean()))
    dists.extend(1.0 for _ in remaining)
    return sum(dists) / len(dists) if dists else 0.0


class EpisodicMemory:
    """Append-only observation store with branching time-lines.

    A single writer appends; readers take snapshots under the same
    lock, so they always see a consistent prefix of the log.
    """

    def __init__(self, directory: str | None = None):
        self.directory = directory
        self.observations: dict[int, Observation] = {}
        self.order: list[int] = []
        self.graph = TimelineGraph()
        self._lock = threading.RLock()
        if directory is not None:
            os.makedirs(directory, exist_ok=True)

    @property
    def log_path(self) -> str:
        return os.path.join(self.directory, "observations.jsonl")

    @property
    def index_path(self) -> str:
        return os.path.join(self.directory, "timelines.json")

    # -- write side ------------------------------------------------------

    def append(
        self,
        trees: list[ParseTree],
        kind: str = "perceived",
        t: float | None = None,
        camera: CameraPose | None = None,
        meta: dict | None = None,
        origin: int | None = None,
    ) -> int:
        """Store one observation and return its id.

        Perceived observations extend the main chain and must carry
        strictly increasing timestamps.  Predictions and fabrications
        are forbidden there: with an origin they fork from it (or
        extend a fork they are already the tail of), without one a
        fabrication starts a fresh root time-line.
        """
        with self._lock:
            obs_id = len(self.order)
            if kind == "perceived":
                if origin is not None:
                    raise ValueError("perceived observations follow the main chain")
                timeline = MAIN_TIMELINE
            elif origin is None:
                if kind == "predicted":
                    raise ValueError("a prediction needs an origin observation")
                timeline = self.graph.fork(None)
            else:
                parent = self.observations[origin]
                tail = self.graph.timelines[parent.timeline].nodes
                if parent.timeline != MAIN_TIMELINE and tail and tail[-1] == origin:
                    timeline = parent.timeline
                else:
                    timeline = self.graph.fork(origin)

            chain = self.graph.timelines[timeline].nodes
            if t is None:
                t = self._next_t(timeline)
            if chain and self.observations[chain[-1]].t >= t:
                raise ValueError("timestamps must strictly increase")

            obs = Observation(
                obs_id, kind, float(t), list(trees),
                camera or CameraPose(), meta or {}, timeline,
            )
            self.observations[obs_id] = obs
            self.order.append(obs_id)
            self.graph.add_node(timeline, obs_id)
            self._persist(obs)
            return obs_id

    def _next_t(self, timeline: int) -> float:
        chain = self.graph.timelines[timeline].nodes
        if chain:
            return self.observations[chain[-1]].t + 1.0
        origin = self.graph.timelines[timeline].origin
        if origin is not None:
            return self.observations[origin].t + 1.0
        return 0.0

    def fork(self, origin_id: int) -> int:
        with self._lock:
            if origin_id not in self.observations:
                raise KeyError(origin_id)
            tid = self.graph.fork(origin_id)
            self._persist_index()
            return tid

    def merge(
        self, fork_id: int, target_id: int, max_distance: float | None = None
    ) -> None:
        """Join a fork's tail to a target observation.

        When max_distance is given the fork only merges if its tail's
        trees sit within that mean attribute distance of the target's;
        omit it to merge unconditionally.
        """
        with self._lock:
            target = self.observations[target_id]
            if max_distance is not None:
                tail_id = self.graph.timelines[fork_id].nodes[-1]
                gap = _tree_distance(self.observations[tail_id].trees, target.trees)
                if gap > max_distance:
                    raise ValueError(
                        f"fork disagrees with target (distance {gap:.3f})"
                    )
            self.graph.merge(fork_id, target_id, target.timeline)
            self._persist_index()

    # -- read side ---------------------------------------------------------

    def snapshot(self) -> list[Observation]:
        with self._lock:
            return [self.observations[i] for i in self.order]

    def main_chain(self) -> list[Observation]:
        with self._lock:
            chain = self.graph.timelines[MAIN_TIMELINE].nodes
            return [self.observations[i] for i in chain]

    def timeline(self, timeline_id: int) -> list[Observation]:
        with self._lock:
            chain = self.graph.timelines[timeline_id].nodes
            return [self.observations[i] for i in chain]

    def filtered(
        self, kind: str | None = None, timeline: int | None = None
    ) -> list[Observation]:
        with self._lock:
            out = []
            for i in self.order:
                obs = self.observations[i]
                if kind is not None and obs.kind != kind:
                    continue
                if timeline is not None and obs.timeline != timeline:
                    continue
                out.append(obs)
            return out

    def __len__(self) -> int:
        return len(self.order)

    # -- persistence ---------------------------------------------------------

    def _persist(self, obs: Observation) -> None:
        if self.directory is None:
            return
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(obs.to_json()) + "\n")
        self._persist_index()

    def _persist_index(self) -> None:
        if self.directory is None:
            return
        tmp = self.index_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.graph.to_json(), fh)
        os.replace(tmp, self.index_path)

    @classmethod
    def load(cls, directory: str) -> "EpisodicMemory":
        """Rebuild from disk, ignoring a torn trailing log line."""
        memory = cls.__new__(cls)
        memory.directory = directory
        memory.observations = {}
        memory.order = []
        memory.graph = TimelineGraph()
        memory._lock = threading.RLock()
        os.makedirs(directory, exist_ok=True)
        if os.path.exists(memory.log_path):
            with open(memory.log_path, encoding="utf-8") as fh:
                for line in fh:
                    try:
                        obs = Observation.from_json(json.loads(line))
                    except (json.JSONDecodeError, KeyError):
                        continue
                    memory.observations[obs.id] = obs
                    memory.order.append(obs.id)
        if os.path.exists(memory.index_path):
            with open(memory.index_path, encoding="utf-8") as fh:
                memory.graph = TimelineGraph.from_json(json.load(fh))
            # Drop index entries for observations lost to a torn line.
            for tl in memory.graph.timelines.values():
                tl.nodes = [n for n in tl.nodes if n in memory.observations]
        # Re-attach logged observations the index never saw (a crash can
        # land between the log append and the index rewrite).
        known = {
            n for tl in memory.graph.timelines.values() for n in tl.nodes
        }
        for obs_id in memory.order:
            if obs_id in known:
                continue
            obs = memory.observations[obs_id]
            while obs.timeline not in memory.graph.timelines:
                memory.graph.fork(None)
            memory.graph.add_node(obs.timeline, obs_id)
        return memory
