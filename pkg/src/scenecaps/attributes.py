"""Attribute schemas, vectors, window functions and the agreement measure.

Every object attribute lives in the unit interval and belongs to one of five
classes: position, rotation, size, adjective or verb.  Rotation slots are
circular (a value of 0.97 is close to 0.02), all other classes compare by
plain absolute difference.  Agreement between two vectors is computed per
slot through a triangular window, optionally maximised over a set of
symmetry-equivalent variants of the first vector, and is the basic currency
of routing: 1.0 means "these attributes tell the same story".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

ATTRIBUTE_CLASSES = ("position", "rotation", "size", "adjective", "verb")


@dataclass(frozen=True)
class SlotSpec:
    """One named attribute slot."""

    name: str
    cls: str
    circular: bool = False

    def __post_init__(self) -> None:
        if self.cls not in ATTRIBUTE_CLASSES:
            raise ValueError(f"unknown attribute class {self.cls!r}")
        # Rotations live on the unit circle, nothing else does.
        if self.cls == "rotation" and not self.circular:
            object.__setattr__(self, "circular", True)
        if self.cls != "rotation" and self.circular:
            raise ValueError(f"slot {self.name!r}: only rotation slots are circular")


class AttributeSchema:
    """Ordered, uniquely named list of slots shared by attribute vectors."""

    def __init__(self, entries: Iterable[SlotSpec | tuple]) -> None:
        slots = []
        for entry in entries:
            if not isinstance(entry, SlotSpec):
                entry = SlotSpec(*entry)
            slots.append(entry)
        names = [s.name for s in slots]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate slot names in schema: {names}")
        self.slots: tuple[SlotSpec, ...] = tuple(slots)
        self._index = {s.name: i for i, s in enumerate(self.slots)}

    def __len__(self) -> int:
        return len(self.slots)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, AttributeSchema) and self.slots == other.slots

    def __hash__(self) -> int:
        return hash(self.slots)

    def __repr__(self) -> str:
        inner = ", ".join(f"{s.name}:{s.cls}" for s in self.slots)
        return f"AttributeSchema({inner})"

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.slots)

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(s.cls for s in self.slots)

    def index(self, name: str) -> int:
        return self._index[name]

    def indices_of(self, cls: str) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.slots) if s.cls == cls)

    def circular_mask(self) -> np.ndarray:
        return np.array([s.circular for s in self.slots], dtype=bool)

    def merge(self, other: "AttributeSchema") -> "AttributeSchema":
        """Order-preserving union; same name and class collapse to one slot."""
        slots = list(self.slots)
        seen = {(s.name, s.cls) for s in slots}
        names = {s.name for s in slots}
        for s in other.slots:
            if (s.name, s.cls) in seen:
                continue
            if s.name in names:
                raise ValueError(f"slot {s.name!r} merges with conflicting class")
            slots.append(s)
            seen.add((s.name, s.cls))
            names.add(s.name)
        return AttributeSchema(slots)

    def to_json(self) -> list:
        return [[s.name, s.cls, s.circular] for s in self.slots]

    @classmethod
    def from_json(cls, data: list) -> "AttributeSchema":
        return cls(SlotSpec(n, c, bool(circ)) for n, c, circ in data)


# The shared layout of every renderable primitive: a pose, a 2D extent and a
# brightness.  Semantic capsules start from merges of this schema.
def pose_schema() -> AttributeSchema:
    return AttributeSchema(
        [
            SlotSpec("x", "position"),
            SlotSpec("y", "position"),
            SlotSpec("rot", "rotation", True),
            SlotSpec("w", "size"),
            SlotSpec("h", "size"),
            SlotSpec("intensity", "adjective"),
        ]
    )


class AttributeVector:
    """Values in [0,1], one per schema slot."""

    __slots__ = ("schema", "values")

    def __init__(self, schema: AttributeSchema, values) -> None:
        arr = np.asarray(values, dtype=float)
        if arr.shape != (len(schema),):
            raise ValueError(f"expected {len(schema)} values, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("attribute values must be finite")
        if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
            raise ValueError(f"attribute values outside [0,1]: {arr}")
        self.schema = schema
        self.values = np.clip(arr, 0.0, 1.0)

    def __repr__(self) -> str:
        pairs = ", ".join(f"{n}={v:.3f}" for n, v in zip(self.schema.names, self.values))
        return f"AttributeVector({pairs})"

    def get(self, name: str) -> float:
        return float(self.values[self.schema.index(name)])

    def replace(self, **updates: float) -> "AttributeVector":
        vals = self.values.copy()
        for name, value in updates.items():
            vals[self.schema.index(name)] = value
        return AttributeVector(self.schema, np.clip(vals, 0.0, 1.0))


def slot_difference(schema: AttributeSchema, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-slot b - a, with circular slots wrapped into [-0.5, 0.5)."""
    diff = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    circ = schema.circular_mask()
    if circ.any():
        diff[circ] = (diff[circ] + 0.5) % 1.0 - 0.5
    return diff


@dataclass(frozen=True)
class WindowConfig:
    """Half-widths of the triangular window per attribute class.

    Geometry is judged tightly, style and motion generously, and the
    activation-ratio term of the routing formula most generously of all.
    """

    position: float = 0.1
    rotation: float = 0.1
    size: float = 0.1
    adjective: float = 0.25
    verb: float = 0.25
    activation: float = 0.5

    def half_width(self, cls: str) -> float:
        return float(getattr(self, cls))

    def per_slot(self, schema: AttributeSchema) -> np.ndarray:
        return np.array([self.half_width(c) for c in schema.classes])


DEFAULT_WINDOW = WindowConfig()


def window(delta, half_width):
    """Triangular window: 1 at zero mismatch, 0 at or beyond the half-width."""
    return np.maximum(0.0, 1.0 - np.abs(delta) / half_width)


@dataclass(frozen=True)
class RotationalSymmetry:
    """Equivalence class of attribute vectors under n-fold rotation.

    fold=1 means no symmetry beyond identity; fold=None marks full circular
    invariance (the rotation slot carries no information at all).
    """

    fold: int | None = 1

    def variants(self, schema: AttributeSchema, values: np.ndarray) -> list[np.ndarray]:
        rot_idx = schema.indices_of("rotation")
        if self.fold is None or not rot_idx or self.fold <= 1:
            return [np.asarray(values, dtype=float)]
        out = []
        for k in range(self.fold):
            v = np.array(values, dtype=float)
            v[list(rot_idx)] = (v[list(rot_idx)] + k / self.fold) % 1.0
            out.append(v)
        return out

    @property
    def rotation_free(self) -> bool:
        return self.fold is None


NO_SYMMETRY = RotationalSymmetry(1)


def agreement(
    a: AttributeVector,
    b: AttributeVector,
    symmetry: RotationalSymmetry = NO_SYMMETRY,
    cfg: WindowConfig = DEFAULT_WINDOW,
) -> np.ndarray:
    """Per-slot agreement of b against the equivalence class of a.

    Returns a vector in [0,1]^n: the windowed difference, maximised over all
    symmetry-equivalent variants of a.  Under full circular invariance the
    rotation slots agree by definition.
    """
    if a.schema != b.schema:
        raise ValueError("agreement requires a shared schema")
    schema = a.schema
    halves = cfg.per_slot(schema)
    best = np.zeros(len(schema))
    for variant in symmetry.variants(schema, a.values):
        diff = slot_difference(schema, variant, b.values)
        best = np.maximum(best, window(diff, halves))
    if symmetry.rotation_free:
        rot_idx = list(schema.indices_of("rotation"))
        if rot_idx:
            best[rot_idx] = 1.0
    return best


def mean_agreement(
    a: AttributeVector,
    b: AttributeVector,
    symmetry: RotationalSymmetry = NO_SYMMETRY,
    cfg: WindowConfig = DEFAULT_WINDOW,
) -> float:
    """Scalar agreement: arithmetic mean of the per-slot vector."""
    z = agreement(a, b, symmetry, cfg)
    return float(z.mean()) if z.size else 0.0
