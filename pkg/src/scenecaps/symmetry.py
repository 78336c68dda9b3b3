"""Rotational symmetry discovery for capsule decoders.

A capsule has n-fold symmetry when attribute vectors that differ only by a
rotation of 1/n turn decode to parts that agree with each other, judged by
the parts' own agreement functions (pixels for primitives).  Symmetries
found here feed the agreement function's equivalence classes, so a square
rotated by a quarter turn scores a perfect rotation-slot agreement.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .attributes import AttributeSchema, RotationalSymmetry
from .primitives import PrimitiveCapsule, pixel_agreement

CHECKED_FOLDS = (2, 3, 4, 6)
DEFAULT_SAMPLES = 32
DEFAULT_EPSILON = 0.8


def detect_rotational_symmetry(
    decoder: Callable[[np.ndarray], object],
    parts_agreement: Callable[[object, object], float],
    n: int | None,
    epsilon_sym: float = DEFAULT_EPSILON,
    schema: AttributeSchema | None = None,
    sampler: Callable[[np.random.Generator], np.ndarray] | None = None,
    samples: int = DEFAULT_SAMPLES,
    rng: np.random.Generator | None = None,
) -> bool:
    """True iff every sampled pair rotated by 1/n agrees above the threshold.

    n=None probes full circular invariance with random rotation offsets.
    The sampler provides whole-object attribute vectors; by default they
    are drawn uniformly, which requires a schema to locate rotation slots.
    """
    if n is not None and n < 2:
        raise ValueError("fold must be at least 2 (or None for full invariance)")
    if rng is None:
        rng = np.random.default_rng(7)
    if sampler is None:
        if schema is None:
            raise ValueError("need a schema or a sampler to draw attribute vectors")
        sampler = lambda r: r.random(len(schema))
    if schema is None:
        raise ValueError("schema required to locate rotation slots")
    rot_idx = list(schema.indices_of("rotation"))
    if not rot_idx:
        return True

    for _ in range(samples):
        base = np.asarray(sampler(rng), dtype=float)
        shift = rng.uniform(0.1, 0.9) if n is None else 1.0 / n
        rotated = base.copy()
        rotated[rot_idx] = (rotated[rot_idx] + shift) % 1.0
        score = float(parts_agreement(decoder(base), decoder(rotated)))
        if score <= epsilon_sym:
            return False
    return True


def primitive_has_fold(
    caps: PrimitiveCapsule,
    n: int | None,
    epsilon_sym: float = DEFAULT_EPSILON,
    samples: int = DEFAULT_SAMPLES,
    rng: np.random.Generator | None = None,
) -> bool:
    """Check a fold on a primitive by rendering both orientations."""
    return detect_rotational_symmetry(
        caps.render,
        pixel_agreement,
        n,
        epsilon_sym,
        schema=caps.schema,
        sampler=caps.sample_attributes,
        samples=samples,
        rng=rng,
    )


def discover_symmetry(
    caps: PrimitiveCapsule,
    epsilon_sym: float = DEFAULT_EPSILON,
    samples: int = DEFAULT_SAMPLES,
    seed: int = 7,
) -> RotationalSymmetry:
    """Largest verified rotational symmetry of a primitive's renderer."""
    if primitive_has_fold(caps, None, epsilon_sym, samples, np.random.default_rng(seed)):
        return RotationalSymmetry(None)
    for fold in sorted(CHECKED_FOLDS, reverse=True):
        if primitive_has_fold(caps, fold, epsilon_sym, samples, np.random.default_rng(seed)):
            return RotationalSymmetry(fold)
    return RotationalSymmetry(1)
