"""Signed distance fields for the renderable 2D shapes.

All shapes are evaluated on a square canvas whose coordinates run over
[0,1] x [0,1]; positions and extents of a shape are expressed as fractions
of the canvas.  A pixel is inside the shape where the signed distance is
non-positive; rendering applies a one-pixel anti-aliasing ramp around the
zero level set and scales by the intensity attribute.

Shape conventions:
  square    a true square of side (w + h) / 2, rotated by ``rot`` turns
  triangle  an isosceles triangle, base w, height h, apex towards -y,
            rotated by ``rot`` turns
  circle    an axis-aligned ellipse with semi-axes w/2 and h/2; the
            rotation attribute carries no information for this shape
"""

from __future__ import annotations

import numpy as np

SHAPE_KINDS = ("square", "triangle", "circle")
LIT_THRESHOLD = 0.05


def canvas_coords(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinate grids in canvas units."""
    axis = (np.arange(resolution) + 0.5) / resolution
    return np.meshgrid(axis, axis, indexing="xy")


def _rotate_into(px: np.ndarray, py: np.ndarray, cx: float, cy: float, rot: float):
    """Canvas points expressed in the shape's local frame."""
    theta = rot * 2.0 * np.pi
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = px - cx, py - cy
    return c * dx + s * dy, -s * dx + c * dy


def sdf_square(px, py, cx, cy, rot, w, h):
    half = max((w + h) / 4.0, 1e-6)
    lx, ly = _rotate_into(px, py, cx, cy, rot)
    qx, qy = np.abs(lx) - half, np.abs(ly) - half
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside


def sdf_triangle(px, py, cx, cy, rot, w, h):
    w = max(w, 1e-6)
    h = max(h, 1e-6)
    lx, ly = _rotate_into(px, py, cx, cy, rot)
    verts = np.array([[0.0, -h / 2.0], [w / 2.0, h / 2.0], [-w / 2.0, h / 2.0]])
    p = np.stack([lx, ly], axis=-1)
    d2 = None
    sign_all = np.ones(lx.shape, dtype=bool)
    for i in range(3):
        v0 = verts[i]
        v1 = verts[(i + 1) % 3]
        e = v1 - v0
        rel = p - v0
        t = np.clip((rel @ e) / (e @ e), 0.0, 1.0)
        proj = rel - t[..., None] * e
        dist2 = (proj**2).sum(axis=-1)
        d2 = dist2 if d2 is None else np.minimum(d2, dist2)
        cross = e[0] * rel[..., 1] - e[1] * rel[..., 0]
        sign_all &= cross >= 0.0
    d = np.sqrt(d2)
    return np.where(sign_all, -d, d)


def sdf_circle(px, py, cx, cy, rot, w, h):
    # rot intentionally unused: the shape is rotation-invariant by design.
    a = max(w / 2.0, 1e-6)
    b = max(h / 2.0, 1e-6)
    dx, dy = px - cx, py - cy
    k0 = np.hypot(dx / a, dy / b)
    k1 = np.hypot(dx / a**2, dy / b**2)
    return np.where(k1 > 1e-12, k0 * (k0 - 1.0) / np.maximum(k1, 1e-12), -min(a, b))


_SDF = {"square": sdf_square, "triangle": sdf_triangle, "circle": sdf_circle}


def shape_sdf(kind: str, px, py, cx, cy, rot, w, h):
    return _SDF[kind](px, py, cx, cy, rot, w, h)


def coverage(kind: str, px, py, resolution: int, cx, cy, rot, w, h) -> np.ndarray:
    """Per-pixel coverage in [0,1] with a one-pixel anti-aliasing band."""
    d = shape_sdf(kind, px, py, cx, cy, rot, w, h) * resolution
    return np.clip(0.5 - d, 0.0, 1.0)


def render_shape(
    kind: str,
    resolution: int,
    cx: float,
    cy: float,
    rot: float,
    w: float,
    h: float,
    intensity: float,
    coords: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Render one shape on a black canvas of the given resolution."""
    if w <= 1e-4 or h <= 1e-4 or intensity <= 0.0:
        return np.zeros((resolution, resolution))
    px, py = coords if coords is not None else canvas_coords(resolution)
    return intensity * coverage(kind, px, py, resolution, cx, cy, rot, w, h)


def composite_over(frame: np.ndarray, kind: str, cx, cy, rot, w, h, intensity,
                   coords: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Painter-style draw: the shape replaces what is underneath it."""
    resolution = frame.shape[0]
    if w <= 1e-4 or h <= 1e-4:
        return frame
    px, py = coords if coords is not None else canvas_coords(resolution)
    cov = coverage(kind, px, py, resolution, cx, cy, rot, w, h)
    return frame * (1.0 - cov) + intensity * cov


def sdf_gradient(kind: str, x: float, y: float, cx, cy, rot, w, h,
                 step: float = 1e-4) -> np.ndarray:
    """Unit outward normal of the shape boundary near (x, y)."""
    px = np.array([x + step, x - step, x, x])
    py = np.array([y, y, y + step, y - step])
    d = shape_sdf(kind, px, py, cx, cy, rot, w, h)
    grad = np.array([d[0] - d[1], d[2] - d[3]]) / (2.0 * step)
    norm = np.linalg.norm(grad)
    return grad / norm if norm > 1e-12 else np.array([1.0, 0.0])
