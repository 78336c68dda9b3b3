"""Shared fixtures: a hand-built, exactly invertible toy network.

The rocket network wires square+triangle+circle into a "ship" capsule and
circle alone into an "asteroid" through single affine layers whose weights
are set analytically, so the encoder inverts the decoder exactly and
expected routing probabilities can be computed by hand.
"""

import numpy as np
import pytest

from scenecaps.attributes import (
    AttributeSchema,
    RotationalSymmetry,
    SlotSpec,
    pose_schema,
)
from scenecaps.capsnet import CapsuleNetwork, Route, RouteSlot, SemanticCapsule
from scenecaps.mlp import RegressionModel, TrainConfig, train
from scenecaps.primitives import standard_primitives


def affine_model(in_dim: int, out_dim: int, W: np.ndarray, b: np.ndarray) -> RegressionModel:
    model = RegressionModel([in_dim, out_dim], seed=0)
    model.weights[0][:] = W
    model.biases[0][:] = b
    return model


# Part layout inside a ship, relative to the parent attributes
# (px, py, prot, pw, ph, pI).  Slot order: square, triangle, circle.
# square   = (px, py,            0,    0.5 pw,  0.5 pw,  pI)
# triangle = (px, py - 0.49 ph,  prot, 0.36 pw, 0.24 pw, pI)
# circle   = (px, py + 0.49 ph,  0,    0.3 pw,  0.3 pw,  pI)
# Geometry is tuned for the stride-4 window detector: parts keep
# several blank pixels between blobs so each one gets a window that
# contains it without clipping a neighbour, while the 0.5 pw square
# keeps the stack inside the forward pass's spatial prefilter bound
# of twice the largest part's size.
def ship_decoder() -> RegressionModel:
    W = np.zeros((6, 18))
    b = np.zeros(18)
    for part, base in (("square", 0), ("triangle", 6), ("circle", 12)):
        W[0, base + 0] = 1.0  # x <- px
        W[1, base + 1] = 1.0  # y <- py
        W[5, base + 5] = 1.0  # intensity <- pI
    W[3, 0 + 3] = 0.5
    W[3, 0 + 4] = 0.5
    W[2, 6 + 2] = 1.0  # triangle carries the parent rotation
    W[4, 6 + 1] = -0.49  # triangle.y = py - 0.49 ph
    W[3, 6 + 3] = 0.36
    W[3, 6 + 4] = 0.24
    W[4, 12 + 1] = 0.49  # circle.y = py + 0.49 ph
    W[3, 12 + 3] = 0.3
    W[3, 12 + 4] = 0.3
    return affine_model(6, 18, W, b)


def ship_encoder() -> RegressionModel:
    W = np.zeros((18, 6))
    b = np.zeros(6)
    W[0 + 0, 0] = 1.0  # px <- square.x
    W[0 + 1, 1] = 1.0  # py <- square.y
    W[6 + 2, 2] = 1.0  # prot <- triangle.rot
    W[0 + 3, 3] = 2.0  # pw <- square.w / 0.5
    # ph <- (square.y - triangle.y) / 0.49
    W[0 + 1, 4] = 1.0 / 0.49
    W[6 + 1, 4] = -1.0 / 0.49
    W[0 + 5, 5] = 1.0  # pI <- square.intensity
    return affine_model(18, 6, W, b)


def identity_route_models() -> tuple[RegressionModel, RegressionModel]:
    eye = np.eye(6)
    return affine_model(6, 6, eye, np.zeros(6)), affine_model(6, 6, eye, np.zeros(6))


def build_rocket_network() -> CapsuleNetwork:
    net = CapsuleNetwork()
    for cap in standard_primitives():
        net.add_primitive(cap)
    schema = pose_schema()

    ship = SemanticCapsule("ship", schema)
    net.add_semantic(ship)
    slots = [RouteSlot(k, pose_schema()) for k in ("square", "triangle", "circle")]
    net.add_route("ship", Route(0, slots, schema, ship_encoder(), ship_decoder()))

    asteroid = SemanticCapsule("asteroid", schema)
    net.add_semantic(asteroid)
    enc, dec = identity_route_models()
    net.add_route("asteroid", Route(0, [RouteSlot("circle", pose_schema())], schema, enc, dec))
    return net


def ship_parts(parent: np.ndarray) -> dict[str, np.ndarray]:
    """Ground-truth part attributes for given parent attributes."""
    px, py, prot, pw, ph, pI = parent
    return {
        "square": np.array([px, py, 0.0, 0.5 * pw, 0.5 * pw, pI]),
        "triangle": np.array([px, py - 0.49 * ph, prot, 0.36 * pw, 0.24 * pw, pI]),
        "circle": np.array([px, py + 0.49 * ph, 0.0, 0.3 * pw, 0.3 * pw, pI]),
    }


@pytest.fixture
def rocket_net() -> CapsuleNetwork:
    return build_rocket_network()


# ----------------------------------------------------------------------
# physics fixtures


def build_shapes_network() -> CapsuleNetwork:
    net = CapsuleNetwork()
    for cap in standard_primitives():
        net.add_primitive(cap)
    return net


def verbed_schema(*verbs: str) -> AttributeSchema:
    return AttributeSchema(
        list(pose_schema().slots) + [SlotSpec(v, "verb") for v in verbs]
    )


def _train_eight_route(seed: int = 0) -> Route:
    """Two-lobe route learned from analytic samples.

    Parse trees always write the parent rotation into the (render-inert)
    lobe rotation slots, so the encoder is trained to read it back mod one
    half-turn, canonicalized to [0.02, 0.48]; both lobe orders and both
    half-turn offsets are covered since detection order is arbitrary. The
    decoder emits lobes whose rotation equals the parent's.
    """
    from scenecaps.physics import lobe_centers

    rng = np.random.default_rng(seed)
    n = 3000
    parents = np.zeros((n, 6))
    parents[:, 0:2] = rng.uniform(0.25, 0.75, (n, 2))
    parents[:, 2] = rng.uniform(0.02, 0.48, n)
    parents[:, 3] = rng.uniform(0.08, 0.15, n)
    parents[:, 4] = parents[:, 3] * rng.uniform(1.7, 2.3, n)
    parents[:, 5] = rng.uniform(0.6, 1.0, n)

    lobes = np.zeros((n, 2, 6))
    for k, (x, y, rot, w, h, i) in enumerate(parents):
        for s, (cx, cy) in enumerate(lobe_centers(x, y, rot, w, h)):
            lobes[k, s] = [cx, cy, rot, w, w, i]

    enc_x, enc_y = [], []
    for order in ((0, 1), (1, 0)):
        exposed = lobes[:, order, :].reshape(n, 12).copy()
        raw = (parents[:, 2] + 0.5 * rng.integers(0, 2, n)) % 1.0
        exposed[:, 2] = raw
        exposed[:, 8] = raw
        enc_x.append(exposed)
        enc_y.append(parents)
    enc_x = np.concatenate(enc_x)
    enc_y = np.concatenate(enc_y)
    dec_x = parents
    dec_y = lobes.reshape(n, 12)

    encoder = RegressionModel([12, 24, 24, 24, 6], seed=seed)
    decoder = RegressionModel([6, 24, 24, 24, 12], seed=seed + 1)
    # At the default small init the half-turn fold of the rotation sits on
    # an affine plateau SGD cannot leave; a hotter first layer crosses it.
    encoder.weights[0] = encoder.weights[0] * 4.0
    decoder.weights[0] = decoder.weights[0] * 2.0
    for k, (epochs, lr) in enumerate(((1200, 0.3), (600, 0.1), (300, 0.03))):
        encoder, _ = train(
            encoder, (enc_x, enc_y),
            TrainConfig(epochs=epochs, batch_size=32, learning_rate=lr, seed=seed + k),
        )
    for k, (epochs, lr) in enumerate(((900, 0.3), (450, 0.1), (200, 0.03))):
        decoder, _ = train(
            decoder, (dec_x, dec_y),
            TrainConfig(epochs=epochs, batch_size=32, learning_rate=lr, seed=seed + k),
        )
    pose = pose_schema()
    return Route(0, [RouteSlot("circle", pose), RouteSlot("circle", pose)], pose,
                 encoder, decoder)


def build_windmill_network(seed: int = 0) -> CapsuleNetwork:
    """Shapes plus a spinnable two-lobe body under a verbed scene capsule.

    windmill-scene(spin) decodes to one figure-eight whose rotation is
    rot + spin/2; the figure-eight decodes to its two tangent disc lobes
    through a trained route and carries the 2-fold symmetry that makes
    rotations half a turn apart indistinguishable.
    """
    net = build_shapes_network()
    pose = pose_schema()

    eight = SemanticCapsule("eight", pose, RotationalSymmetry(2))
    net.add_semantic(eight)
    net.add_route("eight", _train_eight_route(seed))

    wm_schema = verbed_schema("spin")
    Wd = np.zeros((7, 6))
    Wd[0, 0] = 1.0
    Wd[1, 1] = 1.0
    Wd[2, 2] = 1.0
    Wd[6, 2] = 0.5  # eight.rot = rot + 0.5 spin
    Wd[3, 3] = 1.0
    Wd[3, 4] = 2.0  # eight.h = 2 w
    Wd[5, 5] = 1.0
    We = np.zeros((6, 7))
    We[0, 0] = 1.0
    We[1, 1] = 1.0
    We[3, 3] = 1.0
    We[4, 4] = 0.5
    We[5, 5] = 1.0
    We[2, 6] = 2.0  # spin = 2 eight.rot (scene rot reads as zero)
    wm = SemanticCapsule("windmill-scene", wm_schema)
    net.add_semantic(wm)
    net.add_route(
        "windmill-scene",
        Route(0, [RouteSlot("eight", pose)], wm_schema,
              affine_model(6, 7, We, np.zeros(7)),
              affine_model(7, 6, Wd, np.zeros(6))),
    )
    return net


def build_hinge_network() -> CapsuleNetwork:
    """Two overlapping square arms driven by a bend verb, exactly affine.

    Arm A stays put; arm B slides and tilts with bend while always
    overlapping A, which is the signature of a 1-dof joint.
    """
    net = build_shapes_network()
    pose = pose_schema()
    hinge_schema = verbed_schema("bend")
    W = np.zeros((7, 12))
    b = np.zeros(12)
    W[0, 0] = 1.0
    b[0] = -0.1
    W[1, 1] = 1.0
    b[3] = b[4] = 0.16
    W[5, 5] = 1.0
    W[0, 6] = 1.0
    b[6] = 0.05
    W[1, 7] = 1.0
    b[7] = -0.06
    W[6, 7] = 0.12
    W[6, 8] = 0.05
    b[9] = b[10] = 0.16
    W[5, 11] = 1.0
    hinge = SemanticCapsule("hinge-scene", hinge_schema)
    net.add_semantic(hinge)
    net.add_route(
        "hinge-scene",
        Route(0, [RouteSlot("square", pose), RouteSlot("square", pose)],
              hinge_schema,
              affine_model(12, 7, np.zeros((12, 7)), np.zeros(7)),
              affine_model(7, 12, W, b)),
    )
    return net


@pytest.fixture(scope="session")
def shapes_net() -> CapsuleNetwork:
    return build_shapes_network()


@pytest.fixture(scope="session")
def windmill_net() -> CapsuleNetwork:
    return build_windmill_network()


@pytest.fixture(scope="session")
def disc_models(shapes_net):
    """Physics nets trained on the synthetic disc diet; shared because
    training dominates the suite's runtime."""
    from scenecaps import physics as ph

    seqs = ph.training_mix(collisions=50, contacts=40, misses=10, forced=10, seed=100)
    return ph.train_physics(shapes_net, seqs, config=lean_physics_config(), seed=0)


@pytest.fixture(scope="session")
def rotor_models(windmill_net):
    """Physics nets that have also seen disc-on-rotor impacts."""
    from scenecaps import physics as ph

    seqs = ph.training_mix(collisions=40, contacts=30, misses=8, forced=8, seed=200)
    seqs += ph.rotor_scenes(30, seed=201)
    context = ph.physics_context(windmill_net)
    return ph.train_physics(
        windmill_net, seqs, config=lean_physics_config(), context=context, seed=1
    )


def lean_physics_config():
    from scenecaps.physics import TrainPhysicsConfig

    return TrainPhysicsConfig(
        relation_stages=((260, 0.1), (160, 0.03), (80, 0.01)),
        object_stages=((260, 0.08), (120, 0.02)),
        boost=3,
        augmentations=6,
    )
