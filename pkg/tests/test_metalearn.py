"""One-shot growth of the network: priors, augmentation, detection,
decision matrix, oracle protocol, and the four mutation actions."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenecaps.attributes import (
    AttributeSchema,
    AttributeVector,
    SlotSpec,
    pose_schema,
)
from scenecaps.capsnet import (
    CapsuleNetwork,
    ObservationEntry,
    SemanticCapsule,
    forest_entries,
    forward_pass,
)
from scenecaps.mlp import TrainConfig
from scenecaps.primitives import standard_primitives
from scenecaps.metalearn import (
    ACTIONS,
    AugmentConfig,
    DecisionMatrix,
    FeatureVector,
    OracleAnswer,
    OracleQuestion,
    ScriptedOracle,
    add_attribute,
    append_scaled_observation,
    apply_answer,
    augment,
    decide,
    detect_incomplete,
    learn_scene,
    make_route,
    parameterization_report,
    prior_parent,
    train_route,
)

from conftest import affine_model, build_rocket_network, ship_parts

SCHEMA = pose_schema()

# A rocket (square body, triangle tip, circle exhaust) plus one stray
# circle far enough away that no part of the rocket reaches it.
ROCKET = {
    "square": (0.5, 0.5, 0.0, 0.25, 0.25, 0.95),
    "triangle": (0.5, 0.255, 0.0, 0.18, 0.12, 0.95),
    "circle": (0.5, 0.745, 0.0, 0.15, 0.15, 0.95),
}
STRAY_CIRCLE = (0.88, 0.1, 0.0, 0.15, 0.15, 0.9)

# Training budget for tests that only exercise plumbing, not admission.
TINY_AUG = AugmentConfig(samples=24)
TINY_TRAIN = TrainConfig(epochs=40, batch_size=8, learning_rate=0.05)


def primitive_net() -> CapsuleNetwork:
    net = CapsuleNetwork()
    for caps in standard_primitives():
        net.add_primitive(caps)
    return net


def make_tables(net, vals, p=1.0):
    uid, tables = 0, {}
    for name in net.primitives:
        rows = []
        for v in vals.get(name, []):
            rows.append(ObservationEntry(uid, name, p, AttributeVector(SCHEMA, v)))
            uid += 1
        tables[name] = rows
    return tables


def belt_tables(net, p=1.0):
    return make_tables(
        net,
        {
            "square": [ROCKET["square"]],
            "triangle": [ROCKET["triangle"]],
            "circle": [ROCKET["circle"], STRAY_CIRCLE],
        },
        p,
    )


def rocket_tables(net, p=1.0):
    return make_tables(net, {k: [v] for k, v in ROCKET.items()}, p)


def wiring(net):
    return {
        name: [[s.capsule for s in r.slots] for r in caps.routes]
        for name, caps in net.semantic.items()
    }


# A flat composition: ship explains the rocket, asteroid the stray
# circle, and a scene capsule binds the two.  Learned end to end from
# a three-answer script; the shared matrix collects the votes.
@pytest.fixture(scope="module")
def flat_scene():
    net = primitive_net()
    tables = belt_tables(net)
    matrix = DecisionMatrix()
    oracle = ScriptedOracle(
        [
            OracleAnswer(0, "A.2", "ship"),
            OracleAnswer(0, "A.2", "asteroid", parts=("circle",)),
            OracleAnswer(0, "A.2", "belt-scene", parts=("ship", "asteroid")),
        ]
    )
    steps = learn_scene(net, tables, oracle, matrix=matrix)
    return net, tables, steps, matrix


# The same scene carved differently: booster and shuttle share the
# triangle, so the parse is a DAG rather than a tree.
@pytest.fixture(scope="module")
def shared_part_scene():
    net = primitive_net()
    tables = belt_tables(net)
    oracle = ScriptedOracle(
        [
            OracleAnswer(0, "A.2", "booster", parts=("square", "triangle")),
            OracleAnswer(0, "A.2", "shuttle", parts=("triangle", "circle")),
            OracleAnswer(0, "A.2", "ship", parts=("booster", "shuttle")),
            OracleAnswer(0, "A.2", "asteroid", parts=("circle",)),
            OracleAnswer(0, "A.2", "belt-scene", parts=("ship", "asteroid")),
        ]
    )
    steps = learn_scene(net, tables, oracle)
    return net, tables, steps


# ----------------------------------------------------------------------
# prior parent attributes


def test_prior_single_part_round_trip():
    part = AttributeVector(SCHEMA, [0.3, 0.4, 0.1, 0.2, 0.1, 0.8])
    out = prior_parent(SCHEMA, [part])
    assert np.allclose(out.values, part.values, atol=1e-9)


# Two touching squares of width 0.2: corner union spans [0.2, 0.6] x
# [0.4, 0.6], so the parent box is twice as wide as tall with its centre
# at the midpoint.  Cross-checked against an axis-aligned corner oracle.
def test_prior_two_touching_squares_bounding_box():
    a = AttributeVector(SCHEMA, [0.3, 0.5, 0.0, 0.2, 0.2, 0.8])
    b = AttributeVector(SCHEMA, [0.5, 0.5, 0.0, 0.2, 0.2, 0.8])
    corners = []
    for part in (a, b):
        x, y, _, w, h, _ = part.values
        corners.extend(
            [(x + sx * w / 2, y + sy * h / 2) for sx in (-1, 1) for sy in (-1, 1)]
        )
    lo = np.min(corners, axis=0)
    hi = np.max(corners, axis=0)
    expected = [*((lo + hi) / 2), 0.0, *(hi - lo), 0.8]

    out = prior_parent(SCHEMA, [a, b])
    assert np.allclose(out.values, expected, atol=1e-9)
    assert np.allclose(out.values, [0.4, 0.5, 0.0, 0.4, 0.2, 0.8], atol=1e-9)


def test_prior_equal_adjectives_average_to_same_value():
    a = AttributeVector(SCHEMA, [0.3, 0.5, 0.0, 0.2, 0.2, 0.2])
    b = AttributeVector(SCHEMA, [0.6, 0.5, 0.0, 0.2, 0.2, 0.2])
    assert prior_parent(SCHEMA, [a, b]).get("intensity") == pytest.approx(0.2)


def test_prior_zero_sizes_fall_back_to_unweighted_mean():
    a = AttributeVector(SCHEMA, [0.2, 0.5, 0.2, 0.0, 0.0, 0.4])
    b = AttributeVector(SCHEMA, [0.6, 0.5, 0.4, 0.0, 0.0, 0.8])
    out = prior_parent(SCHEMA, [a, b])
    assert out.get("rot") == pytest.approx(0.3)
    assert out.get("intensity") == pytest.approx(0.6)


def test_prior_requires_parts():
    with pytest.raises(ValueError):
        prior_parent(SCHEMA, [])


# ----------------------------------------------------------------------
# augmentation


def _rocket_seed():
    order = ("square", "triangle", "circle")
    return np.concatenate([np.asarray(ROCKET[k], dtype=float) for k in order])


def test_augment_zero_ranges_yield_copies():
    schemas = [SCHEMA] * 3
    seed = _rocket_seed()
    cfg = AugmentConfig(samples=5, translation=0.0, rotation=0.0, scale_range=(1.0, 1.0))
    x, y = augment(schemas, [seed], SCHEMA, cfg, np.random.default_rng(0))
    assert x.shape == (6, 18)
    assert np.allclose(x, seed, atol=1e-12)
    label = prior_parent(SCHEMA, [AttributeVector(SCHEMA, v) for v in seed.reshape(3, 6)])
    assert np.allclose(y, label.values, atol=1e-12)


# Every augmented sample must be one similarity transform of the seed:
# recover (rotation, scale, shift) from the part positions by linear
# least squares and check the residual, the rotation slots, and sizes.
def test_augment_samples_are_rigid_transforms_of_the_seed():
    schemas = [SCHEMA] * 3
    seed = _rocket_seed()
    cfg = AugmentConfig(
        samples=40, translation=0.04, rotation=0.04, scale_range=(0.97, 1.03)
    )
    x, _ = augment(schemas, [seed], SCHEMA, cfg, np.random.default_rng(1))
    p = seed.reshape(3, 6)[:, :2]
    for row in x[1:]:
        assert (row >= 0.0).all() and (row <= 1.0).all()
        q = row.reshape(3, 6)[:, :2]
        m = np.zeros((6, 4))
        m[0::2] = np.stack([p[:, 0], -p[:, 1], np.ones(3), np.zeros(3)], axis=1)
        m[1::2] = np.stack([p[:, 1], p[:, 0], np.zeros(3), np.ones(3)], axis=1)
        theta, *_ = np.linalg.lstsq(m, q.reshape(-1), rcond=None)
        a, b = theta[0], theta[1]
        assert np.linalg.norm(m @ theta - q.reshape(-1)) < 1e-6
        scale = float(np.hypot(a, b))
        turns = float(np.arctan2(b, a) / (2.0 * np.pi)) % 1.0
        rot_shift = (row.reshape(3, 6)[:, 2] - seed.reshape(3, 6)[:, 2]) % 1.0
        wrapped = (rot_shift - turns + 0.5) % 1.0 - 0.5
        assert np.allclose(wrapped, 0.0, atol=1e-9)
        assert np.allclose(row.reshape(3, 6)[:, 3:5], seed.reshape(3, 6)[:, 3:5] * scale, atol=1e-9)


# An adjective nobody has observed yet gets one shared random value per
# sample, so the parts of one object always agree on their style.
def test_augment_randomizes_unused_adjectives_in_lockstep():
    schema = AttributeSchema(list(SCHEMA.slots) + [SlotSpec("metal", "adjective")])
    parts = [
        [0.4, 0.5, 0.0, 0.2, 0.2, 0.9, 0.0],
        [0.6, 0.5, 0.0, 0.2, 0.2, 0.8, 0.0],
    ]
    seed = np.concatenate(parts)
    cfg = AugmentConfig(samples=30, translation=0.0, rotation=0.0, scale_range=(1.0, 1.0))
    x, _ = augment([schema, schema], [seed], schema, cfg, np.random.default_rng(2))
    metal = x[1:, [6, 13]]
    assert np.allclose(metal[:, 0], metal[:, 1], atol=1e-12)
    assert (metal >= 0.0).all() and (metal <= 1.0).all()
    assert len(np.unique(np.round(metal[:, 0], 6))) > 5
    # Used adjectives stay untouched.
    assert np.allclose(x[1:, [5, 12]], [0.9, 0.8], atol=1e-12)


def test_augment_requires_observations():
    with pytest.raises(ValueError):
        augment([SCHEMA], [], SCHEMA)


# ----------------------------------------------------------------------
# route training


def _net_with_blob(parts=("circle",), schema=None, seed=5):
    net = primitive_net()
    if schema is None:
        schema = SCHEMA
    caps = SemanticCapsule("blob", schema)
    net.add_semantic(caps)
    route = make_route(net, 0, list(parts), schema, seed)
    net.add_route("blob", route)
    return net, route


def test_train_route_one_shot_admits_the_seed():
    net, _ = _net_with_blob(("square", "triangle", "circle"))
    route = net.semantic["blob"].routes[0]
    seed = _rocket_seed()
    report = train_route(route, [seed], rng=np.random.default_rng(0))
    assert report.samples == AugmentConfig().samples + 1
    assert report.mean_deviation < report.max_deviation + 1e-12

    inputs = [
        (1.0, AttributeVector(SCHEMA, ROCKET[k]))
        for k in ("square", "triangle", "circle")
    ]
    syms = [net.symmetry_of(k) for k in ("square", "triangle", "circle")]
    assert route.forward(inputs, syms).p > 0.7


# Ten scenes instead of one: reconstruction over the same ten must
# improve once they are all in the training set.
def test_train_route_more_observations_reduce_deviation():
    parents = [
        np.array([0.35 + 0.03 * i, 0.4 + 0.02 * i, 0.0, 0.4 + 0.015 * i, 0.45, 0.9])
        for i in range(10)
    ]
    seeds = [
        np.concatenate([ship_parts(p)[k] for k in ("square", "triangle", "circle")])
        for p in parents
    ]

    def deviation(route):
        x = np.asarray(seeds)
        recon = route.decoder.infer(route.encoder.infer(x))
        return float(np.linalg.norm(recon - x, axis=1).mean())

    _, one = _net_with_blob(("square", "triangle", "circle"), seed=9)
    train_route(one, seeds[:1], rng=np.random.default_rng(0))
    _, ten = _net_with_blob(("square", "triangle", "circle"), seed=9)
    train_route(ten, seeds, rng=np.random.default_rng(0))
    assert deviation(ten) < deviation(one)


def test_train_route_requires_observations():
    _, route = _net_with_blob()
    with pytest.raises(ValueError):
        train_route(route, [])


# ----------------------------------------------------------------------
# incompleteness detection


def _passes(net, tables):
    full = forward_pass(net, tables)
    sub = forward_pass(net, tables, activation_threshold=0.0, update_stats=False)
    return full, sub


def test_detect_quiet_when_one_axiom_covers_the_scene():
    net = build_rocket_network()
    tables = make_tables(net, {k: [tuple(v)] for k, v in ship_parts(
        np.array([0.5, 0.5, 0.0, 0.5, 0.5, 1.0])).items()})
    full, sub = _passes(net, tables)
    assert [e.capsule for e in forest_entries(full)] == ["ship"]
    assert detect_incomplete(net, full, sub) == []


def test_detect_virgin_network_proposes_the_cluster():
    net = primitive_net()
    full, sub = _passes(net, rocket_tables(net))
    questions = detect_incomplete(net, full, sub)
    assert len(questions) == 1
    q = questions[0]
    assert q.parts == ("square", "triangle", "circle")
    assert q.candidate is None
    assert q.features.no_missing_parent
    assert not q.features.shared_missing_parent


def test_detect_flags_parts_tracked_from_previous_frames():
    net = primitive_net()
    full, sub = _passes(net, rocket_tables(net))
    q = detect_incomplete(net, full, sub, tracked=frozenset({0, 1, 2}))[0]
    assert q.features.parts_tracked
    q = detect_incomplete(net, full, sub, tracked=frozenset({0}))[0]
    assert not q.features.parts_tracked


# A known parent that scores below the activation threshold everywhere
# becomes the question's candidate.  Suppression via the activation
# window: after admissions at p = 0.9, parts arriving at p = 0.675 sit
# one half-window low, so every ship hypothesis lands at exactly 0.5.
def test_detect_subthreshold_parent_becomes_candidate():
    net = build_rocket_network()
    route = net.semantic["ship"].routes[0]
    parts = ship_parts(np.array([0.5, 0.5, 0.0, 0.5, 0.5, 1.0]))
    inputs = [
        (0.9, AttributeVector(SCHEMA, parts[k]))
        for k in ("square", "triangle", "circle")
    ]
    syms = [net.symmetry_of(k) for k in ("square", "triangle", "circle")]
    route.observe_admitted(inputs, route.forward(inputs, syms).attrs)

    tables = make_tables(net, {k: [tuple(v)] for k, v in parts.items()}, p=0.675)
    full, sub = _passes(net, tables)
    q = detect_incomplete(net, full, sub)[0]
    assert q.candidate == "ship"
    assert q.candidate_p == pytest.approx(0.5, abs=1e-9)
    assert q.features.shared_missing_parent
    assert not q.features.no_missing_parent


# ----------------------------------------------------------------------
# decision matrix

# Vote counts of a matrix after many oracle sessions; row order matches
# FeatureVector's fields, columns are A.1, A.2, B.1, B.2.
TRAINED_COUNTS = [
    [4, 3, 14, 12],
    [5, 19, 1, 0],
    [14, 1, 17, 12],
    [1, 0, 12, 2],
    [4, 3, 13, 10],
    [12, 14, 4, 4],
    [1, 2, 5, 12],
    [12, 5, 10, 6],
    [5, 14, 12, 7],
]


def test_matrix_scores_missing_parent_as_new_capsule():
    matrix = DecisionMatrix(TRAINED_COUNTS)
    features = FeatureVector(no_missing_parent=True)
    assert matrix.scores(features) == {"A.1": 5.0, "A.2": 19.0, "B.1": 1.0, "B.2": 0.0}
    assert matrix.predict(features) == "A.2"


def test_matrix_record_increments_exactly_the_true_rows():
    matrix = DecisionMatrix(TRAINED_COUNTS)
    before = matrix.counts.copy()
    features = FeatureVector(no_missing_parent=True, parts_tracked=True)
    matrix.record(features, "A.2")
    delta = matrix.counts - before
    assert delta[1, 1] == 1.0 and delta[2, 1] == 1.0
    assert delta.sum() == 2.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 7))
def test_matrix_prediction_invariant_under_scaling(seed, k):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 30, size=(9, 4)).astype(float)
    flags = rng.random(9) < 0.5
    flags[1] = flags[1] and not flags[0]
    verdicts = np.zeros(3, dtype=bool)
    verdicts[rng.integers(0, 3)] = bool(rng.random() < 0.75)
    flags[6:9] = verdicts
    features = FeatureVector(*flags.tolist())
    assert DecisionMatrix(counts).predict(features) == DecisionMatrix(counts * k).predict(features)


def test_matrix_round_trips_through_csv(tmp_path):
    matrix = DecisionMatrix(TRAINED_COUNTS)
    path = tmp_path / "decisions.csv"
    matrix.save(path)
    again = DecisionMatrix.load(path)
    assert np.array_equal(again.counts, matrix.counts)


def test_matrix_validates_counts():
    with pytest.raises(ValueError):
        DecisionMatrix(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        DecisionMatrix(-np.ones((9, 4)))


def test_feature_vector_rejects_contradictions():
    with pytest.raises(ValueError):
        FeatureVector(shared_missing_parent=True, no_missing_parent=True)
    with pytest.raises(ValueError):
        FeatureVector(underparameterized=True, overparameterized=True)


# ----------------------------------------------------------------------
# decide


def _question(**kwargs):
    defaults = dict(qid=0, parts=("square",), part_uids=(0,))
    defaults.update(kwargs)
    return OracleQuestion(**defaults)


def test_decide_with_empty_matrix_always_asks():
    matrix = DecisionMatrix()
    oracle = ScriptedOracle([OracleAnswer(0, "A.2", "thing")])
    q = _question(features=FeatureVector(no_missing_parent=True))
    answer, source = decide(q, matrix, oracle, autonomy=True)
    assert source == "oracle"
    assert answer.action == "A.2"
    assert matrix.counts[1, 1] == 1.0


def test_decide_acts_alone_once_votes_are_decisive():
    matrix = DecisionMatrix(TRAINED_COUNTS)
    q = _question(features=FeatureVector(no_missing_parent=True))
    answer, source = decide(q, matrix, oracle=None, autonomy=True, auto_name="object-7")
    assert source == "matrix"
    assert answer.action == "A.2" and answer.payload == "object-7"
    # Without autonomy the same matrix still defers to the oracle.
    oracle = ScriptedOracle([OracleAnswer(0, "A.1")])
    answer, source = decide(q, matrix, oracle, autonomy=False)
    assert source == "oracle" and answer.action == "A.1"


def test_decide_deferral_leaves_the_matrix_alone():
    matrix = DecisionMatrix()
    q = _question(features=FeatureVector(no_missing_parent=True))
    answer, source = decide(q, matrix, oracle=lambda _: None)
    assert answer is None and source == "deferred"
    assert matrix.counts.sum() == 0.0


def test_oracle_answer_payload_rules():
    with pytest.raises(ValueError):
        OracleAnswer(0, "A.2")
    with pytest.raises(ValueError):
        OracleAnswer(0, "B.9", "x")
    assert OracleAnswer(0, "A.1").payload is None
    data = OracleAnswer(3, "B.1", "chair:wooden", parts=("square",)).to_json()
    again = OracleAnswer.from_json(data)
    assert again.action == "B.1" and again.payload == "chair:wooden"
    assert again.parts == ("square",)


def test_scripted_oracle_exhaustion():
    oracle = ScriptedOracle([])
    with pytest.raises(RuntimeError):
        oracle.ask(_question())


# ----------------------------------------------------------------------
# memory rescaling


def _route_with_adjective():
    schema = AttributeSchema(list(SCHEMA.slots) + [SlotSpec("heat", "adjective")])
    net, _ = _net_with_blob(("circle",), schema)
    return net.semantic["blob"].routes[0]


# Distances from the zero-reference observation map to stored values; a
# farther-out observation becomes the new unit and shrinks the rest.
def test_memory_rescaling_keeps_bounds_and_order():
    route = _route_with_adjective()
    base = np.array([0.5, 0.5, 0.0, 0.2, 0.2, 0.8])
    heat = route.owner_schema.index("heat")

    def stored():
        return [owner[heat] for _, _, owner in route.memory]

    def owner_for(value):
        out = np.zeros(7)
        out[heat] = value
        return out.tolist()

    route.memory.append(([1.0], base.tolist(), owner_for(0.0)))
    far = base + np.array([0.2, 0, 0, 0, 0, 0])
    route.memory.append(([1.0], far.tolist(), owner_for(1.0)))

    mid = base + np.array([0.1, 0, 0, 0, 0, 0])
    assert append_scaled_observation(route, "heat", mid) == pytest.approx(0.5)
    assert stored() == pytest.approx([0.0, 1.0, 0.5])

    beyond = base + np.array([0.4, 0, 0, 0, 0, 0])
    assert append_scaled_observation(route, "heat", beyond) == pytest.approx(1.0)
    assert stored() == pytest.approx([0.0, 0.5, 0.25, 1.0])
    assert min(stored()) >= 0.0 and max(stored()) <= 1.0
    # Ordering by distance from the zero-reference is preserved.
    distances = [np.linalg.norm(np.asarray(c) - base) for _, c, _ in route.memory]
    assert np.argsort(distances).tolist() == np.argsort(stored()).tolist()


def test_memory_rescaling_with_no_reference_uses_unit():
    route = _route_with_adjective()
    base = np.array([0.5, 0.5, 0.0, 0.2, 0.2, 0.8])
    assert append_scaled_observation(route, "heat", base) == pytest.approx(1.0)
    # All-unused memory gives no reference distance either.
    route = _route_with_adjective()
    route.memory.append(([1.0], base.tolist(), [0.0] * 7))
    assert append_scaled_observation(route, "heat", base + 0.1) == pytest.approx(1.0)


# ----------------------------------------------------------------------
# applying answers


def test_apply_rejects_existing_capsule_names():
    net = primitive_net()
    tables = rocket_tables(net)
    full, sub = _passes(net, tables)
    q = detect_incomplete(net, full, sub)[0]
    with pytest.raises(ValueError):
        apply_answer(net, q, OracleAnswer(0, "A.2", "circle"), full)
    assert not net.semantic


def test_apply_adds_route_to_existing_capsule():
    net, _ = _net_with_blob(("circle",))
    tables = make_tables(net, {"circle": [STRAY_CIRCLE]})
    full = forward_pass(net, tables)
    q = _question(parts=("circle",), part_uids=(0,), candidate="blob")
    touched = apply_answer(
        net, q, OracleAnswer(0, "A.1"), full, cfg=TINY_AUG, train_cfg=TINY_TRAIN
    )
    assert touched == "blob"
    assert [r.id for r in net.semantic["blob"].routes] == [0, 1]


def test_apply_new_attribute_requires_a_candidate():
    net = primitive_net()
    tables = rocket_tables(net)
    full, sub = _passes(net, tables)
    q = detect_incomplete(net, full, sub)[0]
    with pytest.raises(ValueError):
        apply_answer(net, q, OracleAnswer(0, "B.2", "glow"), full)


def test_apply_retrains_attribute_with_rescaled_memory():
    net, route = _net_with_blob(("circle",))
    tables = make_tables(net, {"circle": [STRAY_CIRCLE]})
    full = forward_pass(net, tables)
    seed = np.asarray(STRAY_CIRCLE, dtype=float)
    route.memory.append(([1.0], seed.tolist(), seed.tolist()))
    q = _question(
        parts=("circle",), part_uids=(0,), candidate="blob", candidate_route=0
    )
    touched = apply_answer(
        net,
        q,
        OracleAnswer(0, "B.1", "blob:intensity"),
        full,
        cfg=TINY_AUG,
        train_cfg=TINY_TRAIN,
    )
    assert touched == "blob"
    assert len(route.memory) == 2
    column = [owner[route.owner_schema.index("intensity")] for _, _, owner in route.memory]
    assert min(column) >= 0.0 and max(column) <= 1.0


def test_add_attribute_grows_capsule_and_ancestors():
    net = build_rocket_network()
    belt_schema = net.schema_of("ship").merge(net.schema_of("asteroid"))
    belt = SemanticCapsule("belt", belt_schema)
    net.add_semantic(belt)
    net.add_route("belt", make_route(net, 0, ["ship", "asteroid"], belt_schema, 3))

    grown = add_attribute(net, "asteroid", SlotSpec("glow", "adjective"))
    assert grown == ["asteroid", "belt"]
    assert "glow" in net.schema_of("asteroid").names
    assert "glow" in net.schema_of("belt").names
    assert "glow" not in net.schema_of("ship").names
    # The scene route sees the grown asteroid slot at its new width.
    route = net.semantic["belt"].routes[0]
    assert len(route.slots[1].schema) == 7
    assert route.owner_schema is net.schema_of("belt")


def test_add_attribute_appends_binary_scene_row():
    net, route = _net_with_blob(("circle",))
    base = np.array([0.5, 0.5, 0.0, 0.2, 0.2, 0.8])
    route.memory.append(([1.0], base.tolist(), base.tolist()))
    scene = base + np.array([0.1, 0.0, 0.0, 0.0, 0.0, 0.0])
    add_attribute(
        net, "blob", SlotSpec("glow", "adjective"), scene,
        cfg=TINY_AUG, train_cfg=TINY_TRAIN,
    )
    rebuilt = net.semantic["blob"].routes[0]
    glow = rebuilt.owner_schema.index("glow")
    assert [owner[glow] for _, _, owner in rebuilt.memory] == [0.0, 1.0]
    assert rebuilt.memory[0][1] == base.tolist()


def test_add_attribute_rejects_duplicate_slots():
    net, _ = _net_with_blob(("circle",))
    with pytest.raises(ValueError):
        add_attribute(net, "blob", SlotSpec("x", "position"))


# ----------------------------------------------------------------------
# the full loop


def test_learn_scene_reaches_one_axiom(flat_scene):
    net, tables, steps, _ = flat_scene
    assert [(s.answer.action, s.capsule) for s in steps] == [
        ("A.2", "ship"),
        ("A.2", "asteroid"),
        ("A.2", "belt-scene"),
    ]
    assert wiring(net) == {
        "ship": [["square", "triangle", "circle"]],
        "asteroid": [["circle"]],
        "belt-scene": [["ship", "asteroid"]],
    }
    roots = forest_entries(forward_pass(net, tables))
    assert len(roots) == 1
    assert roots[0].capsule == "belt-scene"
    assert roots[0].p > 0.7
    assert sorted(roots[0].primitive_leaves()) == [0, 1, 2, 3]


def test_learn_scene_needs_at_most_one_step_per_root(flat_scene):
    _, _, steps, _ = flat_scene
    assert len(steps) == 3 <= 4  # four roots on the virgin pass


def test_learn_scene_records_votes_for_oracle_answers(flat_scene):
    _, _, steps, matrix = flat_scene
    assert all(s.source == "oracle" for s in steps)
    assert matrix.counts[1, 1] == 3.0  # missing parent -> new capsule
    assert matrix.counts.sum() == 3.0


def test_learn_scene_reaches_a_fixed_point(flat_scene):
    net, tables, _, _ = flat_scene
    full, sub = _passes(net, tables)
    assert detect_incomplete(net, full, sub) == []


# Growing the network must not undo what it already explains: the parts
# admitted before later mutations stay admitted afterwards.
def test_learn_scene_preserves_earlier_admissions(flat_scene):
    net, tables, _, _ = flat_scene
    result = forward_pass(net, tables)
    ship = max(
        (e for e in result.tables["ship"] if e.primitive_leaves() == {0, 1, 2}),
        key=lambda e: e.p,
    )
    asteroid = max(
        (e for e in result.tables["asteroid"] if e.primitive_leaves() == {3}),
        key=lambda e: e.p,
    )
    assert ship.p > 0.7 - 0.05
    assert asteroid.p > 0.7 - 0.05


def test_learn_scene_supports_shared_parts(shared_part_scene):
    net, tables, steps = shared_part_scene
    assert [s.capsule for s in steps] == [
        "booster", "shuttle", "ship", "asteroid", "belt-scene",
    ]
    assert wiring(net) == {
        "booster": [["square", "triangle"]],
        "shuttle": [["triangle", "circle"]],
        "ship": [["booster", "shuttle"]],
        "asteroid": [["circle"]],
        "belt-scene": [["ship", "asteroid"]],
    }
    roots = forest_entries(forward_pass(net, tables))
    assert [r.capsule for r in roots] == ["belt-scene"]
    assert roots[0].p > 0.7
    # The triangle leaf is shared by booster and shuttle.
    assert sorted(roots[0].primitive_leaves()) == [0, 1, 2, 3]


def test_learn_scene_stops_quietly_on_deferral():
    net = primitive_net()
    steps = learn_scene(net, rocket_tables(net), oracle=lambda _: None)
    assert steps == []
    assert not net.semantic


def test_learn_scene_round_limit():
    net = primitive_net()
    oracle = ScriptedOracle([OracleAnswer(0, "A.2", "ship")])
    with pytest.raises(RuntimeError):
        learn_scene(net, rocket_tables(net), oracle, max_rounds=0)


# ----------------------------------------------------------------------
# parameterization audit

PLANE = np.array([
    [1.0, 0.2, 0.5, 0.0, -0.3, 0.1],
    [0.1, 0.9, -0.4, 0.0, 0.6, 0.2],
])


def _planar_cloud(n=20000, seed=7):
    rng = np.random.default_rng(seed)
    return rng.random((n, 2)) @ PLANE + 0.1


def test_parameterization_balanced_for_matching_dimensions():
    report = parameterization_report(2, data=_planar_cloud())
    assert report["verdict"] == "balance"
    assert report["dim_cbc"] == pytest.approx(2.0, abs=0.3)


def test_parameterization_flags_missing_slots():
    report = parameterization_report(1, data=_planar_cloud())
    assert report["verdict"] == "under"


def test_parameterization_flags_redundant_slots():
    report = parameterization_report(3, data=_planar_cloud())
    assert report["verdict"] == "over"


def test_parameterization_samples_the_decoder_image():
    decoder = affine_model(2, 6, PLANE, np.full(6, 0.1))
    report = parameterization_report(
        2, decoder=decoder, rng=np.random.default_rng(3), points_per_run=4000
    )
    assert report["verdict"] == "balance"


def test_parameterization_requires_a_source():
    with pytest.raises(ValueError):
        parameterization_report(2)
