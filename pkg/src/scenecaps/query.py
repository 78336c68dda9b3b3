"""Replay / Predict / Fabricate: the query language over episodic memory.

Replay extracts remembered (or imagined) structure without writing
anything; Predict rolls the learned physics forward on a fork; Fabricate
writes edited or freshly invented scenes.  Scripts chain the three with
variables and bounded loops, which is enough to express the classic
mental-simulation errands (sorting, region maps, collision checks,
fit checks, style transfer, torque search, a small game loop).

Grammar, one statement per logical line (indented lines continue the
previous one, ``#`` starts a comment):

    query       = ("REPLAY" | "PREDICT" | "FABRICATE") clause*
    clause      = "ORIGIN" origin | "FILTER" disjunction | "OMIT" names
                | "MAP" mapping (";" mapping)* | "GROUP" "BY" grouping
                | "DURATION" INT | "FORCE" forces | "CHANGE" changes
    origin      = "all" | "none" | "perceived" | "newest" | INT | VAR | NAME
    disjunction = conjunction ("OR" conjunction)*
    conjunction = predicate ("AND" predicate)*
    predicate   = "newest" | "symbol" "=" NAME | NAME
                | [NAME "."] NAME CMP value
    mapping     = "none" | "when" [NAME "."] NAME CMP value "->" "tag" NAME
                | "d" "(" NAME "," NAME ")" | "rename" NAME "->" NAME
                | "camera" "<-" (VAR | "(" num "," num "," num ")")
                | "camera-nearest" [VAR] | NAME "." NAME
    grouping    = "none" | "tag" | "symbol" | "camera-grid" "(" INT "," INT ")"
    forces      = "none" | force ("AND" force)*
    force       = "apply" (VAR | "torque" num | vec2or3 ) ["to" NAME]
    changes     = "none" | change ("," change)*
    change      = "add" NAME ["(" NAME "=" num ("," NAME "=" num)* ")"]
                | "remove" NAME | "set" NAME "." NAME "=" num
                | "copy" "attribute" "values" (VAR | NAME) | "apply" VAR

Keywords are case-insensitive; symbol, attribute and variable names are
not.  A value is a number or a (variable) name resolved at evaluation
time.  Durations count frames.  Mappings apply in the order written.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .capsnet import CapsuleNetwork, ParseTree, generate, render_tree
from .memory import EpisodicMemory, Observation
from .physics import min_distance, predict_step, redetect, sequence_from_trees
from .tracking import CameraPose

RESOLUTION = 112
OMITTABLE = ("connections", "attributes", "meta")
META_ATTRS = ("time", "kind", "timeline")


class QueryError(ValueError):
    """Parse or evaluation failure, with a source position when known."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line, self.col = line, col
        if line is not None:
            message = f"{message} (line {line}, column {col})"
        super().__init__(message)


class ScriptError(RuntimeError):
    """First failing statement of a script, by statement index."""

    def __init__(self, message: str, index: int, transcript: list[dict]):
        super().__init__(message)
        self.index = index
        self.transcript = transcript


# ----------------------------------------------------------------------
# abstract syntax


@dataclass(frozen=True)
class Origin:
    kind: str  # all | none | perceived | newest | id | var | capsule
    ref: str | int | None = None


@dataclass(frozen=True)
class SymbolIs:
    name: str


@dataclass(frozen=True)
class Newest:
    pass


@dataclass(frozen=True)
class Compare:
    qualifier: str | None
    attr: str
    op: str  # < <= > >= = !=
    value: float | str  # names resolve through the environment


Predicate = SymbolIs | Newest | Compare
Conjunction = tuple[Predicate, ...]


@dataclass(frozen=True)
class ThresholdTag:
    test: Compare
    tag: str


@dataclass(frozen=True)
class Distance:
    a: str
    b: str


@dataclass(frozen=True)
class Projection:
    symbol: str
    attr: str


@dataclass(frozen=True)
class Rename:
    old: str
    new: str


@dataclass(frozen=True)
class CameraOverride:
    source: str | tuple[float, float, float]  # var name | (angle, dx, dy)


@dataclass(frozen=True)
class CameraNearest:
    source: str | None = None  # defaults to the override camera


Mapping = ThresholdTag | Distance | Projection | Rename | CameraOverride | CameraNearest


@dataclass(frozen=True)
class Grouping:
    kind: str = "none"  # none | tag | symbol | camera-grid
    nx: int = 0
    ny: int = 0


@dataclass(frozen=True)
class ForceSpec:
    symbol: str
    fx: float
    fy: float
    torque: float


@dataclass(frozen=True)
class ForceVar:
    name: str


@dataclass(frozen=True)
class AddObject:
    capsule: str
    attrs: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class RemoveObject:
    symbol: str


@dataclass(frozen=True)
class SetAttr:
    symbol: str
    attr: str
    value: float


@dataclass(frozen=True)
class CopyAttrs:
    source: str  # "$var" or a symbol name


@dataclass(frozen=True)
class ApplyVar:
    name: str


Change = AddObject | RemoveObject | SetAttr | CopyAttrs | ApplyVar


@dataclass(frozen=True)
class ReplayQuery:
    origin: Origin = Origin("all")
    filters: tuple[Conjunction, ...] = ()
    omits: tuple[str, ...] = ()
    mappings: tuple[Mapping, ...] = ()
    grouping: Grouping = Grouping()


@dataclass(frozen=True)
class PredictQuery:
    origin: Origin = Origin("newest")
    duration: int = 1
    forces: tuple[ForceSpec | ForceVar, ...] = ()


@dataclass(frozen=True)
class FabricateQuery:
    origin: Origin = Origin("none")
    changes: tuple[Change, ...] = ()


QueryAst = ReplayQuery | PredictQuery | FabricateQuery


# ----------------------------------------------------------------------
# tokenizer / parser


@dataclass(frozen=True)
class _Token:
    kind: str  # number | name | var | op
    text: str
    line: int
    col: int


_TOKEN_RE = re.compile(
    r"""(?P<ws>\s+)
      | (?P<number>\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)
      | (?P<name>[A-Za-z_][A-Za-z0-9_]*(?:-[A-Za-z0-9_]+)*)
      | (?P<var>\$[A-Za-z_][A-Za-z0-9_-]*)
      | (?P<op>->|<-|<=|>=|!=|[=<>(),;.\-])
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, start = 1, 0
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise QueryError(
                f"unexpected character {text[pos]!r}", line, pos - start + 1
            )
        kind = m.lastgroup
        raw = m.group()
        if kind != "ws":
            tokens.append(_Token(kind, raw, line, pos - start + 1))
        line += raw.count("\n")
        if "\n" in raw:
            start = pos + raw.rindex("\n") + 1
        pos = m.end()
    return tokens


_CLAUSES = {"ORIGIN", "FILTER", "OMIT", "MAP", "GROUP", "DURATION", "FORCE", "CHANGE"}
_CMP_OPS = ("<=", ">=", "!=", "=", "<", ">")


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self, ahead: int = 0) -> _Token | None:
        i = self.pos + ahead
        return self.tokens[i] if i < len(self.tokens) else None

    def done(self) -> bool:
        return self.pos >= len(self.tokens)

    def take(self) -> _Token:
        tok = self.peek()
        if tok is None:
            last = self.tokens[-1] if self.tokens else _Token("op", "", 1, 1)
            raise QueryError("unexpected end of query", last.line, last.col)
        self.pos += 1
        return tok

    def fail(self, message: str) -> QueryError:
        tok = self.peek()
        if tok is None:
            last = self.tokens[-1] if self.tokens else _Token("op", "", 1, 1)
            return QueryError(message, last.line, last.col + len(last.text))
        return QueryError(f"{message}, got {tok.text!r}", tok.line, tok.col)

    def is_kw(self, word: str, ahead: int = 0) -> bool:
        tok = self.peek(ahead)
        return tok is not None and tok.kind == "name" and tok.text.upper() == word

    def at_clause(self) -> bool:
        tok = self.peek()
        return (
            tok is not None
            and tok.kind == "name"
            and tok.text.upper() in _CLAUSES
        )

    def expect_kw(self, word: str) -> None:
        if not self.is_kw(word):
            raise self.fail(f"expected {word}")
        self.take()

    def expect_op(self, op: str) -> None:
        tok = self.peek()
        if tok is None or tok.kind != "op" or tok.text != op:
            raise self.fail(f"expected {op!r}")
        self.take()

    def name(self, what: str = "name") -> str:
        tok = self.peek()
        if tok is None or tok.kind != "name":
            raise self.fail(f"expected {what}")
        return self.take().text

    def number(self) -> float:
        sign = 1.0
        tok = self.peek()
        if tok is not None and tok.kind == "op" and tok.text == "-":
            self.take()
            sign = -1.0
        tok = self.peek()
        if tok is None or tok.kind != "number":
            raise self.fail("expected a number")
        return sign * float(self.take().text)

    def integer(self, what: str) -> int:
        value = self.number()
        if value != int(value) or value < 0:
            raise self.fail(f"expected a non-negative integer {what}")
        return int(value)

    def value(self) -> float | str:
        """Number, or a name/$var resolved at evaluation time."""
        tok = self.peek()
        if tok is not None and tok.kind in ("name", "var"):
            return self.take().text
        return self.number()

    def cmp_op(self) -> str:
        tok = self.peek()
        if tok is None or tok.kind != "op" or tok.text not in _CMP_OPS:
            raise self.fail("expected a comparison operator")
        return self.take().text


def parse_query(text: str) -> QueryAst:
    """Parse one query; raises QueryError with line/column on bad input."""
    tokens = _tokenize(text)
    if not tokens:
        raise QueryError("empty query", 1, 1)
    p = _Parser(tokens)
    head = p.take()
    verb = head.text.upper() if head.kind == "name" else ""
    if verb not in ("REPLAY", "PREDICT", "FABRICATE"):
        raise QueryError(
            f"expected REPLAY, PREDICT or FABRICATE, got {head.text!r}",
            head.line,
            head.col,
        )
    ast = _parse_clauses(p, verb)
    if not p.done():
        raise p.fail("expected a clause keyword")
    return ast


def _parse_clauses(p: _Parser, verb: str) -> QueryAst:
    parts: dict = {}

    def once(key: str, value) -> None:
        if key in parts:
            raise p.fail(f"duplicate {key.upper()} clause")
        parts[key] = value

    while not p.done():
        if not p.at_clause():
            raise p.fail("expected a clause keyword")
        word = p.take().text.upper()
        if word == "ORIGIN":
            once("origin", _parse_origin(p, verb))
        elif word == "FILTER":
            once("filters", _parse_filters(p))
        elif word == "OMIT":
            once("omits", _parse_omits(p))
        elif word == "MAP":
            once("mappings", _parse_mappings(p))
        elif word == "GROUP":
            p.expect_kw("BY")
            once("grouping", _parse_grouping(p))
        elif word == "DURATION":
            once("duration", p.integer("duration"))
        elif word == "FORCE":
            once("forces", _parse_forces(p))
        elif word == "CHANGE":
            once("changes", _parse_changes(p))

    allowed = {
        "REPLAY": {"origin", "filters", "omits", "mappings", "grouping"},
        "PREDICT": {"origin", "duration", "forces"},
        "FABRICATE": {"origin", "changes"},
    }[verb]
    for key in parts:
        if key not in allowed:
            raise QueryError(f"{verb} does not take a {key.upper()} clause")
    if verb == "REPLAY":
        return ReplayQuery(**parts)
    if verb == "PREDICT":
        return PredictQuery(**parts)
    return FabricateQuery(**parts)


def _parse_origin(p: _Parser, verb: str) -> Origin:
    tok = p.peek()
    if tok is None:
        raise p.fail("expected an origin")
    if tok.kind == "number":
        return Origin("id", int(p.number()))
    if tok.kind == "var":
        return Origin("var", p.take().text[1:])
    word = p.name("an origin")
    lowered = word.lower()
    if lowered in ("all", "none", "perceived", "newest"):
        if verb == "PREDICT" and lowered in ("all", "perceived"):
            raise p.fail("PREDICT origin must name one observation")
        return Origin(lowered)
    if verb != "FABRICATE":
        raise p.fail(f"{verb} origin cannot be a symbol name")
    return Origin("capsule", word)


def _parse_filters(p: _Parser) -> tuple[Conjunction, ...]:
    branches = [_parse_conjunction(p)]
    while p.is_kw("OR"):
        p.take()
        branches.append(_parse_conjunction(p))
    return tuple(branches)


def _parse_conjunction(p: _Parser) -> Conjunction:
    preds = [_parse_predicate(p)]
    while p.is_kw("AND"):
        p.take()
        preds.append(_parse_predicate(p))
    return tuple(preds)


def _parse_predicate(p: _Parser) -> Predicate:
    name = p.name("a symbol or attribute name")
    if name.lower() == "newest":
        return Newest()
    if name.lower() == "symbol":
        p.expect_op("=")
        return SymbolIs(p.name("a symbol name"))
    nxt = p.peek()
    if nxt is not None and nxt.kind == "op" and nxt.text == ".":
        p.take()
        attr = p.name("an attribute name")
        return Compare(name, attr, p.cmp_op(), p.value())
    if nxt is not None and nxt.kind == "op" and nxt.text in _CMP_OPS:
        return Compare(None, name, p.cmp_op(), p.value())
    return SymbolIs(name)


def _parse_omits(p: _Parser) -> tuple[str, ...]:
    names = [p.name("connections, attributes or meta")]
    while p.peek() is not None and p.peek().kind == "op" and p.peek().text == ",":
        p.take()
        names.append(p.name("connections, attributes or meta"))
    for name in names:
        if name not in OMITTABLE:
            raise p.fail(f"cannot omit {name!r}; choose from {OMITTABLE}")
    return tuple(names)


def _parse_mappings(p: _Parser) -> tuple[Mapping, ...]:
    if p.is_kw("NONE"):
        p.take()
        return ()
    maps = [_parse_mapping(p)]
    while p.peek() is not None and p.peek().kind == "op" and p.peek().text == ";":
        p.take()
        maps.append(_parse_mapping(p))
    return tuple(maps)


def _parse_mapping(p: _Parser) -> Mapping:
    if p.is_kw("WHEN"):
        p.take()
        name = p.name("an attribute name")
        if p.peek() is not None and p.peek().kind == "op" and p.peek().text == ".":
            p.take()
            test = Compare(name, p.name("an attribute name"), p.cmp_op(), p.value())
        else:
            test = Compare(None, name, p.cmp_op(), p.value())
        p.expect_op("->")
        p.expect_kw("TAG")
        return ThresholdTag(test, p.name("a tag name"))
    if p.is_kw("RENAME"):
        p.take()
        old = p.name("a symbol name")
        p.expect_op("->")
        return Rename(old, p.name("a symbol name"))
    if p.is_kw("CAMERA-NEAREST"):
        p.take()
        tok = p.peek()
        if tok is not None and tok.kind == "var":
            return CameraNearest(p.take().text[1:])
        return CameraNearest()
    if p.is_kw("CAMERA"):
        p.take()
        p.expect_op("<-")
        tok = p.peek()
        if tok is not None and tok.kind == "var":
            return CameraOverride(p.take().text[1:])
        p.expect_op("(")
        angle = p.number()
        p.expect_op(",")
        dx = p.number()
        p.expect_op(",")
        dy = p.number()
        p.expect_op(")")
        return CameraOverride((angle, dx, dy))
    name = p.name("a mapping")
    if name == "d" and p.peek() is not None and p.peek().text == "(":
        p.take()
        a = p.name("a symbol name")
        p.expect_op(",")
        b = p.name("a symbol name")
        p.expect_op(")")
        return Distance(a, b)
    p.expect_op(".")
    return Projection(name, p.name("an attribute name"))


def _parse_grouping(p: _Parser) -> Grouping:
    name = p.name("a grouping")
    lowered = name.lower()
    if lowered in ("none", "tag", "symbol"):
        return Grouping(lowered)
    if lowered == "camera-grid":
        p.expect_op("(")
        nx = p.integer("grid width")
        p.expect_op(",")
        ny = p.integer("grid height")
        p.expect_op(")")
        if nx < 1 or ny < 1:
            raise p.fail("camera-grid needs at least one cell per axis")
        return Grouping("camera-grid", nx, ny)
    raise p.fail("expected none, tag, symbol or camera-grid(nx, ny)")


def _parse_forces(p: _Parser) -> tuple[ForceSpec | ForceVar, ...]:
    if p.is_kw("NONE"):
        p.take()
        return ()
    forces = [_parse_force(p)]
    while p.is_kw("AND"):
        p.take()
        forces.append(_parse_force(p))
    return tuple(forces)


def _parse_force(p: _Parser) -> ForceSpec | ForceVar:
    p.expect_kw("APPLY")
    tok = p.peek()
    if tok is not None and tok.kind == "var":
        return ForceVar(p.take().text[1:])
    if p.is_kw("TORQUE"):
        p.take()
        torque = p.number()
        p.expect_kw("TO")
        return ForceSpec(p.name("a symbol name"), 0.0, 0.0, torque)
    p.expect_op("(")
    fx = p.number()
    p.expect_op(",")
    fy = p.number()
    torque = 0.0
    if p.peek() is not None and p.peek().text == ",":
        p.take()
        torque = p.number()
    p.expect_op(")")
    p.expect_kw("TO")
    return ForceSpec(p.name("a symbol name"), fx, fy, torque)


def _parse_changes(p: _Parser) -> tuple[Change, ...]:
    if p.is_kw("NONE"):
        p.take()
        return ()
    changes = [_parse_change(p, None)]
    while p.peek() is not None and p.peek().kind == "op" and p.peek().text == ",":
        p.take()
        changes.append(_parse_change(p, changes[-1]))
    return tuple(changes)


def _parse_change(p: _Parser, previous: Change | None) -> Change:
    if p.is_kw("ADD"):
        p.take()
        return _parse_add(p)
    if p.is_kw("REMOVE"):
        p.take()
        return RemoveObject(p.name("a symbol name"))
    if p.is_kw("SET"):
        p.take()
        symbol = p.name("a symbol name")
        p.expect_op(".")
        attr = p.name("an attribute name")
        p.expect_op("=")
        return SetAttr(symbol, attr, p.number())
    if p.is_kw("COPY"):
        p.take()
        p.expect_kw("ATTRIBUTE")
        p.expect_kw("VALUES")
        tok = p.peek()
        if tok is not None and tok.kind == "var":
            return CopyAttrs(p.take().text)
        return CopyAttrs(p.name("a source symbol or variable"))
    if p.is_kw("APPLY"):
        p.take()
        tok = p.peek()
        if tok is None or tok.kind != "var":
            raise p.fail("CHANGE apply expects a $variable")
        return ApplyVar(p.take().text[1:])
    # a bare name continues the previous verb: "add object, container"
    if isinstance(previous, AddObject):
        return _parse_add(p)
    if isinstance(previous, RemoveObject):
        return RemoveObject(p.name("a symbol name"))
    raise p.fail("expected add, remove, set, copy or apply")


def _parse_add(p: _Parser) -> AddObject:
    capsule = p.name("a capsule name")
    attrs: list[tuple[str, float]] = []
    if p.peek() is not None and p.peek().text == "(":
        p.take()
        while True:
            slot = p.name("an attribute name")
            p.expect_op("=")
            attrs.append((slot, p.number()))
            if p.peek() is not None and p.peek().text == ",":
                p.take()
                continue
            break
        p.expect_op(")")
    return AddObject(capsule, tuple(attrs))


# ----------------------------------------------------------------------
# pretty-printer; parse(print_query(ast)) == ast


def _num(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def _cmp_text(c: Compare) -> str:
    prefix = f"{c.qualifier}." if c.qualifier else ""
    value = c.value if isinstance(c.value, str) else _num(c.value)
    gap = " " if not isinstance(c.value, str) and c.value < 0 else ""
    return f"{prefix}{c.attr}{c.op}{gap}{value}"


def _pred_text(pred: Predicate) -> str:
    if isinstance(pred, SymbolIs):
        return pred.name
    if isinstance(pred, Newest):
        return "newest"
    return _cmp_text(pred)


def _mapping_text(m: Mapping) -> str:
    if isinstance(m, ThresholdTag):
        return f"when {_cmp_text(m.test)} -> tag {m.tag}"
    if isinstance(m, Distance):
        return f"d({m.a}, {m.b})"
    if isinstance(m, Projection):
        return f"{m.symbol}.{m.attr}"
    if isinstance(m, Rename):
        return f"rename {m.old} -> {m.new}"
    if isinstance(m, CameraNearest):
        return "camera-nearest" + (f" ${m.source}" if m.source else "")
    if isinstance(m.source, str):
        return f"camera <- ${m.source}"
    angle, dx, dy = m.source
    return f"camera <- ({_num(angle)}, {_num(dx)}, {_num(dy)})"


def _force_text(f: ForceSpec | ForceVar) -> str:
    if isinstance(f, ForceVar):
        return f"apply ${f.name}"
    if f.fx == 0.0 and f.fy == 0.0 and f.torque != 0.0:
        return f"apply torque {_num(f.torque)} to {f.symbol}"
    if f.torque == 0.0:
        return f"apply ({_num(f.fx)}, {_num(f.fy)}) to {f.symbol}"
    return f"apply ({_num(f.fx)}, {_num(f.fy)}, {_num(f.torque)}) to {f.symbol}"


def _change_text(c: Change) -> str:
    if isinstance(c, AddObject):
        if not c.attrs:
            return f"add {c.capsule}"
        inner = ", ".join(f"{k}={_num(v)}" for k, v in c.attrs)
        return f"add {c.capsule}({inner})"
    if isinstance(c, RemoveObject):
        return f"remove {c.symbol}"
    if isinstance(c, SetAttr):
        return f"set {c.symbol}.{c.attr}={_num(c.value)}"
    if isinstance(c, CopyAttrs):
        return f"copy attribute values {c.source}"
    return f"apply ${c.name}"


def _origin_text(origin: Origin) -> str:
    if origin.kind == "id":
        return str(origin.ref)
    if origin.kind == "var":
        return f"${origin.ref}"
    if origin.kind == "capsule":
        return str(origin.ref)
    return origin.kind


def print_query(ast: QueryAst) -> str:
    """Canonical single-line form; inverse of parse_query on ASTs."""
    if isinstance(ast, ReplayQuery):
        parts = ["REPLAY", f"ORIGIN {_origin_text(ast.origin)}"]
        if ast.filters:
            branches = [" AND ".join(_pred_text(q) for q in b) for b in ast.filters]
            parts.append("FILTER " + " OR ".join(branches))
        if ast.omits:
            parts.append("OMIT " + ", ".join(ast.omits))
        if ast.mappings:
            parts.append("MAP " + "; ".join(_mapping_text(m) for m in ast.mappings))
        if ast.grouping.kind == "camera-grid":
            parts.append(f"GROUP BY camera-grid({ast.grouping.nx}, {ast.grouping.ny})")
        elif ast.grouping.kind != "none":
            parts.append(f"GROUP BY {ast.grouping.kind}")
        return " ".join(parts)
    if isinstance(ast, PredictQuery):
        parts = [
            "PREDICT",
            f"ORIGIN {_origin_text(ast.origin)}",
            f"DURATION {ast.duration}",
        ]
        if ast.forces:
            parts.append("FORCE " + " AND ".join(_force_text(f) for f in ast.forces))
        return " ".join(parts)
    parts = ["FABRICATE", f"ORIGIN {_origin_text(ast.origin)}"]
    if ast.changes:
        parts.append("CHANGE " + ", ".join(_change_text(c) for c in ast.changes))
    return " ".join(parts)


# ----------------------------------------------------------------------
# results


@dataclass
class ResultItem:
    uid: int
    obs_id: int
    timeline: int
    t: float
    symbol: str
    tree: ParseTree | None
    value: float | None = None
    tag: str | None = None


@dataclass
class Cluster:
    key: str
    items: list[ResultItem] = field(default_factory=list)


@dataclass
class ResultGraph:
    """Graph-of-graphs replay output: item clusters plus extracted values.

    Edges connect items (by uid) that continue the same tracked symbol
    across consecutive selected observations of one time-line; they may
    cross cluster boundaries, which is what turns a camera-grid grouping
    into a navigation graph.
    """

    clusters: list[Cluster] = field(default_factory=list)
    edges: list[tuple[int, int]] = field(default_factory=list)
    values: list[tuple[int, float, float, str]] = field(default_factory=list)
    omits: tuple[str, ...] = ()
    grouped: bool = False
    render_pose: CameraPose | None = None

    @property
    def shape(self) -> str:
        if self.grouped:
            return "graph-of-graphs"
        if "connections" in self.omits:
            return "collection"
        return "tree"

    def items(self) -> list[ResultItem]:
        return [item for cluster in self.clusters for item in cluster.items]

    def scalar(self) -> float:
        """The newest extracted value; what loop conditions consume."""
        if not self.values:
            raise QueryError("result carries no values to compare")
        return self.values[-1][2]

    def cluster_adjacency(self) -> set[tuple[str, str]]:
        """Unordered cluster-key pairs bridged by at least one edge."""
        key_of = {
            item.uid: cluster.key
            for cluster in self.clusters
            for item in cluster.items
        }
        pairs = set()
        for a, b in self.edges:
            ka, kb = key_of[a], key_of[b]
            if ka != kb:
                pairs.add((min(ka, kb), max(ka, kb)))
        return pairs

    def summary(self) -> dict:
        out: dict = {
            "shape": self.shape,
            "edges": len(self.edges),
            "clusters": [
                {"key": c.key, "items": len(c.items)} for c in self.clusters
            ],
        }
        if self.values:
            out["values"] = [
                {"observation": o, "value": round(v, 6), "label": label}
                for o, _, v, label in self.values[-8:]
            ]
            out["scalar"] = round(self.scalar(), 6)
        return out


def _walk(tree: ParseTree):
    yield tree
    for child in tree.children:
        yield from _walk(child)


def _copy_tree(tree: ParseTree) -> ParseTree:
    return ParseTree.from_json(tree.to_json())


def _known_symbols(network: CapsuleNetwork, snapshot: list[Observation]) -> set[str]:
    names = set(network.capsule_names())
    for obs in snapshot:
        for tree in obs.trees:
            for node in _walk(tree):
                names.add(node.capsule)
    return names


def _known_attrs(
    network: CapsuleNetwork, snapshot: list[Observation], symbol: str | None
) -> set[str]:
    if symbol is not None and symbol in network:
        return set(network.schema_of(symbol).names)
    names: set[str] = set()
    for caps in list(network.primitives) + list(network.semantic):
        names.update(network.schema_of(caps).names)
    for obs in snapshot:
        for tree in obs.trees:
            for node in _walk(tree):
                if symbol is None or node.capsule == symbol:
                    names.update(node.attrs.schema.names)
    return names


def _check_symbol(name: str, known: set[str]) -> None:
    if name not in known:
        raise QueryError(
            f"unknown symbol {name!r}; valid symbols: {sorted(known)}"
        )


def _check_attr(
    network: CapsuleNetwork,
    snapshot: list[Observation],
    qualifier: str | None,
    attr: str,
) -> None:
    if attr in META_ATTRS:
        return
    valid = _known_attrs(network, snapshot, qualifier)
    if attr not in valid:
        where = f" of {qualifier!r}" if qualifier else ""
        raise QueryError(
            f"unknown attribute {attr!r}{where}; "
            f"valid attributes: {sorted(valid | set(META_ATTRS))}"
        )


def _resolve_value(value: float | str, env: dict) -> float | str:
    if not isinstance(value, str):
        return float(value)
    name = value[1:] if value.startswith("$") else value
    if name not in env:
        raise QueryError(f"undefined variable {name!r}")
    return _scalar_of(env[name])


def _scalar_of(value) -> float | str:
    if isinstance(value, ResultGraph):
        return value.scalar()
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise QueryError(f"value {value!r} is not a number")
    return value if isinstance(value, str) else float(value)


def _compare(lhs: float | str, op: str, rhs: float | str) -> bool:
    if isinstance(lhs, str) or isinstance(rhs, str):
        if op == "=":
            return str(lhs) == str(rhs)
        if op == "!=":
            return str(lhs) != str(rhs)
        raise QueryError(f"cannot order strings with {op!r}")
    return {
        "<": lhs < rhs,
        "<=": lhs <= rhs,
        ">": lhs > rhs,
        ">=": lhs >= rhs,
        "=": lhs == rhs,
        "!=": lhs != rhs,
    }[op]


# ----------------------------------------------------------------------
# replay


def eval_replay(
    ast: ReplayQuery,
    snapshot: list[Observation] | EpisodicMemory,
    network: CapsuleNetwork,
    env: dict | None = None,
) -> tuple[ResultGraph, list[np.ndarray]]:
    """Evaluate a replay over an observation snapshot; never writes.

    Returns the clustered result graph and the rendered frames: one per
    renderable item, a single blank frame when the result holds only
    values or unrenderable symbols, none when nothing matched.
    """
    env = env or {}
    if isinstance(snapshot, EpisodicMemory):
        snapshot = snapshot.snapshot()
    _validate_replay(ast, snapshot, network, env)

    selected = _origin_observations(ast.origin, snapshot, env)
    items = _select_items(ast, selected, env)

    graph = ResultGraph(omits=ast.omits, grouped=ast.grouping.kind != "none")
    by_id = {obs.id: obs for obs in selected}
    for mapping in ast.mappings:
        items = _apply_mapping(mapping, items, by_id, network, graph, env)

    if "attributes" in ast.omits:
        for item in items:
            item.tree = None

    if "connections" not in ast.omits:
        graph.edges = _connect(items)
    _cluster(ast.grouping, items, by_id, graph)
    frames = _render_results(graph, network)
    return graph, frames


def _validate_replay(
    ast: ReplayQuery,
    snapshot: list[Observation],
    network: CapsuleNetwork,
    env: dict,
) -> None:
    symbols = _known_symbols(network, snapshot)
    for branch in ast.filters:
        for pred in branch:
            if isinstance(pred, SymbolIs):
                _check_symbol(pred.name, symbols)
            elif isinstance(pred, Compare):
                if pred.qualifier is not None:
                    _check_symbol(pred.qualifier, symbols)
                _check_attr(network, snapshot, pred.qualifier, pred.attr)
    for mapping in ast.mappings:
        if isinstance(mapping, Distance):
            _check_symbol(mapping.a, symbols)
            _check_symbol(mapping.b, symbols)
        elif isinstance(mapping, Projection):
            _check_symbol(mapping.symbol, symbols)
            _check_attr(network, snapshot, mapping.symbol, mapping.attr)
        elif isinstance(mapping, ThresholdTag):
            if mapping.test.qualifier is not None:
                _check_symbol(mapping.test.qualifier, symbols)
            _check_attr(
                network, snapshot, mapping.test.qualifier, mapping.test.attr
            )
        elif isinstance(mapping, Rename):
            _check_symbol(mapping.old, symbols)


def _origin_observations(
    origin: Origin, snapshot: list[Observation], env: dict
) -> list[Observation]:
    if origin.kind in ("all", "none"):
        return list(snapshot)
    if origin.kind == "perceived":
        return [obs for obs in snapshot if obs.kind == "perceived"]
    if origin.kind == "newest":
        return [max(snapshot, key=lambda o: (o.t, o.id))] if snapshot else []
    if origin.kind == "id":
        ids = {int(origin.ref)}
    else:  # var
        name = str(origin.ref)
        if name not in env:
            raise QueryError(f"undefined variable {name!r}")
        value = env[name]
        if isinstance(value, ResultGraph):
            ids = {item.obs_id for item in value.items()}
        elif isinstance(value, (int, np.integer)):
            ids = {int(value)}
        else:
            raise QueryError(f"variable {name!r} does not name observations")
    missing = ids - {obs.id for obs in snapshot}
    if missing:
        raise QueryError(f"unknown observation id {sorted(missing)[0]}")
    # the named observations plus their earlier timeline context
    anchors = [obs for obs in snapshot if obs.id in ids]
    lines = {(obs.timeline) for obs in anchors}
    horizon = {obs.timeline: obs.t for obs in anchors}
    return [
        obs
        for obs in snapshot
        if obs.timeline in lines and obs.t <= horizon[obs.timeline]
    ]


def _select_items(
    ast: ReplayQuery, selected: list[Observation], env: dict
) -> list[ResultItem]:
    newest_t = max((obs.t for obs in selected), default=0.0)
    items: list[ResultItem] = []
    seen: set[tuple[int, int]] = set()
    for obs in selected:
        for node_idx, node in enumerate(_obs_nodes(obs)):
            if not ast.filters:
                keep = node_idx < len(obs.trees)  # roots only by default
            else:
                keep = any(
                    _branch_accepts(branch, obs, node, newest_t, env)
                    for branch in ast.filters
                )
            if keep and (obs.id, node_idx) not in seen:
                seen.add((obs.id, node_idx))
                items.append(
                    ResultItem(
                        len(items), obs.id, obs.timeline, obs.t,
                        node.capsule, _copy_tree(node),
                    )
                )
    return items


def _obs_nodes(obs: Observation) -> list[ParseTree]:
    roots = list(obs.trees)
    nested: list[ParseTree] = []
    for tree in roots:
        nested.extend(node for node in _walk(tree) if node is not tree)
    return roots + nested


def _branch_accepts(
    branch: Conjunction,
    obs: Observation,
    node: ParseTree,
    newest_t: float,
    env: dict,
) -> bool:
    symbols = {p.name for p in branch if isinstance(p, SymbolIs)}
    if symbols and node.capsule not in symbols:
        return False
    for pred in branch:
        if isinstance(pred, Newest):
            if obs.t != newest_t:
                return False
        elif isinstance(pred, Compare):
            if not _compare_pred(pred, obs, node, env):
                return False
    return True


def _compare_pred(
    pred: Compare, obs: Observation, node: ParseTree, env: dict
) -> bool:
    rhs = _resolve_value(pred.value, env)
    if pred.qualifier is None and pred.attr in META_ATTRS:
        lhs = {"time": obs.t, "kind": obs.kind, "timeline": obs.timeline}[pred.attr]
        return _compare(lhs, pred.op, rhs)
    if pred.qualifier is not None and node.capsule != pred.qualifier:
        return False
    if pred.attr not in node.attrs.schema.names:
        return False
    return _compare(float(node.attrs.get(pred.attr)), pred.op, rhs)


def _apply_mapping(
    mapping: Mapping,
    items: list[ResultItem],
    by_id: dict[int, Observation],
    network: CapsuleNetwork,
    graph: ResultGraph,
    env: dict,
) -> list[ResultItem]:
    if isinstance(mapping, ThresholdTag):
        for item in items:
            if item.tag is not None or item.tree is None:
                continue
            test = mapping.test
            if test.qualifier is not None and item.symbol != test.qualifier:
                continue
            if test.attr not in item.tree.attrs.schema.names:
                continue
            lhs = float(item.tree.attrs.get(test.attr))
            if _compare(lhs, test.op, _resolve_value(test.value, env)):
                item.tag = mapping.tag
        return items
    if isinstance(mapping, Rename):
        for item in items:
            if item.symbol == mapping.old:
                item.symbol = mapping.new
        return items
    if isinstance(mapping, Distance):
        for obs_id in sorted({item.obs_id for item in items}):
            pair = _find_pair(mapping, items, by_id[obs_id])
            if pair is None:
                continue
            try:
                gap = min_distance(network, pair[0], pair[1])[0]
            except ValueError as err:
                raise QueryError(
                    f"d({mapping.a}, {mapping.b}): {err}"
                ) from err
            graph.values.append(
                (obs_id, by_id[obs_id].t, float(gap), f"d({mapping.a}, {mapping.b})")
            )
        graph.values.sort(key=lambda v: (v[1], v[0]))
        return items
    if isinstance(mapping, Projection):
        for item in items:
            if item.symbol != mapping.symbol or item.tree is None:
                continue
            if mapping.attr not in item.tree.attrs.schema.names:
                continue
            item.value = float(item.tree.attrs.get(mapping.attr))
            graph.values.append(
                (item.obs_id, item.t, item.value, f"{mapping.symbol}.{mapping.attr}")
            )
        graph.values.sort(key=lambda v: (v[1], v[0]))
        return items
    if isinstance(mapping, CameraOverride):
        graph.render_pose = _resolve_pose(mapping.source, env)
        return items
    # camera-nearest: keep only items of the observation whose stored
    # camera pose sits closest to the target pose
    target = (
        _resolve_pose(mapping.source, env)
        if mapping.source
        else graph.render_pose or CameraPose()
    )
    best: int | None = None
    best_gap = math.inf
    for obs_id in sorted({item.obs_id for item in items}):
        pose = by_id[obs_id].camera
        gap = abs(pose.angle - target.angle) + math.hypot(
            pose.shift[0] - target.shift[0], pose.shift[1] - target.shift[1]
        )
        if gap < best_gap:
            best, best_gap = obs_id, gap
    return [item for item in items if item.obs_id == best]


def _find_pair(
    mapping: Distance, items: list[ResultItem], obs: Observation
) -> tuple[ParseTree, ParseTree] | None:
    def find(symbol: str) -> list[ParseTree]:
        found = [
            item.tree
            for item in items
            if item.obs_id == obs.id and item.symbol == symbol and item.tree
        ]
        if not found:
            found = [n for n in _obs_nodes(obs) if n.capsule == symbol]
        return found

    first = find(mapping.a)
    if mapping.a == mapping.b:
        # d(circle, circle) means the first two objects of that symbol
        if len(first) < 2:
            return None
        return first[0], first[1]
    second = find(mapping.b)
    if not first or not second:
        return None
    return first[0], second[0]


def _resolve_pose(source, env: dict) -> CameraPose:
    if isinstance(source, tuple):
        return CameraPose(source[0], (source[1], source[2]))
    if source not in env:
        raise QueryError(f"undefined variable {source!r}")
    value = env[source]
    if isinstance(value, CameraPose):
        return value
    if isinstance(value, (tuple, list)) and len(value) == 3:
        return CameraPose(float(value[0]), (float(value[1]), float(value[2])))
    raise QueryError(f"variable {source!r} does not hold a camera pose")


def _camera_center(obs: Observation) -> tuple[float, float]:
    return 0.5 + obs.camera.shift[0], 0.5 + obs.camera.shift[1]


def _cluster(
    grouping: Grouping,
    items: list[ResultItem],
    by_id: dict[int, Observation],
    graph: ResultGraph,
) -> None:
    def key_of(item: ResultItem) -> str:
        if grouping.kind == "tag":
            return item.tag or "untagged"
        if grouping.kind == "symbol":
            return item.symbol
        if grouping.kind == "camera-grid":
            cx, cy = _camera_center(by_id[item.obs_id])
            i = min(grouping.nx - 1, max(0, int(cx * grouping.nx)))
            j = min(grouping.ny - 1, max(0, int(cy * grouping.ny)))
            return f"g{i},{j}"
        return "all"

    clusters: dict[str, Cluster] = {}
    for item in items:
        clusters.setdefault(key_of(item), Cluster(key_of(item))).items.append(item)
    graph.clusters = [clusters[k] for k in sorted(clusters)]


def _connect(items: list[ResultItem]) -> list[tuple[int, int]]:
    """Same-symbol continuations across consecutive selected observations.

    When one observation holds several items of a symbol, the k-th one
    links to the k-th in the next observation (selection order).
    """
    ordinal: dict[tuple[int, str], int] = {}
    by_track: dict[tuple[int, str, int], list[ResultItem]] = {}
    for item in items:
        k = ordinal.get((item.obs_id, item.symbol), 0)
        ordinal[(item.obs_id, item.symbol)] = k + 1
        by_track.setdefault((item.timeline, item.symbol, k), []).append(item)
    edges: list[tuple[int, int]] = []
    for track in by_track.values():
        track.sort(key=lambda i: (i.t, i.obs_id, i.uid))
        for a, b in zip(track, track[1:]):
            if a.obs_id != b.obs_id:
                edges.append((a.uid, b.uid))
    return sorted(edges)


def _through_camera(values: np.ndarray, names: list[str], pose: CameraPose):
    out = np.array(values, dtype=float)
    index = {name: k for k, name in enumerate(names)}
    if "x" in index and "y" in index:
        a = -pose.angle
        c, s = math.cos(a), math.sin(a)
        px = out[index["x"]] - 0.5 - pose.shift[0]
        py = out[index["y"]] - 0.5 - pose.shift[1]
        out[index["x"]] = min(1.0, max(0.0, c * px - s * py + 0.5))
        out[index["y"]] = min(1.0, max(0.0, s * px + c * py + 0.5))
    if "rot" in index:
        out[index["rot"]] = (out[index["rot"]] - pose.angle / (2 * math.pi)) % 1.0
    return out


MAX_FRAMES = 64


def _render_results(
    graph: ResultGraph, network: CapsuleNetwork
) -> list[np.ndarray]:
    frames: list[np.ndarray] = []
    renderable_seen = False
    for item in graph.items():
        if len(frames) >= MAX_FRAMES:
            break
        if item.tree is None or item.symbol not in network:
            continue
        values = item.tree.attrs.values
        if graph.render_pose is not None:
            values = _through_camera(
                values, list(item.tree.attrs.schema.names), graph.render_pose
            )
        try:
            _, frame = generate(network, item.symbol, values, RESOLUTION)
        except ValueError:
            if all(l.capsule in network.primitives for l in item.tree.leaves()):
                frame = render_tree(network, item.tree, RESOLUTION)
            else:
                continue
        renderable_seen = True
        frames.append(frame)
    if not frames and (graph.items() or graph.values) and not renderable_seen:
        frames.append(np.zeros((RESOLUTION, RESOLUTION)))
    return frames


# ----------------------------------------------------------------------
# predict


def eval_predict(
    ast: PredictQuery,
    memory: EpisodicMemory,
    models,
    network: CapsuleNetwork,
    env: dict | None = None,
) -> int:
    """Roll the learned physics forward from the origin observation.

    Appends one predicted observation per frame on a fork of the origin
    and returns the id of the last one.  The final state has been fed
    back through the capsule network by the stepper's re-observation.
    """
    env = env or {}
    if models is None:
        raise QueryError("physics is untrained; train models before predicting")
    origin_id = _resolve_origin_id(ast.origin, memory, env)
    origin_obs = next(o for o in memory.snapshot() if o.id == origin_id)
    previous_obs = _previous_on_timeline(memory, origin_obs)

    frames = [previous_obs.trees if previous_obs else origin_obs.trees,
              origin_obs.trees]
    states = sequence_from_trees(frames)
    forces = _resolve_forces(ast.forces, states[1], env)

    prev, cur = states
    last_id = origin_id
    for step in range(ast.duration):
        nxt = predict_step(network, models, prev, cur, forces=forces)
        last_id = memory.append(
            [b.tree for b in nxt],
            kind="predicted",
            origin=last_id,
            camera=origin_obs.camera,
            meta={"v": 1, "step": step + 1, "of": ast.duration},
        )
        prev, cur = cur, nxt
    return last_id


def _resolve_origin_id(origin: Origin, memory: EpisodicMemory, env: dict) -> int:
    snapshot = memory.snapshot()
    if not snapshot:
        raise QueryError("memory is empty; nothing to originate from")
    if origin.kind == "newest":
        return max(snapshot, key=lambda o: (o.t, o.id)).id
    if origin.kind == "id":
        if int(origin.ref) not in {o.id for o in snapshot}:
            raise QueryError(f"unknown observation id {origin.ref}")
        return int(origin.ref)
    if origin.kind == "var":
        name = str(origin.ref)
        if name not in env:
            raise QueryError(f"undefined variable {name!r}")
        value = env[name]
        if isinstance(value, ResultGraph):
            items = value.items()
            if not items:
                raise QueryError(f"variable {name!r} holds an empty result")
            return max(items, key=lambda i: (i.t, i.obs_id)).obs_id
        if isinstance(value, (int, np.integer)):
            if int(value) not in {o.id for o in snapshot}:
                raise QueryError(f"unknown observation id {int(value)}")
            return int(value)
        raise QueryError(f"variable {name!r} does not name an observation")
    if origin.kind == "capsule":
        found = _newest_with_symbol(snapshot, str(origin.ref))
        if found is None:
            raise QueryError(f"no remembered observation contains {origin.ref!r}")
        return found[0].id
    raise QueryError(f"origin {origin.kind!r} does not name one observation")


def _previous_on_timeline(
    memory: EpisodicMemory, obs: Observation
) -> Observation | None:
    chain = memory.timeline(obs.timeline)
    ids = [o.id for o in chain]
    idx = ids.index(obs.id)
    if idx > 0:
        return chain[idx - 1]
    origin = memory.graph.timelines[obs.timeline].origin
    if origin is None:
        return None
    return next(o for o in memory.snapshot() if o.id == origin)


def _resolve_forces(
    forces, states, env: dict
) -> dict[int, np.ndarray] | None:
    if not forces:
        return None
    by_symbol: dict[str, list[int]] = {}
    for body in states:
        by_symbol.setdefault(body.symbol, []).append(body.oid)
    out: dict[int, np.ndarray] = {}

    def add(symbol: str, vec) -> None:
        if symbol not in by_symbol:
            raise QueryError(
                f"unknown symbol {symbol!r}; objects present: {sorted(by_symbol)}"
            )
        for oid in by_symbol[symbol]:
            out[oid] = out.get(oid, np.zeros(3)) + np.asarray(vec, dtype=float)

    for f in forces:
        if isinstance(f, ForceSpec):
            add(f.symbol, (f.fx, f.fy, f.torque))
            continue
        if f.name not in env:
            raise QueryError(f"undefined variable {f.name!r}")
        bundle = env[f.name]
        if isinstance(bundle, dict):
            for key, vec in bundle.items():
                if isinstance(key, str):
                    add(key, vec)
                else:
                    out[int(key)] = out.get(int(key), np.zeros(3)) + np.asarray(
                        vec, dtype=float
                    )
        elif isinstance(bundle, (list, tuple)):
            for spec in bundle:
                add(spec.symbol, (spec.fx, spec.fy, spec.torque))
        else:
            raise QueryError(f"variable {f.name!r} does not hold forces")
    return out


# ----------------------------------------------------------------------
# fabricate


def eval_fabricate(
    ast: FabricateQuery,
    memory: EpisodicMemory,
    network: CapsuleNetwork,
    env: dict | None = None,
) -> int:
    """Write an edited or invented scene as a fabricated observation.

    With an origin the result forks from it; without one it starts a
    fresh root time-line.  The changed trees are fed back through the
    network so known structures are re-admitted before storage.
    """
    env = env or {}
    snapshot = memory.snapshot()
    if ast.origin.kind in ("all", "perceived"):
        raise QueryError("FABRICATE origin must be none or one observation")
    if ast.origin.kind == "none":
        origin_id, trees = None, []
        camera = CameraPose()
    elif ast.origin.kind == "capsule":
        found = _newest_with_symbol(snapshot, str(ast.origin.ref))
        if found is None:
            raise QueryError(
                f"no remembered observation contains {ast.origin.ref!r}"
            )
        origin_obs, node = found
        origin_id, trees = origin_obs.id, [_copy_tree(node)]
        camera = origin_obs.camera
    else:
        origin_id = _resolve_origin_id(ast.origin, memory, env)
        origin_obs = next(o for o in snapshot if o.id == origin_id)
        trees = [_copy_tree(t) for t in origin_obs.trees]
        camera = origin_obs.camera

    changes = list(ast.changes)
    applied: list[str] = []
    while changes:
        change = changes.pop(0)
        if isinstance(change, ApplyVar):
            changes = _expand_change_var(change, env) + changes
            continue
        trees = _apply_change(change, trees, network, snapshot, env)
        applied.append(_change_text(change))

    if trees:
        grounded = redetect(network, dict(enumerate(trees)))
        trees = [grounded[k] for k in sorted(grounded)]
    return memory.append(
        trees,
        kind="fabricated",
        origin=origin_id,
        camera=camera,
        meta={"v": 1, "changes": applied},
    )


def _newest_with_symbol(
    snapshot: list[Observation], symbol: str
) -> tuple[Observation, ParseTree] | None:
    for obs in sorted(snapshot, key=lambda o: (o.t, o.id), reverse=True):
        for node in _obs_nodes(obs):
            if node.capsule == symbol:
                return obs, node
    return None


def _expand_change_var(change: ApplyVar, env: dict) -> list[Change]:
    if change.name not in env:
        raise QueryError(f"undefined variable {change.name!r}")
    bundle = env[change.name]
    if isinstance(
        bundle, (AddObject, RemoveObject, SetAttr, CopyAttrs)
    ):
        return [bundle]
    if isinstance(bundle, (list, tuple)) and all(
        isinstance(c, (AddObject, RemoveObject, SetAttr, CopyAttrs)) for c in bundle
    ):
        return list(bundle)
    raise QueryError(f"variable {change.name!r} does not hold changes")


def _apply_change(
    change: Change,
    trees: list[ParseTree],
    network: CapsuleNetwork,
    snapshot: list[Observation],
    env: dict,
) -> list[ParseTree]:
    from .physics import transform_subtree

    if isinstance(change, AddObject):
        if change.capsule not in network:
            raise QueryError(
                f"unknown capsule {change.capsule!r}; "
                f"valid capsules: {sorted(network.capsule_names())}"
            )
        schema = network.schema_of(change.capsule)
        values = np.full(len(schema.names), 0.5)
        for slot, value in change.attrs:
            if slot not in schema.names:
                raise QueryError(
                    f"unknown attribute {slot!r} of {change.capsule!r}; "
                    f"valid attributes: {sorted(schema.names)}"
                )
            values[list(schema.names).index(slot)] = value
        if change.capsule in network.primitives:
            from .attributes import AttributeVector

            tree = ParseTree(change.capsule, AttributeVector(schema, values), 1.0)
        else:
            tree, _ = generate(network, change.capsule, values, RESOLUTION)
        return trees + [tree]

    if isinstance(change, RemoveObject):
        kept = [t for t in trees if t.capsule != change.symbol]
        if len(kept) == len(trees):
            found = False

            def prune(tree: ParseTree) -> None:
                nonlocal found
                before = len(tree.children)
                tree.children = [
                    c for c in tree.children if c.capsule != change.symbol
                ]
                found = found or len(tree.children) < before
                for child in tree.children:
                    prune(child)

            for tree in kept:
                prune(tree)
            if not found:
                raise QueryError(f"no object named {change.symbol!r} to remove")
        return kept

    if isinstance(change, SetAttr):
        node = _find_node(trees, change.symbol)
        if node is None:
            raise QueryError(f"no object named {change.symbol!r} in the scene")
        names = list(node.attrs.schema.names)
        if change.attr not in names:
            raise QueryError(
                f"unknown attribute {change.attr!r} of {change.symbol!r}; "
                f"valid attributes: {sorted(names)}"
            )
        values = np.array(node.attrs.values, dtype=float)
        values[names.index(change.attr)] = change.value
        if node.attrs.schema.classes[names.index(change.attr)] in (
            "position",
            "rotation",
            "size",
        ):
            reposed = transform_subtree(node, values)
            node.attrs = reposed.attrs
            node.children = reposed.children
        else:
            node.attrs.values[names.index(change.attr)] = change.value
            _propagate_named(node, change.attr, change.value)
        return trees

    # copy attribute values: carry the source's style slots over
    source = _resolve_copy_source(change.source, snapshot, env)
    if not trees:
        raise QueryError("no target scene to copy attribute values onto")
    for tree in trees:
        _copy_style(source, tree)
    return trees


def _find_node(trees: list[ParseTree], symbol: str) -> ParseTree | None:
    for tree in trees:
        for node in _walk(tree):
            if node.capsule == symbol:
                return node
    return None


def _propagate_named(node: ParseTree, attr: str, value: float) -> None:
    for child in node.children:
        names = list(child.attrs.schema.names)
        if attr in names:
            child.attrs.values[names.index(attr)] = value
        _propagate_named(child, attr, value)


def _resolve_copy_source(
    source: str, snapshot: list[Observation], env: dict
) -> ParseTree:
    if source.startswith("$"):
        name = source[1:]
        if name not in env:
            raise QueryError(f"undefined variable {name!r}")
        value = env[name]
        if isinstance(value, ResultGraph):
            items = [i for i in value.items() if i.tree is not None]
            if not items:
                raise QueryError(f"variable {name!r} holds no copyable items")
            return max(items, key=lambda i: (i.t, i.obs_id)).tree
        if isinstance(value, ParseTree):
            return value
        raise QueryError(f"variable {name!r} does not hold a parse tree")
    found = _newest_with_symbol(snapshot, source)
    if found is None:
        raise QueryError(f"no remembered observation contains {source!r}")
    return found[1]


def _copy_style(source: ParseTree, target: ParseTree) -> None:
    """Style transfer: adjective and verb slots copy over by name, at
    every depth of the target; pose slots stay untouched."""
    src_names = list(source.attrs.schema.names)
    src_classes = list(source.attrs.schema.classes)
    for name, cls in zip(src_names, src_classes):
        if cls not in ("adjective", "verb"):
            continue
        value = float(source.attrs.get(name))
        for node in _walk(target):
            names = list(node.attrs.schema.names)
            if name in names:
                node.attrs.values[names.index(name)] = value


# ----------------------------------------------------------------------
# scripts


@dataclass
class _Stmt:
    index: int
    line: int
    var: str | None
    text: str


@dataclass
class _Loop:
    index: int
    line: int
    count: int
    body: list
    until: tuple[str, str, float | str] | None = None


def _physical_lines(text: str) -> list[tuple[int, int, str]]:
    """(lineno, indent, text) for each non-blank line, comments stripped."""
    lines: list[tuple[int, int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.expandtabs(8).split("#", 1)[0].rstrip()
        if not body.strip():
            continue
        stripped = body.lstrip()
        lines.append((lineno, len(body) - len(stripped), stripped))
    return lines


_ASSIGN_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_-]*)\s*=\s*(.+)$")
_REPEAT_RE = re.compile(r"^REPEAT\s+(\d+)$", re.IGNORECASE)
_UNTIL_RE = re.compile(
    r"^UNTIL\s+\$([A-Za-z_][A-Za-z0-9_-]*)\s*(<=|>=|!=|=|<|>)\s*(.+)$",
    re.IGNORECASE,
)


def parse_script(text: str) -> list[_Stmt | _Loop]:
    """Script = statements, literal bindings and bounded REPEAT loops.

    The first statement of each block (the file, or a REPEAT body) fixes
    that block's indentation; deeper-indented lines continue the previous
    statement.  REPEAT/UNTIL/END are structural at any indentation.
    """
    lines = _physical_lines(text)
    counter = 0

    def block(pos: int, top: bool) -> tuple[list, int]:
        nonlocal counter
        nodes: list = []
        stmt_indent: int | None = None
        while pos < len(lines):
            lineno, indent, body = lines[pos]
            if _REPEAT_RE.match(body):
                count = int(_REPEAT_RE.match(body).group(1))
                loop = _Loop(counter, lineno, count, [])
                counter += 1
                inner, pos = block(pos + 1, False)
                loop.body = inner
                if pos >= len(lines):
                    raise QueryError("REPEAT without END", lineno, 1)
                end_line, _, end_body = lines[pos]
                m = _UNTIL_RE.match(end_body)
                if m:
                    value = m.group(3).strip()
                    try:
                        rhs: float | str = float(value)
                    except ValueError:
                        rhs = value
                    loop.until = (m.group(1), m.group(2), rhs)
                    pos += 1
                    if pos >= len(lines) or lines[pos][2].upper() != "END":
                        raise QueryError("UNTIL must come right before END",
                                         end_line, 1)
                if lines[pos][2].upper() != "END":
                    raise QueryError("REPEAT without END", lineno, 1)
                nodes.append(loop)
                pos += 1
                continue
            if body.upper() == "END" or _UNTIL_RE.match(body):
                if top:
                    raise QueryError(f"{body.split()[0]} outside a loop", lineno, 1)
                return nodes, pos
            if (stmt_indent is not None and indent > stmt_indent
                    and nodes and isinstance(nodes[-1], _Stmt)):
                nodes[-1].text += " " + body
                pos += 1
                continue
            if stmt_indent is None:
                stmt_indent = indent
            var = None
            m = _ASSIGN_RE.match(body)
            if m and m.group(1).upper() not in ("REPLAY", "PREDICT", "FABRICATE"):
                var, body = m.group(1), m.group(2).strip()
            nodes.append(_Stmt(counter, lineno, var, body))
            counter += 1
            pos += 1
        return nodes, pos

    nodes, pos = block(0, True)
    return nodes


_NUMBER_LITERAL = re.compile(r"^-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?$")


def run_script(
    path: str,
    memory: EpisodicMemory,
    network: CapsuleNetwork,
    models=None,
    env: dict | None = None,
    out_dir: str | None = None,
) -> list[dict]:
    """Execute a query script; returns (and optionally writes) the transcript.

    Statements run in order; `name = ...` binds the result; REPEAT/UNTIL
    loops re-run their body up to the given count.  Frames render to PNG
    files under out_dir, where the transcript also lands as JSON lines.
    The first failure aborts the run with its statement index.
    """
    with open(path, encoding="utf-8") as fh:
        program = parse_script(fh.read())
    env = dict(env or {})
    transcript: list[dict] = []
    sink = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        sink = open(os.path.join(out_dir, "transcript.jsonl"), "w", encoding="utf-8")

    def emit(entry: dict) -> None:
        transcript.append(entry)
        if sink is not None:
            sink.write(json.dumps(entry) + "\n")
            sink.flush()

    def run_stmt(stmt: _Stmt) -> None:
        entry: dict = {"v": 1, "i": stmt.index, "line": stmt.line}
        if _NUMBER_LITERAL.match(stmt.text):
            env[stmt.var] = float(stmt.text)
            entry.update(kind="let", query=f"{stmt.var} = {stmt.text}",
                         result={"value": float(stmt.text)})
            emit(entry)
            return
        ast = parse_query(stmt.text)
        entry["query"] = print_query(ast)
        if isinstance(ast, ReplayQuery):
            graph, frames = eval_replay(ast, memory.snapshot(), network, env)
            entry.update(kind="replay", result=graph.summary(),
                         frames=_write_frames(frames, out_dir, stmt.index))
            value: object = graph
        elif isinstance(ast, PredictQuery):
            obs_id = eval_predict(ast, memory, models, network, env)
            obs = next(o for o in memory.snapshot() if o.id == obs_id)
            entry.update(kind="predict",
                         result={"observation": obs_id, "timeline": obs.timeline})
            value = obs_id
        else:
            obs_id = eval_fabricate(ast, memory, network, env)
            obs = next(o for o in memory.snapshot() if o.id == obs_id)
            entry.update(kind="fabricate",
                         result={"observation": obs_id, "timeline": obs.timeline})
            value = obs_id
        emit(entry)
        if stmt.var is not None:
            env[stmt.var] = value

    def run_block(nodes: list) -> None:
        for node in nodes:
            if isinstance(node, _Stmt):
                try:
                    run_stmt(node)
                except QueryError as err:
                    emit({"v": 1, "i": node.index, "line": node.line,
                          "error": str(err)})
                    raise ScriptError(
                        f"statement {node.index} (line {node.line}): {err}",
                        node.index, transcript,
                    ) from err
                continue
            for _ in range(node.count):
                run_block(node.body)
                if node.until is not None:
                    name, op, rhs = node.until
                    if name not in env:
                        emit({"v": 1, "i": node.index, "line": node.line,
                              "error": f"undefined variable {name!r}"})
                        raise ScriptError(
                            f"statement {node.index} (line {node.line}): "
                            f"undefined variable {name!r}",
                            node.index, transcript,
                        )
                    rhs_val = rhs if isinstance(rhs, float) else _resolve_value(
                        rhs, env
                    )
                    if _compare(_scalar_of(env[name]), op, rhs_val):
                        break

    try:
        run_block(program)
    finally:
        if sink is not None:
            sink.close()
    return transcript


def _write_frames(
    frames: list[np.ndarray], out_dir: str | None, index: int
) -> list[str]:
    if out_dir is None:
        return []
    from PIL import Image

    paths = []
    for k, frame in enumerate(frames):
        arr = (np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8)
        path = os.path.join(out_dir, f"frame_{index:03d}_{k:02d}.png")
        Image.fromarray(arr, mode="L").save(path)
        paths.append(path)
    return paths
