"""Skeleton model: kinematic tree, joints, marker sites, scales and couplings.

Model files are UTF-8 text, one directive per line::

    body <name> parent=<name|none> offset=<x,y,z>
    joint <body> kind=<free|hinge|ball> [axis=<x,y,z>] [range=<lo,hi>] [name=<id>]
    site <name> body=<body> pos=<x,y,z>
    scale <name> bodies=<b1,b2,...>
    constraint <dofA> <dofB> ratio=<r> offset=<o>

``#`` starts a comment. Units are meters and radians. The first declared
scale is the overall size and applies to every body; a model without
``scale`` lines gets an implicit ``overall`` scale. Constraint DoFs may be
given as pose indices or DoF names.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np

from .exceptions import ModelSemanticError, ModelSyntaxError, ShapeError

JOINT_KINDS = ("free", "hinge", "ball")
JOINT_DOF = {"free": 6, "hinge": 1, "ball": 3}
AXIS_TOLERANCE = 1e-9

DEMO_MODELS = {
    "biped": "biped.model",
    "biped_spine": "biped_spine.model",
}

Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class BodySegment:
    """A rigid segment. ``attach_offset`` is in the parent frame, unscaled."""
    name: str
    parent: int | None
    attach_offset: Vec3 = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class JointDef:
    """A joint driving ``body``. Ranges bound the rotational DoF only."""
    body: int
    kind: str
    name: str
    axis: Vec3 | None = None
    range_lo: float | None = None
    range_hi: float | None = None

    @property
    def n_dof(self) -> int:
        return JOINT_DOF[self.kind]

    @property
    def bounded(self) -> bool:
        return self.range_lo is not None

    def dof_names(self) -> tuple[str, ...]:
        if self.kind == "hinge":
            return (self.name,)
        if self.kind == "ball":
            return tuple(f"{self.name}_{c}" for c in "xyz")
        return tuple(f"{self.name}_{c}" for c in ("tx", "ty", "tz", "rx", "ry", "rz"))


@dataclass(frozen=True)
class SiteDef:
    """A virtual marker rigidly attached to ``body`` at ``local_pos`` (unscaled)."""
    name: str
    body: int
    local_pos: Vec3


@dataclass(frozen=True)
class ScaleMap:
    """Scale parameters and the bodies each one multiplies.

    ``assignment[b][k]`` is 1 when scale ``k`` multiplies body ``b``.
    Column 0 is the overall size and is set for every body.
    """
    names: tuple[str, ...]
    assignment: tuple[tuple[int, ...], ...]

    @property
    def n_scales(self) -> int:
        return len(self.names)

    @cached_property
    def matrix(self) -> np.ndarray:
        return np.array(self.assignment, dtype=np.float64).reshape(len(self.assignment), self.n_scales)


@dataclass(frozen=True)
class EqualityConstraint:
    """Linear coupling ``eps = theta[dof_a] - ratio * theta[dof_b] - offset``."""
    dof_a: int
    dof_b: int
    ratio: float = 1.0
    offset: float = 0.0


@dataclass(frozen=True)
class SkeletonModel:
    """An immutable kinematic tree with its marker sites, scales and couplings."""
    bodies: tuple[BodySegment, ...]
    joints: tuple[JointDef, ...]
    sites: tuple[SiteDef, ...]
    scale_map: ScaleMap
    constraints: tuple[EqualityConstraint, ...] = ()

    @property
    def n_dof(self) -> int:
        return sum(j.n_dof for j in self.joints)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n_scales(self) -> int:
        return self.scale_map.n_scales

    @property
    def n_bodies(self) -> int:
        return len(self.bodies)

    @cached_property
    def dof_names(self) -> tuple[str, ...]:
        return tuple(name for joint in self.joints for name in joint.dof_names())

    @cached_property
    def joint_dof_start(self) -> tuple[int, ...]:
        starts, cursor = [], 0
        for joint in self.joints:
            starts.append(cursor)
            cursor += joint.n_dof
        return tuple(starts)

    @cached_property
    def site_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.sites)

    @cached_property
    def body_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.bodies)

    @cached_property
    def site_positions(self) -> np.ndarray:
        """Unscaled base site positions, ``(J, 3)``."""
        return np.array([s.local_pos for s in self.sites], dtype=np.float64).reshape(-1, 3)

    @cached_property
    def site_bodies(self) -> np.ndarray:
        return np.array([s.body for s in self.sites], dtype=np.int64)

    @cached_property
    def attach_offsets(self) -> np.ndarray:
        return np.array([b.attach_offset for b in self.bodies], dtype=np.float64)

    @cached_property
    def dof_bounds(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(lo, hi, bounded)`` per pose coordinate."""
        lo = np.full(self.n_dof, -np.inf)
        hi = np.full(self.n_dof, np.inf)
        for joint, start in zip(self.joints, self.joint_dof_start):
            if not joint.bounded:
                continue
            # free-joint translations and rotations stay unbounded
            if joint.kind in ("hinge", "ball"):
                lo[start:start + joint.n_dof] = joint.range_lo
                hi[start:start + joint.n_dof] = joint.range_hi
        return lo, hi, np.isfinite(lo)

    def site_index(self, name: str) -> int:
        try:
            return self.site_names.index(name)
        except ValueError:
            raise KeyError(f"unknown site '{name}'") from None

    def dof_index(self, name: str) -> int:
        try:
            return self.dof_names.index(name)
        except ValueError:
            raise KeyError(f"unknown degree of freedom '{name}'") from None

    def joints_of(self, body: int) -> list[tuple[JointDef, int]]:
        """Joints driving ``body`` with their first pose index, in declaration order."""
        return [(j, s) for j, s in zip(self.joints, self.joint_dof_start) if j.body == body]

    def with_site_positions(self, positions: np.ndarray) -> "SkeletonModel":
        """A copy whose base site positions are replaced."""
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != (self.n_sites, 3):
            raise ShapeError(f"site positions must be ({self.n_sites}, 3), got {positions.shape}")
        sites = tuple(
            SiteDef(s.name, s.body, tuple(float(v) for v in p))
            for s, p in zip(self.sites, positions)
        )
        return SkeletonModel(self.bodies, self.joints, sites, self.scale_map, self.constraints)


@dataclass
class SubjectParams:
    """Per-subject beta: scale parameters plus body-frame site offsets (meters)."""
    scales: np.ndarray
    site_offsets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        self.site_offsets = np.asarray(self.site_offsets, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def neutral(cls, model: SkeletonModel) -> "SubjectParams":
        """Unscaled model, zero offsets."""
        return cls(np.ones(model.n_scales), np.zeros((model.n_sites, 3)))

    @classmethod
    def from_vector(cls, model: SkeletonModel, beta: np.ndarray) -> "SubjectParams":
        beta = np.asarray(beta, dtype=np.float64).reshape(-1)
        expected = model.n_scales + 3 * model.n_sites
        if beta.size != expected:
            raise ShapeError(f"beta has {beta.size} entries, expected {expected}")
        return cls(beta[:model.n_scales], beta[model.n_scales:].reshape(-1, 3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.scales, self.site_offsets.reshape(-1)])

    def validate(self, model: SkeletonModel) -> None:
        if self.scales.shape != (model.n_scales,):
            raise ShapeError(f"expected {model.n_scales} scales, got {self.scales.shape[0]}")
        if self.site_offsets.shape != (model.n_sites, 3):
            raise ShapeError(f"site offsets must be ({model.n_sites}, 3), got {self.site_offsets.shape}")
        if np.any(self.scales <= 0):
            raise ValueError("scale parameters must be positive")

    def to_dict(self, model: SkeletonModel) -> dict:
        return {
            "scales": dict(zip(model.scale_map.names, self.scales.tolist())),
            "site_offsets": dict(zip(model.site_names, self.site_offsets.tolist())),
        }

    @classmethod
    def from_dict(cls, model: SkeletonModel, data: dict) -> "SubjectParams":
        scales = [data["scales"][name] for name in model.scale_map.names]
        offsets = [data["site_offsets"].get(name, [0.0, 0.0, 0.0]) for name in model.site_names]
        return cls(scales, offsets)


def body_scales(model: SkeletonModel, scales) -> np.ndarray:
    """
    Per-body isotropic scale factors.

    factor[b] is the product of the scale parameters assigned to body b; the
    overall size is always among them.
    """
    scales = np.asarray(scales, dtype=np.float64).reshape(-1)
    if scales.shape != (model.n_scales,):
        raise ShapeError(f"expected {model.n_scales} scales, got {scales.shape[0]}")
    if np.any(scales <= 0):
        bad = model.scale_map.names[int(np.argmax(scales <= 0))]
        raise ValueError(f"scale parameter '{bad}' must be positive")
    mask = model.scale_map.matrix.astype(bool)
    return np.prod(np.where(mask, scales[None, :], 1.0), axis=1)


# --- parsing ---

class _Line:
    """Tokens of one directive line with their 1-based columns."""

    def __init__(self, number: int, text: str):
        self.number = number
        self.tokens: list[tuple[str, int]] = []
        col = 0
        while col < len(text):
            if text[col].isspace():
                col += 1
                continue
            start = col
            while col < len(text) and not text[col].isspace():
                col += 1
            self.tokens.append((text[start:col], start + 1))

    def error(self, message: str, column: int = 1) -> ModelSyntaxError:
        return ModelSyntaxError(message, self.number, column)

    def split(self, n_positional: int, allowed: set[str]) -> tuple[list[tuple[str, int]], dict]:
        directive = self.tokens[0][0]
        positional = self.tokens[1:1 + n_positional]
        if len(positional) < n_positional or any("=" in tok for tok, _ in positional):
            col = positional[-1][1] if positional else self.tokens[0][1]
            raise self.error(f"'{directive}' expects {n_positional} positional argument(s)", col)
        attrs: dict[str, tuple[str, int]] = {}
        for tok, col in self.tokens[1 + n_positional:]:
            key, sep, value = tok.partition("=")
            if not sep or not key or not value:
                raise self.error(f"expected key=value, got '{tok}'", col)
            if key not in allowed:
                raise self.error(f"unknown attribute '{key}' for '{directive}'", col)
            if key in attrs:
                raise self.error(f"attribute '{key}' given twice", col)
            attrs[key] = (value, col + len(key) + 1)
        return positional, attrs

    def require(self, attrs: dict, key: str) -> tuple[str, int]:
        if key not in attrs:
            raise self.error(f"'{self.tokens[0][0]}' requires '{key}='", self.tokens[0][1])
        return attrs[key]

    def floats(self, value: str, column: int, count: int | None = None) -> tuple[float, ...]:
        parts = value.split(",")
        out = []
        offset = 0
        for part in parts:
            try:
                out.append(float(part))
            except ValueError:
                raise self.error(f"invalid number '{part}'", column + offset) from None
            offset += len(part) + 1
        if count is not None and len(out) != count:
            raise self.error(f"expected {count} comma-separated numbers, got {len(out)}", column)
        return tuple(out)


def parse_model(text: str) -> SkeletonModel:
    """
    Parse model-file text into a validated :class:`SkeletonModel`.

    Bodies and sites keep their declaration order. Syntax errors carry the
    line and column; semantic errors name the offending element.
    """
    bodies: list[BodySegment] = []
    body_index: dict[str, int] = {}
    pending_parents: list[tuple[str, str, int]] = []
    joints: list[tuple[JointDef, int]] = []
    sites: list[SiteDef] = []
    scales: list[tuple[str, list[str], _Line]] = []
    raw_constraints: list[tuple[str, str, float, float, _Line]] = []

    declared_bodies = set()
    lines = []
    for number, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0]
        line = _Line(number, content)
        if not line.tokens:
            continue
        lines.append(line)
        if line.tokens[0][0] == "body" and len(line.tokens) > 1:
            declared_bodies.add(line.tokens[1][0])

    for line in lines:
        directive, col = line.tokens[0]
        if directive == "body":
            (name_tok,), attrs = line.split(1, {"parent", "offset"})
            name = name_tok[0]
            if name in body_index:
                raise ModelSemanticError("body declared twice", f"body '{name}'")
            parent_name, _ = line.require(attrs, "parent")
            offset = (0.0, 0.0, 0.0)
            if "offset" in attrs:
                offset = line.floats(*attrs["offset"], count=3)
            if parent_name == "none":
                if bodies:
                    raise ModelSemanticError("only the first body may be the root", f"body '{name}'")
                parent = None
            elif parent_name == name:
                raise ModelSemanticError("body is its own parent (cycle)", f"body '{name}'")
            elif parent_name in body_index:
                parent = body_index[parent_name]
            elif parent_name in declared_bodies:
                raise ModelSemanticError(
                    f"declared before its parent '{parent_name}'", f"body '{name}'"
                )
            else:
                raise ModelSemanticError(f"unknown parent '{parent_name}'", f"body '{name}'")
            if not bodies and parent is not None:
                raise ModelSemanticError("the first body must have parent=none", f"body '{name}'")
            body_index[name] = len(bodies)
            bodies.append(BodySegment(name, parent, offset))

        elif directive == "joint":
            (body_tok,), attrs = line.split(1, {"kind", "axis", "range", "name"})
            body_name = body_tok[0]
            if body_name not in body_index:
                raise ModelSemanticError(f"unknown body '{body_name}'", f"joint on '{body_name}'")
            kind, kind_col = line.require(attrs, "kind")
            if kind not in JOINT_KINDS:
                raise line.error(f"unknown joint kind '{kind}'", kind_col)
            b = body_index[body_name]
            name = attrs["name"][0] if "name" in attrs else f"{body_name}_{kind}{len(joints)}"
            axis = None
            if "axis" in attrs:
                axis = line.floats(*attrs["axis"], count=3)
            lo = hi = None
            if "range" in attrs:
                lo, hi = line.floats(*attrs["range"], count=2)
            joints.append((JointDef(b, kind, name, axis, lo, hi), line.number))

        elif directive == "site":
            (name_tok,), attrs = line.split(1, {"body", "pos"})
            name = name_tok[0]
            body_name, _ = line.require(attrs, "body")
            if body_name not in body_index:
                raise ModelSemanticError(f"unknown body '{body_name}'", f"site '{name}'")
            pos = line.floats(*line.require(attrs, "pos"), count=3)
            sites.append(SiteDef(name, body_index[body_name], pos))

        elif directive == "scale":
            (name_tok,), attrs = line.split(1, {"bodies"})
            names = attrs["bodies"][0].split(",") if "bodies" in attrs else []
            scales.append((name_tok[0], names, line))

        elif directive == "constraint":
            (a_tok, b_tok), attrs = line.split(2, {"ratio", "offset"})
            ratio = line.floats(*attrs["ratio"], count=1)[0] if "ratio" in attrs else 1.0
            offset = line.floats(*attrs["offset"], count=1)[0] if "offset" in attrs else 0.0
            raw_constraints.append((a_tok[0], b_tok[0], ratio, offset, line))

        else:
            raise line.error(f"unknown directive '{directive}'", col)

    if not bodies:
        raise ModelSemanticError("model declares no bodies", "model")

    model_joints = _validate_joints(bodies, joints)
    _validate_sites(sites)
    scale_map = _build_scale_map(bodies, body_index, scales)
    partial = SkeletonModel(tuple(bodies), tuple(model_joints), tuple(sites), scale_map)
    constraints = _resolve_constraints(partial, raw_constraints)
    return SkeletonModel(tuple(bodies), tuple(model_joints), tuple(sites), scale_map, tuple(constraints))


def _finite(values, element: str, what: str) -> None:
    if values is not None and not all(math.isfinite(v) for v in values):
        raise ModelSemanticError(f"{what} must be finite", element)


def _validate_joints(bodies, joints) -> list[JointDef]:
    root_offset = bodies[0].attach_offset
    if any(v != 0.0 for v in root_offset):
        raise ModelSemanticError("root attach offset must be zero", f"body '{bodies[0].name}'")
    for body in bodies:
        _finite(body.attach_offset, f"body '{body.name}'", "attach offset")

    result = []
    names = set()
    for joint, _ in joints:
        element = f"joint '{joint.name}'"
        if joint.name in names:
            raise ModelSemanticError("joint name declared twice", element)
        names.add(joint.name)
        if joint.kind == "free":
            if joint.body != 0:
                raise ModelSemanticError("free joints are only allowed on the root body", element)
            if any(j.body == 0 for j in result):
                raise ModelSemanticError("a free joint must be the only joint on its body", element)
        elif any(j.body == joint.body and j.kind == "free" for j in result):
            raise ModelSemanticError("a free joint must be the only joint on its body", element)

        axis = joint.axis
        if joint.kind == "hinge":
            if axis is None:
                raise ModelSemanticError("hinge joints require an axis", element)
            _finite(axis, element, "axis")
            n = math.sqrt(sum(v * v for v in axis))
            if n == 0.0:
                raise ModelSemanticError("axis must be non-zero", element)
            if abs(n - 1.0) > AXIS_TOLERANCE:
                axis = tuple(v / n for v in axis)
        elif axis is not None:
            raise ModelSemanticError(f"{joint.kind} joints take no axis", element)

        if joint.range_lo is not None:
            _finite((joint.range_lo, joint.range_hi), element, "range")
            if not joint.range_lo < joint.range_hi:
                raise ModelSemanticError(
                    f"range low {joint.range_lo} must be below high {joint.range_hi}", element
                )
        result.append(JointDef(joint.body, joint.kind, joint.name, axis, joint.range_lo, joint.range_hi))
    return result


def _validate_sites(sites) -> None:
    seen = set()
    for site in sites:
        element = f"site '{site.name}'"
        if site.name in seen:
            raise ModelSemanticError("site name declared twice", element)
        seen.add(site.name)
        _finite(site.local_pos, element, "position")


def _build_scale_map(bodies, body_index, scales) -> ScaleMap:
    if not scales:
        return ScaleMap(("overall",), tuple((1,) for _ in bodies))
    names = []
    rows = [[0] * len(scales) for _ in bodies]
    for k, (name, body_names, line) in enumerate(scales):
        if name in names:
            raise ModelSemanticError("scale declared twice", f"scale '{name}'")
        names.append(name)
        if k == 0:
            for row in rows:
                row[0] = 1
            continue
        if not body_names:
            raise line.error(f"scale '{name}' requires 'bodies='", line.tokens[0][1])
        for body_name in body_names:
            if body_name not in body_index:
                raise ModelSemanticError(f"unknown body '{body_name}'", f"scale '{name}'")
            rows[body_index[body_name]][k] = 1
    return ScaleMap(tuple(names), tuple(tuple(r) for r in rows))


def _resolve_constraints(model: SkeletonModel, raw) -> list[EqualityConstraint]:
    def resolve(token: str, element: str) -> int:
        try:
            index = int(token)
        except ValueError:
            if token not in model.dof_names:
                raise ModelSemanticError(f"unknown degree of freedom '{token}'", element) from None
            return model.dof_names.index(token)
        if not 0 <= index < model.n_dof:
            raise ModelSemanticError(f"pose index {index} out of range", element)
        return index

    constraints = []
    for a, b, ratio, offset, _ in raw:
        element = f"constraint {a} {b}"
        ia, ib = resolve(a, element), resolve(b, element)
        if ia == ib:
            raise ModelSemanticError("a constraint must couple two different DoFs", element)
        _finite((ratio, offset), element, "ratio and offset")
        constraints.append(EqualityConstraint(ia, ib, ratio, offset))
    return constraints


def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def serialize_model(model: SkeletonModel) -> str:
    """Model-file text that parses back to an identical model."""
    out = []
    for body in model.bodies:
        parent = "none" if body.parent is None else model.bodies[body.parent].name
        out.append(f"body {body.name} parent={parent} offset={_fmt(body.attach_offset)}")
    for joint in model.joints:
        line = f"joint {model.bodies[joint.body].name} kind={joint.kind}"
        if joint.axis is not None:
            line += f" axis={_fmt(joint.axis)}"
        if joint.range_lo is not None:
            line += f" range={_fmt((joint.range_lo, joint.range_hi))}"
        out.append(line + f" name={joint.name}")
    for site in model.sites:
        out.append(f"site {site.name} body={model.bodies[site.body].name} pos={_fmt(site.local_pos)}")
    for k, name in enumerate(model.scale_map.names):
        members = [model.bodies[b].name for b, row in enumerate(model.scale_map.assignment) if row[k]]
        out.append(f"scale {name} bodies={','.join(members)}")
    for c in model.constraints:
        out.append(f"constraint {c.dof_a} {c.dof_b} ratio={c.ratio!r} offset={c.offset!r}")
    return "\n".join(out) + "\n"


def load_model(path) -> SkeletonModel:
    with open(path, encoding="utf-8") as f:
        return parse_model(f.read())


def load_demo_model(name: str = "biped") -> SkeletonModel:
    """One of the model files shipped in ``kinefit/data``."""
    if name not in DEMO_MODELS:
        raise KeyError(f"unknown demo model '{name}', choose from {sorted(DEMO_MODELS)}")
    text = resources.files("kinefit").joinpath("data", DEMO_MODELS[name]).read_text(encoding="utf-8")
    return parse_model(text)
