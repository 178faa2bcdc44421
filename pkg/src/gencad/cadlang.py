"""CAD command language: vocabulary, 17-integer command rows, quantization,
grammar validation and canonical serialization.

A program is a flat list of commands. Sketch loops open with ``SOL`` and are
followed by curves (``Line``/``Arc``) or a single ``Circle``; an ``Extrude``
consumes every loop since the previous extrusion. ``EOS`` terminates the
program and pads the encoded matrix.
"""
from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CommandType", "ParamLayout", "CadCommand", "CadSequence", "Violation",
    "ValidationReport", "CadFormatError", "layout_of", "quantize", "dequantize",
    "encode_sequence", "decode_sequence", "validate", "to_json", "from_json",
    "write_matrix", "read_matrix", "SLOT_NAMES", "SLOT_RANGES", "N_SLOTS",
    "N_LEVELS", "MASK", "MASK_LEVEL", "DEFAULT_N", "CLOSE_TOL",
]

N_SLOTS = 16
N_LEVELS = 256
MASK_LEVEL = 255
DEFAULT_N = 60
MASK = float("-inf")
DEGENERATE_TOL = 1e-6


class CadFormatError(ValueError):
    """Malformed matrix rows, JSON documents or binary sidecars."""


class CommandType(enum.IntEnum):
    SOL = 0
    Line = 1
    Arc = 2
    Circle = 3
    Extrude = 4
    EOS = 5


SLOT_NAMES = ("x", "y", "alpha", "f", "r", "theta", "phi", "gamma",
              "px", "py", "pz", "s", "e1", "e2", "b", "u")
SLOT_INDEX = {n: i for i, n in enumerate(SLOT_NAMES)}

# One table so a different normalization can be dropped in. Discrete slots
# carry None for the range and a category count instead.
SLOT_RANGES = (
    (-1.0, 1.0), (-1.0, 1.0), (0.0, 2 * math.pi), None, (0.0, 1.0),
    (0.0, math.pi), (-math.pi, math.pi), (-math.pi, math.pi),
    (-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0), (0.0, 2.0),
    (-1.0, 1.0), (-1.0, 1.0), None, None,
)
SLOT_CARDINALITY = {3: 2, 14: 4, 15: 2}

# Two quantization steps of the sketch coordinate range.
CLOSE_TOL = 2 * (SLOT_RANGES[0][1] - SLOT_RANGES[0][0]) / 255

_ACTIVE = {
    CommandType.SOL: (),
    CommandType.Line: (0, 1),
    CommandType.Arc: (0, 1, 2, 3),
    CommandType.Circle: (0, 1, 4),
    CommandType.Extrude: tuple(range(5, 16)),
    CommandType.EOS: (),
}

ARC_CW, ARC_CCW = 0, 1
NEW, JOIN, CUT, INTERSECT = 0, 1, 2, 3
ONE_SIDED, TWO_SIDED = 0, 1
BOOLEAN_NAMES = ("new", "join", "cut", "intersect")


@dataclass(frozen=True)
class ParamLayout:
    active_slots: tuple
    slot_kind: tuple
    slot_range: tuple
    slot_cardinality: dict

    @property
    def mask(self):
        m = np.zeros(N_SLOTS, dtype=bool)
        m[list(self.active_slots)] = True
        return m

    @property
    def symbols(self):
        return tuple(SLOT_NAMES[i] for i in self.active_slots)


_KINDS = tuple("discrete" if i in SLOT_CARDINALITY else "continuous" for i in range(N_SLOTS))
_LAYOUTS = {
    t: ParamLayout(_ACTIVE[t], _KINDS, SLOT_RANGES, dict(SLOT_CARDINALITY))
    for t in CommandType
}


def layout_of(t):
    """Static slot layout of a command type."""
    return _LAYOUTS[CommandType(t)]


def _round_half_away(x):
    return math.floor(x + 0.5) if x >= 0 else -math.floor(-x + 0.5)


def quantize(v, lo, hi):
    """Map ``v`` in ``[lo, hi]`` to an 8-bit level. Out-of-range values clamp."""
    if not hi > lo:
        raise ValueError("empty parameter range")
    v = min(max(float(v), lo), hi)
    return int(_round_half_away((v - lo) / (hi - lo) * 255))


def dequantize(level, lo, hi):
    if not hi > lo:
        raise ValueError("empty parameter range")
    level = int(level)
    if not 0 <= level <= 255:
        raise ValueError(f"level {level} outside 0..255")
    return lo + level / 255 * (hi - lo)


def snap(v, slot):
    """Nearest value representable on the quantization grid of ``slot``."""
    lo, hi = SLOT_RANGES[slot]
    return dequantize(quantize(v, lo, hi), lo, hi)


@dataclass(frozen=True)
class CadCommand:
    type: CommandType
    params: tuple = field(default=(MASK,) * N_SLOTS)

    def __post_init__(self):
        t = CommandType(self.type)
        object.__setattr__(self, "type", t)
        params = tuple(float(p) for p in self.params)
        if len(params) != N_SLOTS:
            raise ValueError(f"expected {N_SLOTS} parameter slots, got {len(params)}")
        active = _ACTIVE[t]
        for i, p in enumerate(params):
            name = SLOT_NAMES[i]
            if i not in active:
                if p != MASK:
                    raise ValueError(f"{t.name}: slot {name} is masked for this command")
                continue
            if i in SLOT_CARDINALITY:
                if p != int(p) or not 0 <= p < SLOT_CARDINALITY[i]:
                    raise ValueError(f"{t.name}: invalid discrete code {p!r} for {name}")
            else:
                lo, hi = SLOT_RANGES[i]
                if not (lo <= p <= hi):
                    raise ValueError(f"{t.name}: {name}={p!r} outside [{lo}, {hi}]")
        object.__setattr__(self, "params", params)

    @classmethod
    def make(cls, t, **values):
        t = CommandType(t)
        params = [MASK] * N_SLOTS
        active = _ACTIVE[t]
        missing = [SLOT_NAMES[i] for i in active if SLOT_NAMES[i] not in values]
        if missing:
            raise ValueError(f"{t.name}: missing parameters {missing}")
        for name, v in values.items():
            i = SLOT_INDEX.get(name)
            if i is None or i not in active:
                raise ValueError(f"{t.name} has no parameter {name!r}")
            params[i] = v
        return cls(t, tuple(params))

    @classmethod
    def sol(cls):
        return cls(CommandType.SOL)

    @classmethod
    def eos(cls):
        return cls(CommandType.EOS)

    @classmethod
    def line(cls, x, y):
        return cls.make(CommandType.Line, x=x, y=y)

    @classmethod
    def arc(cls, x, y, alpha, f=ARC_CCW):
        return cls.make(CommandType.Arc, x=x, y=y, alpha=alpha, f=f)

    @classmethod
    def circle(cls, x, y, r):
        return cls.make(CommandType.Circle, x=x, y=y, r=r)

    @classmethod
    def extrude(cls, e1, e2=0.0, *, theta=0.0, phi=0.0, gamma=0.0, origin=(0.0, 0.0, 0.0),
                s=1.0, op=NEW, two_sided=False):
        return cls.make(CommandType.Extrude, theta=theta, phi=phi, gamma=gamma,
                        px=origin[0], py=origin[1], pz=origin[2], s=s, e1=e1, e2=e2,
                        b=op, u=TWO_SIDED if two_sided else ONE_SIDED)

    def __getitem__(self, name):
        return self.params[SLOT_INDEX[name]]

    def named_params(self):
        return {SLOT_NAMES[i]: self.params[i] for i in _ACTIVE[self.type]}

    def replace(self, **values):
        params = list(self.params)
        for name, v in values.items():
            params[SLOT_INDEX[name]] = v
        return CadCommand(self.type, tuple(params))

    def __repr__(self):
        inner = ", ".join(f"{k}={v:.4g}" for k, v in self.named_params().items())
        return f"{self.type.name}({inner})"


@dataclass(frozen=True)
class CadSequence:
    """Program without the terminating EOS; encoding appends EOS padding."""

    commands: tuple = ()
    padded_len: int = DEFAULT_N

    def __post_init__(self):
        object.__setattr__(self, "commands", tuple(self.commands))
        if self.padded_len < 1:
            raise ValueError("padded_len must be positive")

    def __len__(self):
        return len(self.commands)

    def __iter__(self):
        return iter(self.commands)

    def __getitem__(self, i):
        return self.commands[i]

    def with_padded_len(self, n):
        return CadSequence(self.commands, n)


# ---------------------------------------------------------------- matrix form

def encode_command(cmd):
    row = np.full(1 + N_SLOTS, MASK_LEVEL, dtype=np.int64)
    row[0] = int(cmd.type)
    for i in _ACTIVE[cmd.type]:
        if i in SLOT_CARDINALITY:
            row[1 + i] = int(cmd.params[i])
        else:
            row[1 + i] = quantize(cmd.params[i], *SLOT_RANGES[i])
    return row


def encode_sequence(seq, n=None):
    """Quantize a program into an ``n x 17`` integer matrix padded with EOS rows."""
    n = seq.padded_len if n is None else n
    if len(seq.commands) > n:
        raise CadFormatError(f"sequence overflow: {len(seq.commands)} commands > padded length {n}")
    mat = np.full((n, 1 + N_SLOTS), MASK_LEVEL, dtype=np.int64)
    mat[:, 0] = int(CommandType.EOS)
    for i, cmd in enumerate(seq.commands):
        mat[i] = encode_command(cmd)
    return mat


def decode_row(row):
    code = int(row[0])
    if not 0 <= code <= 5:
        raise CadFormatError(f"invalid token {code}")
    t = CommandType(code)
    params = [MASK] * N_SLOTS
    for i in _ACTIVE[t]:
        level = int(row[1 + i])
        if i in SLOT_CARDINALITY:
            if not 0 <= level < SLOT_CARDINALITY[i]:
                raise CadFormatError(f"invalid discrete code {level} for {SLOT_NAMES[i]}")
            params[i] = float(level)
        else:
            if not 0 <= level <= 255:
                raise CadFormatError(f"level {level} outside 0..255 for {SLOT_NAMES[i]}")
            params[i] = dequantize(level, *SLOT_RANGES[i])
    return CadCommand(t, tuple(params))


def decode_sequence(mat, padded_len=None):
    """Inverse of :func:`encode_sequence`; stops at the first EOS row."""
    mat = np.asarray(mat)
    if mat.ndim != 2 or mat.shape[1] != 1 + N_SLOTS:
        raise CadFormatError(f"expected an N x {1 + N_SLOTS} matrix, got shape {mat.shape}")
    cmds = []
    for row in mat:
        cmd = decode_row(row)
        if cmd.type == CommandType.EOS:
            break
        cmds.append(cmd)
    return CadSequence(tuple(cmds), padded_len or mat.shape[0])


def active_mask(mat):
    """Boolean ``(..., 16)`` mask of the slots active for each row's type."""
    mat = np.asarray(mat)
    table = np.stack([_LAYOUTS[t].mask for t in CommandType])
    codes = np.clip(mat[..., 0], 0, 5)
    return table[codes]


_MATRIX_MAGIC = b"GCSQ1"


def write_matrix(path, mats):
    """Write matrices to the GCSQ1 sidecar.

    Layout (little-endian): magic ``GCSQ1``, u32 count, u32 rows, u32 cols,
    then ``count*rows*cols`` u8 values, row-major.
    """
    mats = np.asarray(mats)
    if mats.ndim == 2:
        mats = mats[None]
    if mats.min(initial=0) < 0 or mats.max(initial=0) > 255:
        raise CadFormatError("matrix values must fit in u8")
    count, rows, cols = mats.shape
    with open(path, "wb") as fh:
        fh.write(_MATRIX_MAGIC + struct.pack("<III", count, rows, cols))
        fh.write(mats.astype("<u1").tobytes(order="C"))


def read_matrix(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != _MATRIX_MAGIC:
        raise CadFormatError(f"{path}: bad magic")
    if len(blob) < 17:
        raise CadFormatError(f"{path}: truncated header")
    count, rows, cols = struct.unpack("<III", blob[5:17])
    payload = blob[17:]
    if len(payload) != count * rows * cols:
        raise CadFormatError(f"{path}: payload has {len(payload)} bytes, expected {count * rows * cols}")
    return np.frombuffer(payload, dtype="<u1").reshape(count, rows, cols).astype(np.int64)


# ------------------------------------------------------------------ grammar

@dataclass(frozen=True)
class Violation:
    position: int
    rule: str
    message: str = ""

    def __str__(self):
        return f"[{self.position}] {self.rule}: {self.message}"


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok

    @property
    def rules(self):
        return [v.rule for v in self.violations]

    def add(self, pos, rule, msg=""):
        self.violations.append(Violation(pos, rule, msg))


def arc_is_degenerate(start, end, alpha):
    chord = math.hypot(end[0] - start[0], end[1] - start[1])
    return chord < DEGENERATE_TOL or math.sin(alpha / 2) < DEGENERATE_TOL


def slab_interval(e1, e2, two_sided):
    """Extrusion extent along the plane normal as ``(lo, hi)``."""
    if two_sided:
        return -e2, e1
    return min(0.0, e1), max(0.0, e1)


def validate(seq):
    """Check a program against the grammar and the kernel's degeneracy rules.

    ``program := (loop+ Extrude)+ EOS``, ``loop := SOL (Circle | curve+)``.
    Curve loops start at the sketch origin and must return to it within
    :data:`CLOSE_TOL`.
    """
    report = ValidationReport()
    cmds = list(seq.commands if isinstance(seq, CadSequence) else seq)
    if isinstance(seq, CadSequence) and len(cmds) > seq.padded_len:
        report.add(len(cmds), "sequence overflow", f"{len(cmds)} > {seq.padded_len}")

    eos_at = next((i for i, c in enumerate(cmds) if c.type == CommandType.EOS), None)
    if eos_at is not None:
        for j in range(eos_at + 1, len(cmds)):
            if cmds[j].type != CommandType.EOS:
                report.add(j, "content after EOS", f"{cmds[j].type.name} follows EOS")
                break
        cmds = cmds[:eos_at]

    if not cmds:
        report.add(0, "empty program", "no extrusion")
        return report

    loops_pending = 0
    have_body = False
    loop_kind = None  # None | "curve" | "circle"
    loop_start = 0
    pos = (0.0, 0.0)

    def close_loop(i):
        nonlocal loop_kind
        if loop_kind is None:
            report.add(i, "empty loop", "SOL without curves")
        elif loop_kind == "curve" and math.hypot(*pos) > CLOSE_TOL:
            report.add(loop_start, "open loop",
                       f"loop ends at ({pos[0]:.4f}, {pos[1]:.4f}), not at its start")
        loop_kind = None

    in_loop = False
    for i, c in enumerate(cmds):
        t = c.type
        if t == CommandType.SOL:
            if in_loop:
                close_loop(i)
            in_loop, loop_start, loop_kind, pos = True, i, None, (0.0, 0.0)
            loops_pending += 1
        elif t in (CommandType.Line, CommandType.Arc):
            if not in_loop:
                report.add(i, "curve outside loop", f"{t.name} without SOL")
                continue
            if loop_kind == "circle":
                report.add(i, "mixed loop", "curve after Circle in one loop")
                continue
            loop_kind = "curve"
            end = (c["x"], c["y"])
            if math.hypot(end[0] - pos[0], end[1] - pos[1]) < DEGENERATE_TOL:
                report.add(i, "degenerate segment", "zero-length curve")
            elif t == CommandType.Arc and arc_is_degenerate(pos, end, c["alpha"]):
                report.add(i, "degenerate arc", f"sweep {c['alpha']:.4g}")
            pos = end
        elif t == CommandType.Circle:
            if not in_loop:
                report.add(i, "curve outside loop", "Circle without SOL")
                continue
            if loop_kind is not None:
                report.add(i, "mixed loop", "Circle must be the only command of its loop")
                continue
            loop_kind = "circle"
            if c["r"] < DEGENERATE_TOL:
                report.add(i, "degenerate circle", "zero radius")
        elif t == CommandType.Extrude:
            if in_loop:
                close_loop(i)
                in_loop = False
            if loops_pending == 0:
                report.add(i, "extrude without profile", "no loop precedes this Extrude")
            loops_pending = 0
            lo, hi = slab_interval(c["e1"], c["e2"], c["u"] == TWO_SIDED)
            if hi - lo <= DEGENERATE_TOL:
                report.add(i, "degenerate extrude", f"slab [{lo:.4g}, {hi:.4g}]")
            if c["s"] <= DEGENERATE_TOL:
                report.add(i, "non-positive scale", "sketch scale must be > 0")
            if not have_body and c["b"] != NEW:
                report.add(i, "boolean before body",
                           f"first Extrude must be 'new', got '{BOOLEAN_NAMES[int(c['b'])]}'")
            have_body = True
    if in_loop:
        close_loop(len(cmds))
    if loops_pending:
        report.add(len(cmds), "missing extrude", "trailing loops are never extruded")
    return report


# --------------------------------------------------------------------- JSON

def _fmt(v):
    r = format(v, ".17g")
    if all(ch not in r for ch in ".eninf"):
        r += ".0"
    return r


def to_json(seq):
    """Canonical text: one command per line, floats at 17 significant digits."""
    lines = []
    for c in seq.commands:
        items = []
        for i in _ACTIVE[c.type]:
            v = c.params[i]
            val = str(int(v)) if i in SLOT_CARDINALITY else _fmt(v)
            items.append(f'"{SLOT_NAMES[i]}": {val}')
        lines.append('    {"type": "%s", "params": {%s}}' % (c.type.name, ", ".join(items)))
    body = ",\n".join(lines)
    body = "\n" + body + "\n  " if lines else ""
    return '{\n  "padded_len": %d,\n  "commands": [%s]\n}\n' % (seq.padded_len, body)


def from_json(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CadFormatError(f"$: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise CadFormatError("$: expected an object")
    if "commands" not in doc:
        raise CadFormatError("$.commands: missing field")
    raw = doc["commands"]
    if not isinstance(raw, list):
        raise CadFormatError("$.commands: expected an array")
    n = doc.get("padded_len", DEFAULT_N)
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise CadFormatError("$.padded_len: expected a positive integer")
    names = {t.name: t for t in CommandType}
    cmds = []
    for k, item in enumerate(raw):
        path = f"$.commands[{k}]"
        if not isinstance(item, dict):
            raise CadFormatError(f"{path}: expected an object")
        if "type" not in item:
            raise CadFormatError(f"{path}.type: missing field")
        t = names.get(item["type"])
        if t is None:
            raise CadFormatError(f"{path}.type: unknown command {item['type']!r}")
        params = item.get("params", {})
        if not isinstance(params, dict):
            raise CadFormatError(f"{path}.params: expected an object")
        for name, v in params.items():
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise CadFormatError(f"{path}.params.{name}: expected a number")
        try:
            cmds.append(CadCommand.make(t, **params))
        except ValueError as exc:
            raise CadFormatError(f"{path}.params: {exc}") from None
    return CadSequence(tuple(cmds), n)


def load_sequence(path):
    with open(path) as fh:
        return from_json(fh.read())


def save_sequence(seq, path):
    with open(path, "w") as fh:
        fh.write(to_json(seq))


def sketch_loops(seq):
    """Split a program into ``[(loops, extrude_cmd), ...]``; each loop a list of curves."""
    groups, loops, cur = [], [], None
    for c in seq.commands:
        if c.type == CommandType.SOL:
            cur = []
            loops.append(cur)
        elif c.type in (CommandType.Line, CommandType.Arc, CommandType.Circle):
            if cur is None:
                raise ValueError("curve outside loop")
            cur.append(c)
        elif c.type == CommandType.Extrude:
            groups.append((loops, c))
            loops, cur = [], None
        elif c.type == CommandType.EOS:
            break
    return groups
