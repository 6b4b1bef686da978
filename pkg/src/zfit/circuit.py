"""Circuit-description notation, parameter schema and impedance evaluation.

Grammar::

    series  := item ('-' item)*
    item    := element | '[' series (',' series)+ ']'
    element := ('R' | 'C' | 'L' | 'P') positive-integer

``P`` is a constant phase element with impedance ``1 / (Q (jw)^alpha)``.
"""

from __future__ import annotations

import enum
import itertools
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from .spectrum import Spectrum


class CircuitSyntaxError(ValueError):
    """Malformed circuit text. ``offset`` is the 0-based position of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at offset {offset}")


class ImpedanceEvaluationError(ArithmeticError):
    """Element or circuit impedance evaluated to a non-finite value."""


class ElementKind(enum.Enum):
    RESISTOR = "R"
    CAPACITOR = "C"
    INDUCTOR = "L"
    CPE = "P"

    @property
    def n_params(self) -> int:
        return 2 if self is ElementKind.CPE else 1


class Role(enum.Enum):
    VALUE = "value"
    CPE_MAGNITUDE = "cpe_magnitude"
    CPE_EXPONENT = "cpe_exponent"


class Scale(enum.Enum):
    LOG = "log-uniform"
    LINEAR = "uniform"


@dataclass(frozen=True)
class Element:
    kind: ElementKind
    index: int

    @property
    def label(self) -> str:
        return f"{self.kind.value}{self.index}"


@dataclass(frozen=True)
class Series:
    items: tuple

    def __post_init__(self):
        if len(self.items) < 1:
            raise ValueError("series node needs at least one item")


@dataclass(frozen=True)
class Parallel:
    branches: tuple

    def __post_init__(self):
        if len(self.branches) < 2:
            raise ValueError("parallel node needs at least two branches")


Node = Union[Element, Parallel]


@dataclass(frozen=True)
class ParamDescriptor:
    name: str
    label: str
    role: Role
    lower: float
    upper: float
    scale: Scale

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: lower bound must be below upper bound")
        if self.scale is Scale.LOG and self.lower <= 0:
            raise ValueError(f"{self.name}: log-scale bounds must be positive")
        if self.role is Role.CPE_EXPONENT and not (0 < self.lower and self.upper <= 1):
            raise ValueError(f"{self.name}: CPE exponent bounds must lie in (0, 1]")


# Default sampling ranges for battery / fuel-cell style spectra.
OHMIC_RANGE = (1.0, 10.0)
RESISTOR_RANGE = (10.0, 1e5)
CAPACITOR_RANGE = (1e-6, 1e-3)
INDUCTOR_RANGE = (1e-6, 1e-3)
CPE_Q_RANGE = (1e-6, 1e-3)
CPE_ALPHA_RANGE = (0.3, 1.0)


@dataclass(frozen=True)
class CircuitModel:
    """Parsed circuit. Structural equality compares the AST."""

    root: Series
    _labels: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        labels = [el.label for el in iter_elements(self.root)]
        if len(set(labels)) != len(labels):
            raise ValueError("element labels must be unique")
        object.__setattr__(self, "_labels", tuple(labels))

    @classmethod
    def parse(cls, text: str) -> "CircuitModel":
        return parse_circuit(text)

    @property
    def labels(self) -> tuple:
        return self._labels

    @cached_property
    def schema(self) -> tuple:
        return tuple(parameter_schema(self))

    @property
    def param_names(self) -> list:
        return [d.name for d in self.schema]

    @cached_property
    def _layout(self):
        # Map every leaf element to the offset of its first parameter.
        offsets = {}
        pos = 0
        for el in iter_elements(self.root):
            offsets[el] = pos
            pos += el.kind.n_params
        return offsets

    def __str__(self) -> str:
        return format_circuit(self)

    def evaluate(self, params, omega, jacobian: bool = False):
        """Complex impedance at angular frequencies ``omega``.

        ``params`` entries may be scalars or arrays broadcastable against
        ``omega`` (per-point parameter values). With ``jacobian=True`` also
        returns ``dZ/dparams`` with shape ``(n_params, len(omega))``.
        """
        omega = np.asarray(omega, dtype=float)
        if np.any(omega <= 0):
            raise ValueError("angular frequencies must be positive")
        if len(params) != len(self.schema):
            raise ValueError(f"expected {len(self.schema)} parameters, got {len(params)}")
        jw = 1j * omega
        log_jw = np.log(omega) + 0.5j * math.pi if jacobian else None
        with np.errstate(all="ignore"):
            z, dz = _eval_series(self.root, params, jw, log_jw, self._layout, len(params), jacobian)
        z = np.broadcast_to(z, omega.shape).astype(complex)
        if not np.all(np.isfinite(z)):
            raise ImpedanceEvaluationError("impedance is not finite")
        if jacobian:
            return z, dz
        return z

    def impedance(self, params, freqs) -> Spectrum:
        freqs = np.asarray(freqs, dtype=float)
        return Spectrum.from_complex(freqs, self.evaluate(params, 2 * np.pi * freqs))


def iter_elements(node):
    """Depth-first, left-to-right leaf traversal."""
    if isinstance(node, Element):
        yield node
    elif isinstance(node, Series):
        for item in node.items:
            yield from iter_elements(item)
    else:
        for branch in node.branches:
            yield from iter_elements(branch)


def _eval_series(node, params, jw, log_jw, layout, n_params, jac):
    z = 0.0
    dz = np.zeros((n_params, jw.size), dtype=complex) if jac else None
    for item in node.items:
        if isinstance(item, Element):
            zi = _eval_element(item, params, jw, log_jw, layout[item], dz)
        else:
            zi, dzi = _eval_parallel(item, params, jw, log_jw, layout, n_params, jac)
            if jac:
                dz += dzi
        z = z + zi
    return z, dz


def _eval_parallel(node, params, jw, log_jw, layout, n_params, jac):
    y = 0.0
    branch = []
    for br in node.branches:
        zb, dzb = _eval_series(br, params, jw, log_jw, layout, n_params, jac)
        y = y + 1.0 / zb
        branch.append((zb, dzb))
    z = 1.0 / y
    dz = None
    if jac:
        # d(1/sum 1/Zk) = Z^2 * sum(dZk / Zk^2)
        dz = np.zeros((n_params, jw.size), dtype=complex)
        for zb, dzb in branch:
            dz += dzb / zb**2
        dz *= z**2
    return z, dz


def _eval_element(el, params, jw, log_jw, pos, dz):
    kind = el.kind
    if kind is ElementKind.RESISTOR:
        r = params[pos]
        if dz is not None:
            dz[pos] += 1.0
        return r * np.ones_like(jw)
    if kind is ElementKind.CAPACITOR:
        c = params[pos]
        z = 1.0 / (jw * c)
        if dz is not None:
            dz[pos] += -z / c
        return z
    if kind is ElementKind.INDUCTOR:
        ind = params[pos]
        if dz is not None:
            dz[pos] += jw
        return jw * ind
    q, alpha = params[pos], params[pos + 1]
    z = 1.0 / (q * jw**alpha)
    if dz is not None:
        dz[pos] += -z / q
        dz[pos + 1] += -z * log_jw
    return z


def element_impedance(kind: ElementKind, params: Sequence[float], omega):
    """Impedance of a single element at angular frequency ``omega`` (rad/s)."""
    kind = ElementKind(kind)
    if len(params) != kind.n_params:
        raise ValueError(f"{kind.name} takes {kind.n_params} parameter(s)")
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise ValueError("omega must be positive")
    if any(np.any(np.asarray(p) <= 0) for p in params):
        raise ValueError("element parameters must be positive")
    jw = 1j * omega
    with np.errstate(all="ignore"):
        z = _eval_element(Element(kind, 1), params, jw, None, 0, None)
    if not np.all(np.isfinite(z)):
        raise ImpedanceEvaluationError(f"{kind.name} impedance is not finite")
    return complex(z) if np.ndim(z) == 0 else z


def impedance(model: CircuitModel, params, freqs) -> Spectrum:
    return model.impedance(params, freqs)


# --- parsing -----------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.seen = {}

    def peek(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self) -> Series:
        root = self.series()
        ch = self.peek()
        if ch == "]":
            raise CircuitSyntaxError("unbalanced bracket", self.pos)
        if ch:
            raise CircuitSyntaxError(f"unexpected character {ch!r}", self.pos)
        return root

    def series(self) -> Series:
        items = [self.item()]
        while self.peek() == "-":
            self.pos += 1
            items.append(self.item())
        return Series(tuple(items))

    def item(self):
        ch = self.peek()
        if ch == "[":
            return self.parallel()
        if ch in ("", ",", "]", "-"):
            raise CircuitSyntaxError("empty branch", self.pos)
        return self.element()

    def parallel(self) -> Parallel:
        open_at = self.pos
        self.pos += 1
        branches = [self.series()]
        while self.peek() == ",":
            self.pos += 1
            branches.append(self.series())
        ch = self.peek()
        if ch != "]":
            if ch == "":
                raise CircuitSyntaxError("unbalanced bracket", open_at)
            raise CircuitSyntaxError(f"unexpected character {ch!r}", self.pos)
        if len(branches) < 2:
            raise CircuitSyntaxError("parallel block needs at least two branches", open_at)
        self.pos += 1
        return Parallel(tuple(branches))

    def element(self) -> Element:
        start = self.pos
        letter = self.text[self.pos]
        try:
            kind = ElementKind(letter)
        except ValueError:
            raise CircuitSyntaxError(f"unknown element {letter!r}", start) from None
        self.pos += 1
        digits_at = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        digits = self.text[digits_at:self.pos]
        if not digits or int(digits) == 0:
            raise CircuitSyntaxError("element index must be a positive integer", digits_at)
        el = Element(kind, int(digits))
        if el.label in self.seen:
            raise CircuitSyntaxError(f"duplicate label {el.label}", start)
        self.seen[el.label] = start
        return el


def parse_circuit(text: str) -> CircuitModel:
    if not text or not text.strip():
        raise CircuitSyntaxError("empty circuit", 0)
    return CircuitModel(_Parser(text).parse())


def _format_node(node) -> str:
    if isinstance(node, Element):
        return node.label
    if isinstance(node, Series):
        return "-".join(_format_node(item) for item in node.items)
    return "[" + ",".join(_format_node(br) for br in node.branches) + "]"


def format_circuit(model: CircuitModel) -> str:
    return _format_node(model.root)


def _shape(node) -> str:
    return re.sub(r"\d+", "", _format_node(node))


def equivalent_permutations(model: CircuitModel) -> list:
    """Parameter index permutations that leave the impedance unchanged.

    Series items commute, so top-level items with the same shape (for
    example two ``[P,R]`` blocks) can trade values. Returns index arrays
    ``perm`` such that ``params[perm]`` describes the same impedance; the
    identity comes first.
    """
    layout = model._layout
    spans = []
    for item in model.root.items:
        els = list(iter_elements(item))
        start = layout[els[0]]
        spans.append(range(start, start + sum(e.kind.n_params for e in els)))
    groups = {}
    for k, item in enumerate(model.root.items):
        groups.setdefault(_shape(item), []).append(k)
    choices = [list(itertools.permutations(members)) for members in groups.values()]
    identity = np.arange(len(model.schema))
    out = []
    for combo in itertools.product(*choices):
        perm = identity.copy()
        for members, order in zip(groups.values(), combo):
            for dst, src in zip(members, order):
                perm[list(spans[dst])] = list(spans[src])
        out.append(perm)
    return out


# --- parameter schema --------------------------------------------------------


def _ohmic_resistor(model: CircuitModel):
    for item in model.root.items:
        if isinstance(item, Element) and item.kind is ElementKind.RESISTOR:
            return item
    return None


def parameter_schema(model: CircuitModel) -> list:
    """One descriptor per scalar parameter, in traversal order.

    The first resistor of the top-level series chain is the ohmic resistance
    and gets the narrow range.
    """
    ohmic = _ohmic_resistor(model)
    out = []
    for el in iter_elements(model.root):
        label = el.label
        if el.kind is ElementKind.RESISTOR:
            lo, hi = OHMIC_RANGE if el == ohmic else RESISTOR_RANGE
            out.append(ParamDescriptor(label, label, Role.VALUE, lo, hi, Scale.LOG))
        elif el.kind is ElementKind.CAPACITOR:
            out.append(ParamDescriptor(label, label, Role.VALUE, *CAPACITOR_RANGE, Scale.LOG))
        elif el.kind is ElementKind.INDUCTOR:
            out.append(ParamDescriptor(label, label, Role.VALUE, *INDUCTOR_RANGE, Scale.LOG))
        else:
            out.append(ParamDescriptor(f"{label}_w", label, Role.CPE_MAGNITUDE, *CPE_Q_RANGE, Scale.LOG))
            out.append(
                ParamDescriptor(f"{label}_n", label, Role.CPE_EXPONENT, *CPE_ALPHA_RANGE, Scale.LINEAR)
            )
    return out


def draw_parameters(schema: Sequence[ParamDescriptor], rng: np.random.Generator) -> np.ndarray:
    """One draw per descriptor: log-uniform or uniform within its bounds."""
    values = np.empty(len(schema))
    for i, d in enumerate(schema):
        if d.scale is Scale.LOG:
            values[i] = math.exp(rng.uniform(math.log(d.lower), math.log(d.upper)))
        else:
            values[i] = rng.uniform(d.lower, d.upper)
        values[i] = min(max(values[i], d.lower), d.upper)
    return values


def check_parameters(schema: Sequence[ParamDescriptor], params) -> None:
    if len(params) != len(schema):
        raise ValueError(f"expected {len(schema)} parameters, got {len(params)}")
    for d, v in zip(schema, params):
        if not d.lower <= v <= d.upper:
            raise ValueError(f"{d.name}={v!r} outside [{d.lower}, {d.upper}]")
