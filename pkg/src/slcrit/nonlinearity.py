"""Scalar nonlinearities f: parsing, exact (f, f', f'') jets, and classification.

The expression grammar (whitespace-insensitive)::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := unary ('^' nonneg-integer)?
    unary  := '-' unary | base
    base   := number | 'x' | func '(' expr ')' | '(' expr ')'
    func   := sin | cos | exp | tanh | log

Derivatives are obtained by second-order forward jet arithmetic, never by
symbolic manipulation or finite differences.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Jet2",
    "Nonlinearity",
    "TamenessReport",
    "ParseError",
    "EvalDomainError",
    "parse",
    "eval_jet2",
    "analyze",
    "critical_abscissa",
]

Scalar = Union[float, np.ndarray]


class ParseError(ValueError):
    """Syntax or lexical error, with the offending position in the source."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvalDomainError(ArithmeticError):
    """Evaluation left the domain (log of non-positive, division by zero)."""

    def __init__(self, message: str, node: "Node"):
        super().__init__(f"{message} in '{node.source()}'")
        self.node = node


# ---------------------------------------------------------------------------
# second-order forward jets


@dataclass(frozen=True)
class Jet2:
    """Value together with first and second derivative at a point."""

    value: Scalar
    d1: Scalar
    d2: Scalar

    @staticmethod
    def seed(x: Scalar) -> "Jet2":
        return Jet2(x, _ones_like(x), _zeros_like(x))

    @staticmethod
    def const(c: Scalar) -> "Jet2":
        return Jet2(c, _zeros_like(c), _zeros_like(c))

    def __add__(self, o: "Jet2") -> "Jet2":
        return Jet2(self.value + o.value, self.d1 + o.d1, self.d2 + o.d2)

    def __sub__(self, o: "Jet2") -> "Jet2":
        return Jet2(self.value - o.value, self.d1 - o.d1, self.d2 - o.d2)

    def __neg__(self) -> "Jet2":
        return Jet2(-self.value, -self.d1, -self.d2)

    def __mul__(self, o: "Jet2") -> "Jet2":
        return Jet2(
            self.value * o.value,
            self.d1 * o.value + self.value * o.d1,
            self.d2 * o.value + 2.0 * self.d1 * o.d1 + self.value * o.d2,
        )

    def __truediv__(self, o: "Jet2") -> "Jet2":
        w = 1.0 / o.value
        g1 = -o.d1 * w * w
        g2 = (2.0 * o.d1 * o.d1 * w - o.d2) * w * w
        return self * Jet2(w, g1, g2)

    def powi(self, k: int) -> "Jet2":
        if k == 0:
            return Jet2.const(_ones_like(self.value))
        if k == 1:
            return self
        v = self.value
        p2 = v ** (k - 2)
        p1 = p2 * v
        return self._chain(p1 * v, k * p1, k * (k - 1) * p2)

    def _chain(self, f0: Scalar, f1: Scalar, f2: Scalar) -> "Jet2":
        # f0, f1, f2 are the outer function and its derivatives at self.value
        return Jet2(f0, f1 * self.d1, f2 * self.d1 * self.d1 + f1 * self.d2)

    def sin(self) -> "Jet2":
        s, c = np.sin(self.value), np.cos(self.value)
        return self._chain(s, c, -s)

    def cos(self) -> "Jet2":
        s, c = np.sin(self.value), np.cos(self.value)
        return self._chain(c, -s, -c)

    def exp(self) -> "Jet2":
        e = np.exp(self.value)
        return self._chain(e, e, e)

    def tanh(self) -> "Jet2":
        th = np.tanh(self.value)
        sech2 = 1.0 - th * th
        return self._chain(th, sech2, -2.0 * th * sech2)

    def log(self) -> "Jet2":
        w = 1.0 / self.value
        return self._chain(np.log(self.value), w, -w * w)


def _ones_like(x: Scalar) -> Scalar:
    return np.ones_like(x) if isinstance(x, np.ndarray) else 1.0


def _zeros_like(x: Scalar) -> Scalar:
    return np.zeros_like(x) if isinstance(x, np.ndarray) else 0.0


# ---------------------------------------------------------------------------
# AST


class Node:
    def eval(self, x: Jet2) -> Jet2:
        raise NotImplementedError

    def source(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class Num(Node):
    value: float

    def eval(self, x: Jet2) -> Jet2:
        return Jet2.const(self.value if not isinstance(x.value, np.ndarray)
                          else np.full_like(x.value, self.value))

    def source(self) -> str:
        return repr(self.value)


@dataclass(frozen=True)
class Var(Node):
    def eval(self, x: Jet2) -> Jet2:
        return x

    def source(self) -> str:
        return "x"


@dataclass(frozen=True)
class Neg(Node):
    arg: Node

    def eval(self, x: Jet2) -> Jet2:
        return -self.arg.eval(x)

    def source(self) -> str:
        return f"(-{self.arg.source()})"


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node

    def eval(self, x: Jet2) -> Jet2:
        a = self.left.eval(x)
        b = self.right.eval(x)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if np.any(b.value == 0.0):
            raise EvalDomainError("division by zero", self)
        return a / b

    def source(self) -> str:
        return f"({self.left.source()} {self.op} {self.right.source()})"


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: int

    def eval(self, x: Jet2) -> Jet2:
        return self.base.eval(x).powi(self.exponent)

    def source(self) -> str:
        return f"({self.base.source()} ^ {self.exponent})"


@dataclass(frozen=True)
class Func(Node):
    name: str
    arg: Node

    def eval(self, x: Jet2) -> Jet2:
        a = self.arg.eval(x)
        if self.name == "log" and np.any(a.value <= 0.0):
            raise EvalDomainError("log of non-positive argument", self)
        return getattr(a, self.name)()

    def source(self) -> str:
        return f"{self.name}({self.arg.source()})"


FUNCTIONS = ("sin", "cos", "exp", "tanh", "log")


# ---------------------------------------------------------------------------
# tokenizer / recursive descent parser

_NUMBER = re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_IDENT = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")
# unicode aliases occasionally pasted from rendered math
_ALIASES = {"−": "-", "×": "*", "÷": "/"}


class _Tokens:
    def __init__(self, text: str):
        self.text = "".join(_ALIASES.get(c, c) for c in text)
        self.pos = 0

    def _skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self._skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def take_char(self) -> str:
        c = self.peek()
        self.pos += 1
        return c

    def take_number(self) -> float:
        self._skip_ws()
        m = _NUMBER.match(self.text, self.pos)
        if not m:
            raise ParseError("expected a number", self.pos)
        self.pos = m.end()
        return float(m.group())

    def take_ident(self) -> str:
        self._skip_ws()
        m = _IDENT.match(self.text, self.pos)
        if not m:
            raise ParseError("expected an identifier", self.pos)
        self.pos = m.end()
        return m.group()

    def take_integer(self) -> int:
        self._skip_ws()
        start = self.pos
        m = _NUMBER.match(self.text, self.pos)
        if not m:
            raise ParseError("expected a nonnegative integer exponent", start)
        value = float(m.group())
        if value != int(value) or "e" in m.group().lower() or "." in m.group():
            raise ParseError("non-integer exponent", start)
        self.pos = m.end()
        return int(value)


class _Parser:
    def __init__(self, text: str):
        self.toks = _Tokens(text)

    def parse(self) -> Node:
        node = self.expr()
        if self.toks.peek():
            raise ParseError(f"unexpected '{self.toks.peek()}'", self.toks.pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.toks.peek() in ("+", "-"):
            op = self.toks.take_char()
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.toks.peek() in ("*", "/"):
            op = self.toks.take_char()
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        node = self.unary()
        if self.toks.peek() == "^":
            self.toks.take_char()
            node = Pow(node, self.toks.take_integer())
        return node

    def unary(self) -> Node:
        if self.toks.peek() == "-":
            self.toks.take_char()
            return Neg(self.unary())
        return self.base()

    def base(self) -> Node:
        c = self.toks.peek()
        if c == "(":
            self.toks.take_char()
            node = self.expr()
            if self.toks.peek() != ")":
                raise ParseError("expected ')'", self.toks.pos)
            self.toks.take_char()
            return node
        if c.isdigit() or c == ".":
            return Num(self.toks.take_number())
        if c.isalpha() or c == "_":
            pos = self.toks.pos
            name = self.toks.take_ident()
            if name == "x":
                return Var()
            if name in FUNCTIONS:
                if self.toks.peek() != "(":
                    raise ParseError(f"expected '(' after '{name}'", self.toks.pos)
                self.toks.take_char()
                node = self.expr()
                if self.toks.peek() != ")":
                    raise ParseError("expected ')'", self.toks.pos)
                self.toks.take_char()
                return Func(name, node)
            raise ParseError(f"unknown identifier '{name}'", pos)
        raise ParseError("expected a number, 'x', function or '('", self.toks.pos)


# ---------------------------------------------------------------------------
# public surface


@dataclass(frozen=True)
class Nonlinearity:
    """A parsed nonlinearity; evaluation yields exact jets to second order."""

    ast: Node
    source: str

    def jet(self, x: float) -> Jet2:
        j = self.ast.eval(Jet2.seed(float(x)))
        out = Jet2(float(j.value), float(j.d1), float(j.d2))
        if not (np.isfinite(out.value) and np.isfinite(out.d1) and np.isfinite(out.d2)):
            raise EvalDomainError("non-finite jet", self.ast)
        return out

    def jets(self, xs: np.ndarray) -> Jet2:
        """Vectorized jet evaluation; components are arrays shaped like xs."""
        return self.ast.eval(Jet2.seed(np.asarray(xs, dtype=float)))

    def __call__(self, x: float) -> float:
        return self.jet(x).value

    def d1(self, x: float) -> float:
        return self.jet(x).d1

    def d2(self, x: float) -> float:
        return self.jet(x).d2

    def d1_array(self, xs: np.ndarray) -> np.ndarray:
        return np.asarray(self.jets(xs).d1, dtype=float)

    def d2_array(self, xs: np.ndarray) -> np.ndarray:
        return np.asarray(self.jets(xs).d2, dtype=float)

    def to_source(self) -> str:
        return self.ast.source()


def parse(text: str) -> Nonlinearity:
    return Nonlinearity(_Parser(text).parse(), text)


def eval_jet2(f: Nonlinearity, x: float) -> Jet2:
    return f.jet(x)


# ---------------------------------------------------------------------------
# classification

SCAN_POINTS = 10_000
_INTERIOR_EPS = 1e-6
_ROOT_TOL = 1e-10
_FLAT_TOL = 1e-12


@dataclass
class TamenessReport:
    sigma: list
    abscissas: dict  # m -> list of (x, f''(x))
    appropriate: bool
    tame: bool
    scan_window: tuple
    appropriate_reason: str = ""
    tame_reason: str = ""

    def to_dict(self) -> dict:
        return {
            "sigma": list(self.sigma),
            "abscissas": {
                str(m): [{"x": x, "f2": f2} for x, f2 in roots]
                for m, roots in self.abscissas.items()
            },
            "appropriate": self.appropriate,
            "tame": self.tame,
            "scan_window": list(self.scan_window),
            "appropriate_reason": self.appropriate_reason,
            "tame_reason": self.tame_reason,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _sign_change(y: np.ndarray) -> bool:
    if np.any(y[:-1] * y[1:] < 0.0):
        return True
    return bool(np.any(y == 0.0) and np.any(y > 0.0) and np.any(y < 0.0))


def _bisect_root(f: Nonlinearity, target: float, a: float, b: float) -> float:
    # root of f'(x) + target on [a, b] with a sign change; Newton-polished
    ga = f.d1(a) + target
    for _ in range(200):
        mid = 0.5 * (a + b)
        if mid == a or mid == b:
            break
        gm = f.d1(mid) + target
        if gm == 0.0:
            a = b = mid
            break
        if (ga < 0.0) == (gm < 0.0):
            a, ga = mid, gm
        else:
            b = mid
    x = 0.5 * (a + b)
    for _ in range(3):
        j = f.jet(x)
        g = j.d1 + target
        if j.d2 != 0.0 and abs(g / j.d2) < 1.0:
            x = x - g / j.d2
    return x


def _roots_of_fprime_plus(f: Nonlinearity, msq: float, xs: np.ndarray,
                          f1: np.ndarray) -> list:
    g = f1 + msq
    idx = np.nonzero(g[:-1] * g[1:] < 0.0)[0]
    roots = []
    for i in idx:
        x = _bisect_root(f, msq, xs[i], xs[i + 1])
        if abs(f.d1(x) + msq) < _ROOT_TOL:
            if not roots or abs(x - roots[-1]) > 1e-9 * (xs[-1] - xs[0]):
                roots.append(x)
    exact = np.nonzero(g == 0.0)[0]
    for i in exact:
        x = float(xs[i])
        if not any(abs(x - r) <= 1e-9 * (xs[-1] - xs[0]) for r in roots):
            roots.append(x)
    return sorted(roots)


def analyze(f: Nonlinearity, x_lo: float, x_hi: float, m_max: int) -> TamenessReport:
    """Scan [x_lo, x_hi] and classify f (sigma, critical abscissas, tameness).

    The interior-of-image test for -m^2 requires a bracketed sign change of
    both f'(x) + m^2 - eps and f'(x) + m^2 + eps, eps = 1e-6.  Roots are
    located by bisection on the scan's sign changes.  Isolated-roots of f''
    is checked only at scan resolution: a run of >= 3 consecutive scan points
    with |f''| < 1e-12 is taken as a non-isolated root.
    """
    if not x_lo < x_hi:
        raise ValueError(f"empty scan window [{x_lo}, {x_hi}]")
    if m_max < 1:
        raise ValueError(f"m_max must be >= 1, got {m_max}")

    xs = np.linspace(x_lo, x_hi, SCAN_POINTS)
    jets = f.jets(xs)
    f1 = np.asarray(jets.d1, dtype=float)
    f2 = np.asarray(jets.d2, dtype=float)
    if not (np.all(np.isfinite(f1)) and np.all(np.isfinite(f2))):
        raise ValueError("f' or f'' non-finite on the scan window")

    sigma = []
    abscissas = {}
    for m in range(1, m_max + 1):
        msq = float(m * m)
        interior = (_sign_change(f1 + (msq - _INTERIOR_EPS))
                    and _sign_change(f1 + (msq + _INTERIOR_EPS)))
        if interior:
            sigma.append(m)
            roots = _roots_of_fprime_plus(f, msq, xs, f1)
            abscissas[m] = [(x, f.d2(x)) for x in roots]

    # appropriateness, per the two-condition fallback when f''(0) = 0
    try:
        j0 = f.jet(0.0)
    except EvalDomainError as e:
        return TamenessReport(sigma, abscissas, False, False, (x_lo, x_hi),
                              appropriate_reason=f"f not defined at 0 ({e})",
                              tame_reason="not appropriate")
    if abs(j0.d2) > _FLAT_TOL:
        appropriate, why = True, "f''(0) != 0"
    else:
        reasons = []
        small = np.abs(f2) < _FLAT_TOL
        run = 0
        flat_run = False
        for flag in small:
            run = run + 1 if flag else 0
            if run >= 3:
                flat_run = True
                break
        if flat_run:
            reasons.append("f'' vanishes on a scan interval (roots not isolated)")
        s0 = j0.d1
        if s0 <= _FLAT_TOL:
            m0 = round(np.sqrt(max(-s0, 0.0)))
            if abs(s0 + m0 * m0) < 1e-9:
                reasons.append(f"f'(0) = -{m0}^2")
        appropriate = not reasons
        why = "; ".join(reasons) if reasons else \
            "f'' roots isolated at scan resolution and f'(0) is not -m^2"

    tame = appropriate
    tame_why = "no critical abscissa violates f'' != 0" if appropriate else "not appropriate"
    if appropriate:
        for m in range(0, m_max + 1):
            for x in _roots_of_fprime_plus(f, float(m * m), xs, f1):
                if abs(f.d2(x)) <= 1e-10:
                    tame = False
                    tame_why = f"f''({x:.6g}) = 0 while f'({x:.6g}) = -{m}^2"
                    break
            if not tame:
                break

    return TamenessReport(sigma, abscissas, appropriate, tame, (x_lo, x_hi),
                          appropriate_reason=why, tame_reason=tame_why)


def critical_abscissa(f: Nonlinearity, m: int, report: TamenessReport) -> float:
    """Deterministic choice of x_m with f'(x_m) = -m^2 and f''(x_m) != 0.

    Smallest |x| wins; among ties the largest |f''|; remaining ties resolve
    toward the smaller x.
    """
    if m not in report.sigma or m not in report.abscissas:
        raise ValueError(f"m = {m} is not in sigma for this window")
    usable = [(x, f2) for x, f2 in report.abscissas[m] if abs(f2) > 1e-10]
    if not usable:
        raise ValueError(f"all abscissas for m = {m} violate tameness (f'' = 0)")
    usable.sort(key=lambda xf: (round(abs(xf[0]), 9), -round(abs(xf[1]), 9), xf[0]))
    x = usable[0][0]
    msq = float(m * m)
    for _ in range(4):
        j = f.jet(x)
        if j.d2 != 0.0:
            x = x - (j.d1 + msq) / j.d2
    if abs(f.d1(x) + msq) >= _ROOT_TOL:
        raise ValueError(f"abscissa refinement failed for m = {m}")
    return x
