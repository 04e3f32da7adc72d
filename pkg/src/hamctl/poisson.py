"""Exact Poisson-bracket algebra on sums of ``c * q^a * p^b * trig(k.q)``.

Coefficients are kept as :class:`fractions.Fraction` so that canonical forms
compare exactly. Each term carries at most one trigonometric factor; products
of trig factors are expanded with the product-to-sum formulas.

Sign convention::

    {f, g} = sum_j  df/dp_j * dg/dq_j  -  df/dq_j * dg/dp_j

so that the Hamiltonian vector field of ``H`` is ``(dH/dp, -dH/dq)`` and
``{H, g}`` is the derivative of ``g`` along the flow of ``H``. With this
convention ``{p^2/2, q} = p``.
"""

from __future__ import annotations

import math
import re
from fractions import Fraction
from functools import cached_property
from numbers import Number
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError

COS = "cos"
SIN = "sin"

# key: (qexp, pexp, trig) with trig None or (kind, k)
Key = Tuple[Tuple[int, ...], Tuple[int, ...], Optional[Tuple[str, Tuple[int, ...]]]]


def _to_fraction(c) -> Fraction:
    if isinstance(c, Fraction):
        return c
    if isinstance(c, (int, np.integer)):
        return Fraction(int(c))
    if isinstance(c, (float, np.floating)):
        if not math.isfinite(c):
            raise InputError("coefficients must be finite")
        return Fraction(float(c))
    if isinstance(c, str):
        return Fraction(c)
    raise InputError(f"unsupported coefficient {c!r}")


def _normalize_trig(kind: str, k: Tuple[int, ...]):
    """Return (sign, trig) with the frequency's first nonzero entry positive.

    ``cos(0) = 1`` becomes ``trig=None`` and ``sin(0) = 0`` becomes sign 0.
    """
    nz = [x for x in k if x != 0]
    if not nz:
        return (1, None) if kind == COS else (0, None)
    if nz[0] < 0:
        k = tuple(-x for x in k)
        return (1, (COS, k)) if kind == COS else (-1, (SIN, k))
    return 1, (kind, tuple(k))


def _trig_product(a, b):
    """Product of two trig factors as a list of (coeff, trig)."""
    if a is None:
        return [(Fraction(1), b)]
    if b is None:
        return [(Fraction(1), a)]
    (ka, fa), (kb, fb) = a, b
    plus = tuple(x + y for x, y in zip(fa, fb))
    minus = tuple(x - y for x, y in zip(fa, fb))
    half = Fraction(1, 2)
    if ka == COS and kb == COS:
        raw = [(half, COS, minus), (half, COS, plus)]
    elif ka == SIN and kb == SIN:
        raw = [(half, COS, minus), (-half, COS, plus)]
    elif ka == SIN and kb == COS:
        raw = [(half, SIN, plus), (half, SIN, minus)]
    else:
        raw = [(half, SIN, plus), (-half, SIN, minus)]
    out = []
    for c, kind, k in raw:
        s, trig = _normalize_trig(kind, k)
        if s:
            out.append((c * s, trig))
    return out


class HamExpr:
    """Immutable canonical sum of terms ``c q^alpha p^beta trig(k.q)``."""

    __slots__ = ("d", "terms", "__dict__")

    def __init__(self, d: int, terms: Optional[Dict[Key, Fraction]] = None):
        if int(d) < 1:
            raise InputError("d must be positive")
        self.d = int(d)
        merged: Dict[Key, Fraction] = {}
        for key, c in (terms or {}).items():
            c = _to_fraction(c)
            if c == 0:
                continue
            qe, pe, trig = key
            if len(qe) != self.d or len(pe) != self.d:
                raise InputError("multi-index length does not match d")
            if trig is not None:
                s, trig = _normalize_trig(trig[0], tuple(trig[1]))
                if s == 0:
                    continue
                c = c * s
            k2 = (tuple(qe), tuple(pe), trig)
            merged[k2] = merged.get(k2, Fraction(0)) + c
        self.terms = {k: v for k, v in sorted(merged.items(), key=_sort_key) if v != 0}

    # -- constructors --------------------------------------------------------
    @classmethod
    def zero(cls, d: int) -> "HamExpr":
        return cls(d)

    @classmethod
    def const(cls, d: int, c) -> "HamExpr":
        z = (0,) * d
        return cls(d, {(z, z, None): c})

    @classmethod
    def monomial(cls, d: int, qexp: Sequence[int] = None, pexp: Sequence[int] = None,
                 coeff=1, trig=None) -> "HamExpr":
        z = (0,) * d
        qexp = tuple(qexp) if qexp is not None else z
        pexp = tuple(pexp) if pexp is not None else z
        if any(e < 0 for e in qexp + pexp):
            raise InputError("exponents must be nonnegative")
        return cls(d, {(qexp, pexp, trig): coeff})

    @classmethod
    def q(cls, d: int, j: int) -> "HamExpr":
        e = [0] * d
        e[j] = 1
        return cls.monomial(d, qexp=e)

    @classmethod
    def p(cls, d: int, j: int) -> "HamExpr":
        e = [0] * d
        e[j] = 1
        return cls.monomial(d, pexp=e)

    @classmethod
    def cos(cls, k: Sequence[int], coeff=1) -> "HamExpr":
        k = tuple(int(x) for x in k)
        return cls.monomial(len(k), coeff=coeff, trig=(COS, k))

    @classmethod
    def sin(cls, k: Sequence[int], coeff=1) -> "HamExpr":
        k = tuple(int(x) for x in k)
        return cls.monomial(len(k), coeff=coeff, trig=(SIN, k))

    @classmethod
    def kinetic(cls, d: int) -> "HamExpr":
        """|p|^2 / 2."""
        out = cls.zero(d)
        for j in range(d):
            e = [0] * d
            e[j] = 2
            out = out + cls.monomial(d, pexp=e, coeff=Fraction(1, 2))
        return out

    @classmethod
    def parse(cls, text: str, d: Optional[int] = None) -> "HamExpr":
        return _Parser(text, d).parse()

    # -- algebra -------------------------------------------------------------
    def _check(self, other: "HamExpr"):
        if not isinstance(other, HamExpr):
            raise InputError("expected a HamExpr")
        if other.d != self.d:
            raise InputError(f"dimension mismatch: {self.d} vs {other.d}")

    def _lift(self, other) -> "HamExpr":
        if isinstance(other, Number) or isinstance(other, Fraction):
            return HamExpr.const(self.d, other)
        self._check(other)
        return other

    def __add__(self, other) -> "HamExpr":
        other = self._lift(other)
        out = dict(self.terms)
        for k, c in other.terms.items():
            out[k] = out.get(k, Fraction(0)) + c
        return HamExpr(self.d, out)

    __radd__ = __add__

    def __neg__(self) -> "HamExpr":
        return HamExpr(self.d, {k: -c for k, c in self.terms.items()})

    def __sub__(self, other) -> "HamExpr":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "HamExpr":
        return self._lift(other) - self

    def __mul__(self, other) -> "HamExpr":
        if isinstance(other, (Number, Fraction)):
            c = _to_fraction(other)
            return HamExpr(self.d, {k: v * c for k, v in self.terms.items()})
        self._check(other)
        out: Dict[Key, Fraction] = {}
        for (qa, pa, ta), ca in self.terms.items():
            for (qb, pb, tb), cb in other.terms.items():
                qe = tuple(x + y for x, y in zip(qa, qb))
                pe = tuple(x + y for x, y in zip(pa, pb))
                for c, trig in _trig_product(ta, tb):
                    key = (qe, pe, trig)
                    out[key] = out.get(key, Fraction(0)) + ca * cb * c
        return HamExpr(self.d, out)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "HamExpr":
        return self * (Fraction(1) / _to_fraction(other))

    def __pow__(self, n: int) -> "HamExpr":
        if int(n) != n or n < 0:
            raise InputError("only nonnegative integer powers are supported")
        out = HamExpr.const(self.d, 1)
        for _ in range(int(n)):
            out = out * self
        return out

    def __eq__(self, other) -> bool:
        if isinstance(other, (Number, Fraction)):
            other = HamExpr.const(self.d, other)
        return isinstance(other, HamExpr) and self.d == other.d and self.terms == other.terms

    def __hash__(self):
        return hash((self.d, tuple(self.terms.items())))

    def is_zero(self) -> bool:
        return not self.terms

    def depends_on_p(self) -> bool:
        return any(any(pe) for _, pe, _ in self.terms)

    def depends_on_q(self) -> bool:
        return any(any(qe) or t is not None for qe, _, t in self.terms)

    # -- derivatives ---------------------------------------------------------
    def diff_q(self, j: int) -> "HamExpr":
        out: Dict[Key, Fraction] = {}

        def add(key, c):
            out[key] = out.get(key, Fraction(0)) + c

        for (qe, pe, trig), c in self.terms.items():
            if qe[j]:
                q2 = list(qe)
                q2[j] -= 1
                add((tuple(q2), pe, trig), c * qe[j])
            if trig is not None:
                kind, k = trig
                if k[j]:
                    if kind == COS:
                        add((qe, pe, (SIN, k)), -c * k[j])
                    else:
                        add((qe, pe, (COS, k)), c * k[j])
        return HamExpr(self.d, out)

    def diff_p(self, j: int) -> "HamExpr":
        out: Dict[Key, Fraction] = {}
        for (qe, pe, trig), c in self.terms.items():
            if pe[j]:
                p2 = list(pe)
                p2[j] -= 1
                key = (qe, tuple(p2), trig)
                out[key] = out.get(key, Fraction(0)) + c * pe[j]
        return HamExpr(self.d, out)

    @cached_property
    def grad_q_exprs(self):
        return tuple(self.diff_q(j) for j in range(self.d))

    @cached_property
    def grad_p_exprs(self):
        return tuple(self.diff_p(j) for j in range(self.d))

    @cached_property
    def _hess_exprs(self):
        """Second derivatives ordered as blocks (qq, qp, pq, pp)."""
        gq, gp = self.grad_q_exprs, self.grad_p_exprs
        d = self.d
        qq = [[gq[i].diff_q(j) for j in range(d)] for i in range(d)]
        qp = [[gq[i].diff_p(j) for j in range(d)] for i in range(d)]
        pp = [[gp[i].diff_p(j) for j in range(d)] for i in range(d)]
        return qq, qp, pp

    # -- numerics ------------------------------------------------------------
    @cached_property
    def _packed(self):
        if not self.terms:
            return None
        keys = list(self.terms)
        coeff = np.array([float(self.terms[k]) for k in keys])
        qe = np.array([k[0] for k in keys], dtype=float)
        pe = np.array([k[1] for k in keys], dtype=float)
        kind = np.array([0 if k[2] is None else (1 if k[2][0] == COS else 2) for k in keys])
        freq = np.array([k[2][1] if k[2] is not None else (0,) * self.d for k in keys], dtype=float)
        return coeff, qe, pe, kind, freq

    def evaluate(self, x) -> np.ndarray:
        """Value at a point ``(q, p)`` or at an (n, 2d) stack."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        if pts.shape[1] != 2 * self.d:
            raise InputError(f"point has length {pts.shape[1]}, expected {2 * self.d}")
        if self._packed is None:
            out = np.zeros(len(pts))
            return out[0] if single else out
        coeff, qe, pe, kind, freq = self._packed
        q, p = pts[:, : self.d], pts[:, self.d:]
        mono = np.prod(q[:, None, :] ** qe[None], axis=2) * np.prod(p[:, None, :] ** pe[None], axis=2)
        phase = q @ freq.T
        trig = np.where(kind == 1, np.cos(phase), np.where(kind == 2, np.sin(phase), 1.0))
        out = (mono * trig) @ coeff
        return out[0] if single else out

    __call__ = evaluate

    def grad(self, x):
        """(grad_q, grad_p) at a point or stack, each shaped like ``x[..., :d]``."""
        x = np.asarray(x, dtype=float)
        gq = np.stack([g.evaluate(x) for g in self.grad_q_exprs], axis=-1)
        gp = np.stack([g.evaluate(x) for g in self.grad_p_exprs], axis=-1)
        return gq, gp

    def hessian(self, x) -> np.ndarray:
        """Full 2d x 2d Hessian in (q, p) order at a point or stack."""
        x = np.asarray(x, dtype=float)
        d = self.d
        qq, qp, pp = self._hess_exprs
        shape = x.shape[:-1] + (2 * d, 2 * d)
        out = np.zeros(shape)
        for i in range(d):
            for j in range(d):
                out[..., i, j] = qq[i][j].evaluate(x)
                out[..., i, d + j] = qp[i][j].evaluate(x)
                out[..., d + j, i] = out[..., i, d + j]
                out[..., d + i, d + j] = pp[i][j].evaluate(x)
        return out

    # -- text ----------------------------------------------------------------
    def __str__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for (qe, pe, trig), c in self.terms.items():
            factors = []
            for name, exps in (("q", qe), ("p", pe)):
                for j, e in enumerate(exps):
                    if e == 1:
                        factors.append(f"{name}{j + 1}")
                    elif e > 1:
                        factors.append(f"{name}{j + 1}^{e}")
            if trig is not None:
                kind, k = trig
                factors.append(f"{kind}({_linear_str(k)})")
            coeff = abs(c)
            cs = str(coeff.numerator) if coeff.denominator == 1 else f"{coeff.numerator}/{coeff.denominator}"
            body = "*".join(factors)
            if not body:
                body = cs
            elif coeff != 1:
                body = f"{cs}*{body}"
            parts.append(("-" if c < 0 else "+", body))
        text = parts[0][1] if parts[0][0] == "+" else "-" + parts[0][1]
        for sign, body in parts[1:]:
            text += f" {sign} {body}"
        return text

    def __repr__(self) -> str:
        return f"HamExpr(d={self.d}, {self!s})"


def _sort_key(item):
    (qe, pe, trig), _ = item
    t = (0, "", ()) if trig is None else (1, trig[0], trig[1])
    return (sum(qe) + sum(pe), qe, pe, t)


def _linear_str(k):
    parts = []
    for j, c in enumerate(k):
        if c == 0:
            continue
        mag = "" if abs(c) == 1 else f"{abs(c)}*"
        sign = "-" if c < 0 else "+"
        parts.append((sign, f"{mag}q{j + 1}"))
    text = ("-" if parts[0][0] == "-" else "") + parts[0][1]
    for s, b in parts[1:]:
        text += f"{s}{b}"
    return text


def poisson_bracket(f: HamExpr, g: HamExpr) -> HamExpr:
    """{f, g} = sum_j df/dp_j dg/dq_j - df/dq_j dg/dp_j."""
    f._check(g)
    out = HamExpr.zero(f.d)
    for j in range(f.d):
        fp, gq = f.grad_p_exprs[j], g.grad_q_exprs[j]
        if not fp.is_zero() and not gq.is_zero():
            out = out + fp * gq
        fq, gp = f.grad_q_exprs[j], g.grad_p_exprs[j]
        if not fq.is_zero() and not gp.is_zero():
            out = out - fq * gp
    return out


def ad_power(f: HamExpr, g: HamExpr, m: int) -> HamExpr:
    """m-fold nested bracket {f, {f, ... {f, g}}}; m = 0 returns g."""
    if int(m) != m or m < 0:
        raise InputError("m must be a nonnegative integer")
    out = g
    for _ in range(int(m)):
        out = poisson_bracket(f, out)
    return out


def grad_eval(f: HamExpr, x):
    """(value, grad_q, grad_p) of ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    gq, gp = f.grad(x)
    return f.evaluate(x), gq, gp


def grad_square(f: HamExpr) -> HamExpr:
    """|grad_q f|^2 as an exact expression."""
    out = HamExpr.zero(f.d)
    for g in f.grad_q_exprs:
        out = out + g * g
    return out


# -- parser ------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)|([qp])(\d+)|(cos|sin)|(.))")


class _Parser:
    """Recursive-descent parser for ``0.5*p1^2 + cos(q1) - 2*sin(q1+q2)``."""

    def __init__(self, text: str, d: Optional[int]):
        self.text = text
        self.tokens = self._tokenize(text)
        max_index = max([int(t[1][1:]) for t in self.tokens if t[0] == "var"] or [1])
        if d is None:
            d = max_index
        elif max_index > d:
            raise InputError(f"expression uses index {max_index} but d={d}")
        self.d = d
        self.pos = 0

    @staticmethod
    def _tokenize(text):
        tokens, pos = [], 0
        text = text.strip()
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if m is None:
                raise InputError(f"cannot parse expression at {text[pos:]!r}")
            num, var, idx, fn, other = m.groups()
            if num is not None:
                tokens.append(("num", num))
            elif var is not None:
                if int(idx) < 1:
                    raise InputError("variable indices start at 1")
                tokens.append(("var", var + idx))
            elif fn is not None:
                tokens.append(("fn", fn))
            elif other is not None and other.strip():
                if other not in "+-*/^()":
                    raise InputError(f"unexpected character {other!r} in expression")
                tokens.append(("op", other))
            pos = m.end()
        if not tokens:
            raise InputError("empty expression")
        return tokens

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            raise InputError(f"unexpected token {tok[1]!r} in {self.text!r}")
        self.pos += 1
        return tok

    def parse(self) -> HamExpr:
        out = self.expr()
        if self.pos != len(self.tokens):
            raise InputError(f"trailing input in {self.text!r}")
        return out

    def expr(self):
        out = self.term()
        while self.peek() in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            rhs = self.term()
            out = out + rhs if op == "+" else out - rhs
        return out

    def term(self):
        out = self.unary()
        while self.peek() in (("op", "*"), ("op", "/")):
            op = self.take()[1]
            rhs = self.unary()
            if op == "*":
                out = out * rhs
            else:
                c = _as_constant(rhs)
                if c is None or c == 0:
                    raise InputError("division only by nonzero constants")
                out = out / c
        return out

    def unary(self):
        if self.peek() == ("op", "-"):
            self.take()
            return -self.unary()
        if self.peek() == ("op", "+"):
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == ("op", "^"):
            self.take()
            tok = self.take("num")
            if not re.fullmatch(r"\d+", tok[1]):
                raise InputError("exponents must be nonnegative integers")
            return base ** int(tok[1])
        return base

    def atom(self):
        kind, val = self.peek()
        if kind == "num":
            self.take()
            return HamExpr.const(self.d, Fraction(val))
        if kind == "var":
            self.take()
            j = int(val[1:]) - 1
            return HamExpr.q(self.d, j) if val[0] == "q" else HamExpr.p(self.d, j)
        if kind == "fn":
            self.take()
            self.take("op", "(")
            arg = self.expr()
            self.take("op", ")")
            k = _as_integer_linear_form(arg)
            return HamExpr.cos(k) if val == COS else HamExpr.sin(k)
        if (kind, val) == ("op", "("):
            self.take()
            out = self.expr()
            self.take("op", ")")
            return out
        raise InputError(f"unexpected token {val!r} in {self.text!r}")


def _as_constant(e: HamExpr):
    if e.is_zero():
        return Fraction(0)
    if len(e.terms) == 1:
        (qe, pe, trig), c = next(iter(e.terms.items()))
        if not any(qe) and not any(pe) and trig is None:
            return c
    return None


def _as_integer_linear_form(e: HamExpr) -> Tuple[int, ...]:
    k = [0] * e.d
    for (qe, pe, trig), c in e.terms.items():
        if trig is not None or any(pe) or sum(qe) != 1 or c.denominator != 1:
            raise InputError("trig arguments must be integer linear forms in q")
        k[qe.index(1)] = int(c)
    return tuple(k)
