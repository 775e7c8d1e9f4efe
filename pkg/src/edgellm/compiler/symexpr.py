"""Integer expressions over the runtime variable ``token``.

Expressions are immutable, hashable trees.  ``fold`` performs constant
folding and a few algebraic identities; ``evaluate`` / ``evaluate_many``
compute values; ``to_rpn`` / ``from_rpn`` give the postfix stream stored in
program files and interpreted by the runtime patcher.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

BINARY_OPS = ("add", "sub", "mul", "div", "cdiv", "min", "max")
_OP_CODE = {op: i + 2 for i, op in enumerate(BINARY_OPS)}
_CODE_OP = {v: k for k, v in _OP_CODE.items()}
RPN_CONST, RPN_TOKEN = 0, 1
_RPN_ITEM = struct.Struct("<Bq")


@dataclass(frozen=True)
class Expr:
    op: str                 # "const", "token" or a binary op
    args: tuple = ()
    value: int = 0

    # arithmetic sugar ---------------------------------------------------
    def _bin(self, op, other, swap=False):
        other = as_expr(other)
        return Expr(op, (other, self) if swap else (self, other))

    def __add__(self, o):
        return self._bin("add", o)

    def __radd__(self, o):
        return self._bin("add", o, True)

    def __sub__(self, o):
        return self._bin("sub", o)

    def __rsub__(self, o):
        return self._bin("sub", o, True)

    def __mul__(self, o):
        return self._bin("mul", o)

    def __rmul__(self, o):
        return self._bin("mul", o, True)

    def __floordiv__(self, o):
        return self._bin("div", o)

    def __rfloordiv__(self, o):
        return self._bin("div", o, True)

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    def __repr__(self):
        if self.op == "const":
            return str(self.value)
        if self.op == "token":
            return "token"
        a, b = self.args
        sym = {"add": "+", "sub": "-", "mul": "*", "div": "//"}.get(self.op)
        if sym:
            return f"({a!r} {sym} {b!r})"
        return f"{self.op}({a!r}, {b!r})"


TOKEN = Expr("token")


def const(v: int) -> Expr:
    return Expr("const", (), int(v))


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, np.integer)):
        return const(int(x))
    raise TypeError(f"cannot use {type(x).__name__} in an expression")


def cdiv(a, b) -> Expr:
    return Expr("cdiv", (as_expr(a), as_expr(b)))


def emin(a, b) -> Expr:
    return Expr("min", (as_expr(a), as_expr(b)))


def emax(a, b) -> Expr:
    return Expr("max", (as_expr(a), as_expr(b)))


def _apply(op, a, b):
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op in ("div", "cdiv"):
        if np.any(np.asarray(b) == 0):
            raise ZeroDivisionError("division by zero in expression")
        return a // b if op == "div" else -((-a) // b)
    if op == "min":
        return np.minimum(a, b) if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) else min(a, b)
    if op == "max":
        return np.maximum(a, b) if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) else max(a, b)
    raise ValueError(f"unknown op {op!r}")


def evaluate(e, token: int) -> int:
    e = as_expr(e)
    if e.op == "const":
        return e.value
    if e.op == "token":
        return int(token)
    a, b = e.args
    return int(_apply(e.op, evaluate(a, token), evaluate(b, token)))


def evaluate_many(e, tokens) -> np.ndarray:
    """Vectorised evaluation over an array of token values."""
    e = as_expr(e)
    tokens = np.asarray(tokens, dtype=np.int64)
    if e.op == "const":
        return np.full(tokens.shape, e.value, dtype=np.int64)
    if e.op == "token":
        return tokens.copy()
    a, b = e.args
    return _apply(e.op, evaluate_many(a, tokens), evaluate_many(b, tokens))


def value_range(e, lo: int, hi: int) -> tuple[int, int]:
    """Exact ``(min, max)`` over integer tokens in ``[lo, hi]``."""
    v = evaluate_many(e, np.arange(lo, hi + 1))
    return int(v.min()), int(v.max())


@lru_cache(maxsize=None)
def fold(e: Expr) -> Expr:
    """Constant folding plus neutral-element and re-association identities."""
    if e.op in ("const", "token"):
        return e
    a, b = (fold(x) for x in e.args)
    if a.is_const and b.is_const:
        return const(_apply(e.op, a.value, b.value))
    op = e.op
    if op == "add":
        if a.is_const and a.value == 0:
            return b
        if b.is_const and b.value == 0:
            return a
        if a.is_const:
            a, b = b, a
        # (x + c1) + c2 -> x + (c1 + c2)
        if b.is_const and a.op == "add" and a.args[1].is_const:
            return fold(Expr("add", (a.args[0], const(a.args[1].value + b.value))))
        if b.is_const and a.op == "sub" and a.args[1].is_const:
            return fold(Expr("add", (a.args[0], const(b.value - a.args[1].value))))
    elif op == "sub":
        if b.is_const and b.value == 0:
            return a
        if a == b:
            return const(0)
        if b.is_const:
            return fold(Expr("add", (a, const(-b.value)))) if b.value < 0 else _sub_const(a, b)
    elif op == "mul":
        if (a.is_const and a.value == 0) or (b.is_const and b.value == 0):
            return const(0)
        if a.is_const and a.value == 1:
            return b
        if b.is_const and b.value == 1:
            return a
        if a.is_const:
            a, b = b, a
        if b.is_const and a.op == "mul" and a.args[1].is_const:
            return Expr("mul", (a.args[0], const(a.args[1].value * b.value)))
    elif op in ("div", "cdiv"):
        if b.is_const and b.value == 1:
            return a
    elif op in ("min", "max"):
        if a == b:
            return a
    return Expr(op, (a, b))


def _sub_const(a: Expr, b: Expr) -> Expr:
    # (x + c1) - c2 -> x + (c1 - c2)
    if a.op == "add" and a.args[1].is_const:
        return fold(Expr("add", (a.args[0], const(a.args[1].value - b.value))))
    return Expr("sub", (a, b))


def substitute(e, token_value: int) -> Expr:
    """Replace ``token`` by a constant (the from-scratch compile path)."""
    e = as_expr(e)
    if e.op == "token":
        return const(token_value)
    if e.op == "const":
        return e
    return Expr(e.op, tuple(substitute(x, token_value) for x in e.args))


def depends_on_token(e) -> bool:
    e = as_expr(e)
    if e.op == "token":
        return True
    return any(depends_on_token(x) for x in e.args)


# --------------------------------------------------------------------------
# postfix form


def to_rpn(e) -> list[tuple]:
    out = []

    def walk(x):
        if x.op == "const":
            out.append(("const", x.value))
        elif x.op == "token":
            out.append(("token",))
        else:
            walk(x.args[0])
            walk(x.args[1])
            out.append((x.op,))

    walk(as_expr(e))
    return out


def from_rpn(items) -> Expr:
    stack = []
    for it in items:
        if it[0] == "const":
            stack.append(const(it[1]))
        elif it[0] == "token":
            stack.append(TOKEN)
        elif it[0] in BINARY_OPS:
            if len(stack) < 2:
                raise ValueError("malformed expression stream")
            b, a = stack.pop(), stack.pop()
            stack.append(Expr(it[0], (a, b)))
        else:
            raise ValueError(f"unknown expression item {it!r}")
    if len(stack) != 1:
        raise ValueError("malformed expression stream")
    return stack[0]


def eval_rpn(items, token: int) -> int:
    """Stack interpreter used by the runtime patcher."""
    stack = []
    for it in items:
        if it[0] == "const":
            stack.append(it[1])
        elif it[0] == "token":
            stack.append(int(token))
        else:
            b, a = stack.pop(), stack.pop()
            stack.append(int(_apply(it[0], a, b)))
    if len(stack) != 1:
        raise ValueError("malformed expression stream")
    return stack[0]


def pack_rpn(items) -> bytes:
    out = bytearray()
    for it in items:
        if it[0] == "const":
            out += _RPN_ITEM.pack(RPN_CONST, it[1])
        elif it[0] == "token":
            out += _RPN_ITEM.pack(RPN_TOKEN, 0)
        else:
            out += _RPN_ITEM.pack(_OP_CODE[it[0]], 0)
    return bytes(out)


def unpack_rpn(data: bytes) -> list[tuple]:
    if len(data) % _RPN_ITEM.size:
        raise ValueError("truncated expression stream")
    items = []
    for code, v in _RPN_ITEM.iter_unpack(data):
        if code == RPN_CONST:
            items.append(("const", v))
        elif code == RPN_TOKEN:
            items.append(("token",))
        elif code in _CODE_OP:
            items.append((_CODE_OP[code],))
        else:
            raise ValueError(f"unknown expression code {code}")
    return items


RPN_ITEM_BYTES = _RPN_ITEM.size
