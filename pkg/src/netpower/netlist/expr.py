"""Tiny Boolean expression language used by the ``function`` field of library cells.

Operators, loosest first: ``|``, ``^``, ``&``, prefix ``!``; constants ``0``/``1``.
"""
from __future__ import annotations

import re
from functools import lru_cache
from typing import Mapping, Tuple

_TOKEN = re.compile(r"\s*(?:([A-Za-z_][A-Za-z0-9_]*)|([01])|(.))")

Expr = tuple


class ExprError(ValueError):
    pass


def _tokens(text: str):
    pos = 0
    out = []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            break
        pos = m.end()
        ident, const, op = m.groups()
        if ident:
            out.append(("id", ident))
        elif const:
            out.append(("const", int(const)))
        elif op and not op.isspace():
            if op not in "!&|^()":
                raise ExprError(f"bad character {op!r} in {text!r}")
            out.append(("op", op))
    return out


@lru_cache(maxsize=None)
def parse_expr(text: str) -> Expr:
    toks = _tokens(text)
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else (None, None)

    def take(op):
        nonlocal pos
        if peek() == ("op", op):
            pos += 1
            return True
        return False

    def binary(level):
        ops = ("|", "^", "&")
        names = ("or", "xor", "and")
        if level == 3:
            return unary()
        items = [binary(level + 1)]
        while take(ops[level]):
            items.append(binary(level + 1))
        return items[0] if len(items) == 1 else (names[level], tuple(items))

    def unary():
        nonlocal pos
        if take("!"):
            return ("not", unary())
        if take("("):
            e = binary(0)
            if not take(")"):
                raise ExprError(f"missing ')' in {text!r}")
            return e
        kind, val = peek()
        if kind == "id":
            pos += 1
            return ("var", val)
        if kind == "const":
            pos += 1
            return ("const", val)
        raise ExprError(f"unexpected token in {text!r}")

    if not toks:
        raise ExprError("empty expression")
    tree = binary(0)
    if pos != len(toks):
        raise ExprError(f"trailing tokens in {text!r}")
    return tree


def variables(e: Expr) -> Tuple[str, ...]:
    kind = e[0]
    if kind == "var":
        return (e[1],)
    if kind == "const":
        return ()
    if kind == "not":
        return variables(e[1])
    seen = []
    for sub in e[1]:
        for v in variables(sub):
            if v not in seen:
                seen.append(v)
    return tuple(seen)


def evaluate(e: Expr, env: Mapping[str, int]) -> int:
    kind = e[0]
    if kind == "var":
        return env[e[1]] & 1
    if kind == "const":
        return e[1]
    if kind == "not":
        return 1 ^ evaluate(e[1], env)
    vals = [evaluate(s, env) for s in e[1]]
    out = vals[0]
    for v in vals[1:]:
        if kind == "and":
            out &= v
        elif kind == "or":
            out |= v
        else:
            out ^= v
    return out


def to_python(e: Expr, refs: Mapping[str, str]) -> str:
    """Render as a Python int expression; ``refs`` maps pin names to source text."""
    kind = e[0]
    if kind == "var":
        return refs[e[1]]
    if kind == "const":
        return str(e[1])
    if kind == "not":
        return f"(1^{to_python(e[1], refs)})"
    sym = {"and": "&", "or": "|", "xor": "^"}[kind]
    return "(" + sym.join(to_python(s, refs) for s in e[1]) + ")"
