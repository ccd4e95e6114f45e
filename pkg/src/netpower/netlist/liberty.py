"""Reader and writer for the liberty-lite library format (see docs/liberty_lite.md)."""
from __future__ import annotations

import re
from importlib import resources
from typing import Dict, List, Optional, Tuple

from .expr import ExprError, parse_expr, variables
from .types import (CLOCK_TYPES, REGISTER_TYPES, LibCell, Library, NodeType, ParseError,
                    UnknownCellError)

FORMAT_VERSION = 1

_NAME_RULES: List[Tuple[str, NodeType]] = [
    (r"(ICG|CKGATE|CLKGATE|CKLNQ)", NodeType.ICG),
    (r"(CK|CLK)", NodeType.CK),
    (r"(DFFRS|DFFR|DFFS|SDFFR|SDFFS)", NodeType.DFFRS),
    (r"(DFF|SDFF)", NodeType.DFF),
    (r"(LATCH|DLAT|LAT)", NodeType.LATCH),
    (r"TIE", NodeType.TIE),
    (r"(FA|HA|ADD)", NodeType.ADDER),
    (r"AOI", NodeType.AOI),
    (r"OAI", NodeType.OAI),
    (r"XNOR", NodeType.XNOR),
    (r"XOR", NodeType.XOR),
    (r"NAND", NodeType.NAND),
    (r"NOR", NodeType.NOR),
    (r"AND", NodeType.AND),
    (r"OR", NodeType.OR),
    (r"(MUX|MX)", NodeType.MUX),
    (r"INV", NodeType.INV),
    (r"BUF", NodeType.BUF),
]

_REQUIRED = ("internal_energy", "leakage", "input_cap")
_NUMERIC = ("internal_energy", "leakage", "input_cap", "clock_pin_energy", "drive_cap_limit")


def classify_name(name: str) -> NodeType:
    upper = name.upper()
    for pattern, node_type in _NAME_RULES:
        if re.match(pattern, upper):
            return node_type
    raise UnknownCellError(f"cannot classify library cell '{name}'")


def classify_cell(name: str, library: Optional[Library] = None) -> NodeType:
    """Map a library cell name to one of the 18 node types.

    With a library, the cell must exist there and its declared type wins;
    without one the vendor-style naming convention is used.
    """
    if library is not None:
        return library[name].node_type
    return classify_name(name)


def _arity(name: str, default: int = 2) -> str:
    m = re.match(r"^[A-Za-z]+?(\d+)", name)
    return m.group(1) if m else str(default)


def default_pins(name: str, node_type: NodeType) -> Dict[str, object]:
    """Pin names and logic function implied by a conventional cell name."""
    letters = "ABCDEFGH"
    t = node_type
    if t in (NodeType.INV, NodeType.BUF):
        return {"inputs": ("A",), "output": "Y", "function": "!A" if t == NodeType.INV else "A"}
    if t in (NodeType.AND, NodeType.OR, NodeType.NAND, NodeType.NOR, NodeType.XOR, NodeType.XNOR):
        n = int(_arity(name)[0])
        ins = tuple(letters[:n])
        op = {"AND": "&", "NAND": "&", "OR": "|", "NOR": "|", "XOR": "^", "XNOR": "^"}[t.name]
        body = op.join(ins)
        fn = f"!({body})" if t in (NodeType.NAND, NodeType.NOR, NodeType.XNOR) else body
        return {"inputs": ins, "output": "Y", "function": fn}
    if t == NodeType.MUX:
        return {"inputs": ("A", "B", "S"), "output": "Y", "function": "(A&!S)|(B&S)"}
    if t in (NodeType.AOI, NodeType.OAI):
        code = _arity(name, 21)
        groups = []
        ins: List[str] = []
        for gi, width in enumerate(code):
            pins = [f"{letters[gi]}{k + 1}" if int(width) > 1 else letters[gi] for k in range(int(width))]
            ins.extend(pins)
            groups.append(pins)
        inner, outer = ("&", "|") if t == NodeType.AOI else ("|", "&")
        body = outer.join("(" + inner.join(g) + ")" for g in groups)
        return {"inputs": tuple(ins), "output": "Y", "function": f"!({body})"}
    if t == NodeType.ADDER:
        carry = name.upper().startswith("FAC") or "CO" in name.upper()
        fn = "(A&B)|(CI&(A^B))" if carry else "A^B^CI"
        return {"inputs": ("A", "B", "CI"), "output": "CO" if carry else "S", "function": fn}
    if t == NodeType.TIE:
        hi = "HI" in name.upper() or name.upper().endswith("H")
        return {"inputs": (), "output": "Y", "function": "1" if hi else "0"}
    if t == NodeType.DFF:
        return {"inputs": ("D",), "output": "Q", "clock_pin": "CK", "function": "D"}
    if t == NodeType.DFFRS:
        return {"inputs": ("D", "R", "S"), "output": "Q", "clock_pin": "CK", "function": "S|(!R&D)"}
    if t == NodeType.LATCH:
        return {"inputs": ("D",), "output": "Q", "clock_pin": "G", "function": "D"}
    if t == NodeType.ICG:
        return {"inputs": ("EN",), "output": "GCK", "clock_pin": "CK", "function": "EN"}
    return {"inputs": (), "output": "Y", "clock_pin": "A", "function": ""}


# -- reader ------------------------------------------------------------------

_LEX = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>/\*.*?\*/|//[^\n]*)
  | (?P<str>"[^"\n]*")
  | (?P<word>[A-Za-z0-9_.+\-]+)
  | (?P<punct>[{}():;,])
""", re.S | re.X)


def _lex(source: str):
    pos, line, col = 0, 1, 1
    while pos < len(source):
        m = _LEX.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, col)
        kind = m.lastgroup
        text = m.group()
        if kind not in ("ws", "comment"):
            yield kind, text, line, col
        nl = text.count("\n")
        if nl:
            line += nl
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = m.end()


class _Reader:
    def __init__(self, source: str):
        self.toks = list(_lex(source))
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else ("eof", "", 0, 0)

    def next(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect(self, text: str):
        kind, val, line, col = self.next()
        if val != text:
            raise ParseError(f"expected '{text}', got '{val or 'end of file'}'", line, col)

    def group(self):
        """``name ( arg ) { body }`` or ``name : value ;``."""
        kind, name, line, col = self.next()
        if kind != "word":
            raise ParseError(f"expected attribute or group name, got '{name}'", line, col)
        if self.peek()[1] == ":":
            self.next()
            vkind, val, vl, vc = self.next()
            if vkind not in ("word", "str"):
                raise ParseError(f"bad value for '{name}'", vl, vc)
            self.expect(";")
            return ("attr", name, val.strip('"') if vkind == "str" else val, line, col)
        self.expect("(")
        akind, arg, al, ac = self.next()
        if akind not in ("word", "str"):
            raise ParseError(f"bad group argument for '{name}'", al, ac)
        self.expect(")")
        self.expect("{")
        body = []
        while self.peek()[1] != "}":
            if self.peek()[0] == "eof":
                raise ParseError(f"unterminated group '{name}'", line, col)
            body.append(self.group())
        self.expect("}")
        return ("group", name, arg.strip('"'), body, line, col)


def _num(name: str, val: str, line: int, col: int) -> float:
    try:
        return float(val)
    except ValueError:
        raise ParseError(f"field '{name}' expects a number, got '{val}'", line, col) from None


def _build_cell(name: str, body, line: int, col: int) -> LibCell:
    attrs: Dict[str, Tuple[str, int, int]] = {}
    for item in body:
        if item[0] != "attr":
            raise ParseError(f"unexpected group '{item[1]}' in cell '{name}'", item[-2], item[-1])
        attrs[item[1]] = (item[2], item[3], item[4])
    for req in _REQUIRED:
        if req not in attrs:
            raise ParseError(f"cell '{name}' is missing required field '{req}'", line, col)
    if "type" in attrs:
        try:
            node_type = NodeType[attrs["type"][0].upper()]
        except KeyError:
            raise ParseError(f"cell '{name}' has unknown type '{attrs['type'][0]}'",
                             attrs["type"][1], attrs["type"][2]) from None
    else:
        node_type = classify_name(name)
    pins = default_pins(name, node_type)
    nums = {}
    for key in _NUMERIC:
        if key in attrs:
            val, l, c = attrs[key]
            nums[key] = _num(key, val, l, c)
            if nums[key] < 0:
                raise ParseError(f"cell '{name}' has negative {key}", l, c)
    if nums.get("clock_pin_energy", 0.0) > 0 and node_type not in REGISTER_TYPES | CLOCK_TYPES:
        raise ParseError(f"cell '{name}' of type {node_type.name} cannot have clock_pin_energy", line, col)
    if "inputs" in attrs:
        raw = attrs["inputs"][0].replace(",", " ").split()
        pins["inputs"] = tuple(raw)
    if "output" in attrs:
        pins["output"] = attrs["output"][0]
    if "clock_pin" in attrs:
        pins["clock_pin"] = attrs["clock_pin"][0] or None
    if "function" in attrs:
        pins["function"] = attrs["function"][0]
    clock_pin = pins.get("clock_pin")
    if (node_type in REGISTER_TYPES | CLOCK_TYPES) != bool(clock_pin):
        raise ParseError(f"cell '{name}': clock pin required exactly for sequential/clock cells", line, col)
    fn = pins["function"]
    if node_type != NodeType.CK:
        try:
            used = variables(parse_expr(fn))
        except ExprError as exc:
            raise ParseError(f"cell '{name}': {exc}", line, col) from None
        missing = [v for v in used if v not in pins["inputs"]]
        if missing:
            raise ParseError(f"cell '{name}': function uses unknown pins {missing}", line, col)
    return LibCell(
        name=name,
        node_type=node_type,
        internal_energy=nums["internal_energy"],
        leakage=nums["leakage"],
        input_cap=nums["input_cap"],
        clock_pin_energy=nums.get("clock_pin_energy", 0.0),
        drive_cap_limit=nums.get("drive_cap_limit", 0.0),
        inputs=tuple(pins["inputs"]),
        output=str(pins["output"]),
        clock_pin=clock_pin,
        function=fn,
    )


def parse_liberty_lite(source: str) -> Library:
    rd = _Reader(source)
    top = rd.group()
    if top[0] != "group" or top[1] != "library":
        raise ParseError("document must start with a 'library (name) { ... }' group", top[-2], top[-1])
    if rd.peek()[0] != "eof":
        _, val, line, col = rd.peek()
        raise ParseError(f"trailing content '{val}'", line, col)
    _, _, lib_name, body, _, _ = top
    cells: Dict[str, LibCell] = {}
    voltage, frequency = 1.0, 1e9
    for item in body:
        if item[0] == "attr":
            key, val, line, col = item[1:]
            if key == "voltage":
                voltage = _num(key, val, line, col)
            elif key == "frequency":
                frequency = _num(key, val, line, col)
            elif key == "format_version":
                if int(_num(key, val, line, col)) > FORMAT_VERSION:
                    raise ParseError(f"unsupported format_version {val}", line, col)
            else:
                raise ParseError(f"unknown library field '{key}'", line, col)
        elif item[1] == "cell":
            name, cbody, line, col = item[2:]
            if name in cells:
                raise ParseError(f"duplicate cell name '{name}'", line, col)
            cells[name] = _build_cell(name, cbody, line, col)
        else:
            raise ParseError(f"unexpected group '{item[1]}'", item[-2], item[-1])
    if voltage <= 0 or frequency <= 0:
        raise ParseError("voltage and frequency must be positive")
    return Library(cells=cells, voltage=voltage, frequency=frequency, name=lib_name)


def write_liberty_lite(library: Library) -> str:
    out = [f"library ({library.name}) {{",
           f"  format_version : {FORMAT_VERSION} ;",
           f"  voltage : {library.voltage!r} ;",
           f"  frequency : {library.frequency!r} ;"]
    for c in library.cells.values():
        out.append(f"  cell ({c.name}) {{")
        out.append(f"    type : {c.node_type.name} ;")
        out.append(f'    inputs : "{" ".join(c.inputs)}" ;')
        out.append(f"    output : {c.output} ;")
        if c.clock_pin:
            out.append(f"    clock_pin : {c.clock_pin} ;")
        out.append(f'    function : "{c.function}" ;')
        for key in _NUMERIC:
            out.append(f"    {key} : {getattr(c, key)!r} ;")
        out.append("  }")
    out.append("}")
    return "\n".join(out) + "\n"


def fixture_library() -> Library:
    """The bundled 18-type library used by the generators."""
    text = resources.files("netpower.data").joinpath("fixture.lib").read_text()
    return parse_liberty_lite(text)
