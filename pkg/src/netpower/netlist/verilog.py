"""Structural Verilog subset: reader (flattening) and hierarchical writer.

Accepted grammar::

    (* attr = value, ... *)            optional, before modules and declarations
    module NAME ( ports ) ;            ports may be plain names or ANSI declarations
      input|output|wire [msb:lsb] a, b ;
      LIBCELL inst ( .PIN(net), ... ) ;
      MODULE  inst ( .port(net), ... ) ;
    endmodule

Buses are scalarised: ``a[3:0]`` declares ``a_3 .. a_0`` and ``a[2]`` refers to
``a_2``.  Attributes understood: ``wire_cap`` (fF) on net declarations and
``stage`` (``G``/``G_PLUS``/``P``) on the top module.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .builder import NetlistBuilder
from .types import (DanglingNetError, Library, Netlist, NetlistError, ParseError, Stage,
                    UnknownCellError, is_under, net_owner, relative_net_name)

_LEX = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>//[^\n]*|/\*.*?\*/)
  | (?P<attr_open>\(\*)
  | (?P<attr_close>\*\))
  | (?P<escaped>\\\S+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_$]*)
  | (?P<number>\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)
  | (?P<string>"[^"\n]*")
  | (?P<punct>[()\[\];,.:=])
""", re.S | re.X)

_KEYWORDS = {"module", "endmodule", "input", "output", "wire", "inout", "assign", "reg"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _lex(source: str) -> List[_Tok]:
    out = []
    pos, line, col = 0, 1, 1
    while pos < len(source):
        m = _LEX.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, col)
        kind, text = m.lastgroup, m.group()
        if kind == "escaped":
            kind, text = "ident", text[1:]
        if kind not in ("ws", "comment"):
            out.append(_Tok(kind, text, line, col))
        nl = text.count("\n")
        if nl:
            line += nl
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = m.end()
    out.append(_Tok("eof", "", line, col))
    return out


@dataclass
class _Decl:
    direction: str
    bits: List[str]
    attrs: Dict[str, str]
    line: int
    col: int


@dataclass
class _Inst:
    type: str
    name: str
    conns: List[Tuple[str, Optional[str], int, int]]
    line: int
    col: int


@dataclass
class _Module:
    name: str
    attrs: Dict[str, str]
    ports: List[str] = field(default_factory=list)
    decls: Dict[str, _Decl] = field(default_factory=dict)
    buses: Dict[str, List[str]] = field(default_factory=dict)
    insts: List[_Inst] = field(default_factory=list)
    line: int = 0
    col: int = 0


class _Parser:
    def __init__(self, source: str):
        self.toks = _lex(source)
        self.pos = 0

    def peek(self, k: int = 0) -> _Tok:
        return self.toks[min(self.pos + k, len(self.toks) - 1)]

    def next(self) -> _Tok:
        t = self.peek()
        self.pos += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.next()
        if t.text != text:
            raise ParseError(f"expected '{text}', got '{t.text or 'end of file'}'", t.line, t.col)
        return t

    def ident(self, what: str = "identifier") -> _Tok:
        t = self.next()
        if t.kind != "ident" or t.text in _KEYWORDS:
            raise ParseError(f"expected {what}, got '{t.text or 'end of file'}'", t.line, t.col)
        return t

    def attrs(self) -> Dict[str, str]:
        out: Dict[str, str] = {}
        while self.peek().kind == "attr_open":
            self.next()
            while True:
                key = self.ident("attribute name").text
                val = "1"
                if self.peek().text == "=":
                    self.next()
                    v = self.next()
                    if v.kind not in ("ident", "number", "string"):
                        raise ParseError("bad attribute value", v.line, v.col)
                    val = v.text.strip('"')
                out[key] = val
                if self.peek().text == ",":
                    self.next()
                    continue
                break
            t = self.next()
            if t.kind != "attr_close":
                raise ParseError("expected '*)'", t.line, t.col)
        return out

    def range_(self) -> Optional[Tuple[int, int]]:
        if self.peek().text != "[":
            return None
        self.next()
        msb = self.next()
        self.expect(":")
        lsb = self.next()
        self.expect("]")
        try:
            return int(msb.text), int(lsb.text)
        except ValueError:
            raise ParseError("bus range must be integer", msb.line, msb.col) from None

    def parse(self) -> List[_Module]:
        mods = []
        while self.peek().kind != "eof":
            attrs = self.attrs()
            t = self.peek()
            if t.text != "module":
                raise ParseError(f"expected 'module', got '{t.text}'", t.line, t.col)
            mods.append(self.module(attrs))
        return mods

    def _declare(self, mod: _Module, direction: str, rng, name: _Tok, attrs: Dict[str, str]) -> None:
        if name.text in mod.decls or name.text in mod.buses:
            prev = mod.decls.get(name.text)
            if prev is not None and prev.direction == "port" and direction in ("input", "output"):
                pass
            else:
                raise ParseError(f"duplicate declaration of '{name.text}'", name.line, name.col)
        if rng is None:
            bits = [name.text]
        else:
            msb, lsb = rng
            step = -1 if msb >= lsb else 1
            bits = [f"{name.text}_{i}" for i in range(msb, lsb + step, step)]
            mod.buses[name.text] = bits
        mod.decls[name.text] = _Decl(direction, bits, attrs, name.line, name.col)

    def module(self, attrs: Dict[str, str]) -> _Module:
        kw = self.expect("module")
        mod = _Module(self.ident("module name").text, attrs, line=kw.line, col=kw.col)
        if self.peek().text == "(":
            self.next()
            direction = None
            rng = None
            while self.peek().text != ")":
                pattrs = self.attrs()
                if self.peek().text in ("input", "output"):
                    direction = self.next().text
                    rng = self.range_()
                name = self.ident("port name")
                mod.ports.append(name.text)
                if direction is not None:
                    self._declare(mod, direction, rng, name, pattrs)
                if self.peek().text == ",":
                    self.next()
                elif self.peek().text != ")":
                    t = self.peek()
                    raise ParseError(f"expected ',' or ')' in port list, got '{t.text}'", t.line, t.col)
            self.expect(")")
        self.expect(";")
        while True:
            attrs = self.attrs()
            t = self.peek()
            if t.text == "endmodule":
                self.next()
                break
            if t.kind == "eof":
                raise ParseError(f"missing 'endmodule' for '{mod.name}'", kw.line, kw.col)
            if t.text in ("input", "output", "wire"):
                self.next()
                rng = self.range_()
                while True:
                    name = self.ident("net name")
                    self._declare(mod, t.text, rng, name, attrs)
                    if self.peek().text == ",":
                        self.next()
                        continue
                    break
                self.expect(";")
            elif t.text in ("assign", "reg", "inout", "always", "initial"):
                raise ParseError(f"unsupported construct '{t.text}'", t.line, t.col)
            elif t.kind == "ident":
                mod.insts.append(self.instance())
            else:
                raise ParseError(f"unexpected '{t.text}'", t.line, t.col)
        return mod

    def instance(self) -> _Inst:
        typ = self.ident("cell or module name")
        name = self.ident("instance name")
        self.expect("(")
        conns = []
        while self.peek().text != ")":
            t = self.peek()
            if t.text != ".":
                raise ParseError("only named port connections are supported", t.line, t.col)
            self.next()
            pin = self.ident("pin name")
            self.expect("(")
            ref = None
            if self.peek().text != ")":
                net = self.ident("net name")
                ref = net.text
                if self.peek().text == "[":
                    self.next()
                    idx = self.next()
                    if idx.kind != "number":
                        raise ParseError("bit select must be an integer", idx.line, idx.col)
                    self.expect("]")
                    ref = f"{net.text}[{idx.text}]"
            self.expect(")")
            conns.append((pin.text, ref, pin.line, pin.col))
            if self.peek().text == ",":
                self.next()
            elif self.peek().text != ")":
                t = self.peek()
                raise ParseError(f"expected ',' or ')', got '{t.text}'", t.line, t.col)
        self.expect(")")
        self.expect(";")
        return _Inst(typ.text, name.text, conns, typ.line, typ.col)


def _ref_bits(mod: _Module, ref: str) -> List[str]:
    if ref.endswith("]"):
        base, idx = ref[:-1].split("[")
        return [f"{base}_{idx}"]
    if ref in mod.buses:
        return list(mod.buses[ref])
    return [ref]


def _port_bits(mod: _Module, name: str) -> List[str]:
    return list(mod.buses.get(name, [name]))


def parse_netlist(source: str, library: Library, top: Optional[str] = None) -> Netlist:
    """Parse and flatten structural Verilog into a validated :class:`Netlist`."""
    mods = _Parser(source).parse()
    table: Dict[str, _Module] = {}
    for m in mods:
        if m.name in table:
            raise ParseError(f"duplicate module '{m.name}'", m.line, m.col)
        if m.name in library:
            raise ParseError(f"module '{m.name}' shadows a library cell", m.line, m.col)
        table[m.name] = m
        for p in m.ports:
            d = m.decls.get(p)
            if d is None or d.direction not in ("input", "output"):
                raise ParseError(f"port '{p}' of '{m.name}' lacks a direction", m.line, m.col)
    if top is None:
        used = {i.type for m in mods for i in m.insts}
        roots = [m.name for m in mods if m.name not in used]
        if len(roots) != 1:
            raise ParseError(f"cannot determine top module (candidates: {roots})")
        top = roots[0]
    if top not in table:
        raise ParseError(f"top module '{top}' not found")
    topm = table[top]
    try:
        stage = Stage(topm.attrs.get("stage", "G"))
    except ValueError:
        raise ParseError(f"bad stage attribute '{topm.attrs.get('stage')}'", topm.line, topm.col) from None
    b = NetlistBuilder(top=top, stage=stage)
    for p in topm.ports:
        d = topm.decls[p]
        cap = float(d.attrs.get("wire_cap", 0.0))
        for bit in d.bits:
            b.add_net(bit, cap)
            (b.primary_inputs if d.direction == "input" else b.primary_outputs).append(bit)
    _elaborate(table, topm, top, {}, b, library, [top])
    return b.build(library)


def _elaborate(table: Dict[str, _Module], mod: _Module, path: str, binding: Dict[str, str],
               b: NetlistBuilder, library: Library, stack: List[str]) -> None:
    b.add_scope(path, mod.name)
    local: Dict[str, str] = {}
    for name, d in mod.decls.items():
        cap = float(d.attrs.get("wire_cap", 0.0))
        for bit in d.bits:
            if bit in binding:
                canon = binding[bit]
            else:
                canon = relative_net_name(path, b.top, bit)
            local[bit] = canon
            if canon not in b.nets:
                b.add_net(canon, cap)
            elif cap:
                b.nets[canon] = cap
    for inst in mod.insts:
        ipath = f"{path}.{inst.name}"
        if inst.type in table:
            if inst.type in stack:
                raise ParseError(f"recursive instantiation of '{inst.type}'", inst.line, inst.col)
            child = table[inst.type]
            cbind: Dict[str, str] = {}
            for pin, ref, line, col in inst.conns:
                if pin not in child.ports:
                    raise ParseError(f"module '{child.name}' has no port '{pin}'", line, col)
                if ref is None:
                    continue
                pbits = _port_bits(child, pin)
                rbits = _ref_bits(mod, ref)
                if len(pbits) != len(rbits):
                    raise ParseError(f"width mismatch on port '{pin}'", line, col)
                for pb, rb in zip(pbits, rbits):
                    if rb not in local:
                        raise DanglingNetError(rb, f"undeclared net reference (line {line}, col {col})")
                    cbind[pb] = local[rb]
            _elaborate(table, child, ipath, cbind, b, library, stack + [inst.type])
        elif inst.type in library:
            lib = library[inst.type]
            pins: Dict[str, str] = {}
            for pin, ref, line, col in inst.conns:
                if pin not in lib.pins:
                    raise ParseError(f"cell '{lib.name}' has no pin '{pin}'", line, col)
                if ref is None:
                    raise ParseError(f"pin '{pin}' of '{inst.name}' is unconnected", line, col)
                bits = _ref_bits(mod, ref)
                if len(bits) != 1:
                    raise ParseError(f"pin '{pin}' needs a scalar net", line, col)
                if bits[0] not in local:
                    raise DanglingNetError(bits[0], f"undeclared net reference (line {line}, col {col})")
                pins[pin] = local[bits[0]]
            missing = [p for p in lib.pins if p not in pins]
            if missing:
                raise ParseError(f"instance '{inst.name}' leaves pins {missing} unconnected",
                                 inst.line, inst.col)
            b.add_cell(ipath, lib.name, [pins[p] for p in lib.inputs], pins[lib.output],
                       pins[lib.clock_pin] if lib.clock_pin else None)
        else:
            raise UnknownCellError(f"unknown cell or module '{inst.type}' (line {inst.line}, col {inst.col})")


# -- writer -----------------------------------------------------------------------

def _port_name(net: str) -> str:
    return "p_" + net.replace(".", "__")


def write_netlist(netlist: Netlist, library: Library) -> str:
    """Serialise to the structural subset, reconstructing one module per hierarchy path."""
    top = netlist.top
    names = [n.name for n in netlist.nets]
    hier = list(netlist.hierarchy)
    hset = set(hier)
    children: Dict[str, List[str]] = {h: [] for h in hier}
    for h in hier:
        if h != top:
            parent = h.rsplit(".", 1)[0]
            if parent not in hset:
                raise NetlistError(f"hierarchy path '{h}' has no parent")
            children[parent].append(h)
    direct: Dict[str, List[int]] = {h: [] for h in hier}
    uses: Dict[str, Set[int]] = {h: set() for h in hier}
    drives: Dict[str, Set[int]] = {h: set() for h in hier}
    user_scopes: Dict[int, Set[str]] = {}
    for c in netlist.cells:
        direct[c.scope].append(c.id)
        nets = list(c.input_nets) + [c.output_net] + ([c.clock_net] if c.clock_net is not None else [])
        for n in nets:
            user_scopes.setdefault(n, set()).add(c.scope)
        parts = c.scope.split(".")
        for k in range(1, len(parts) + 1):
            h = ".".join(parts[:k])
            uses[h].update(nets)
            drives[h].add(c.output_net)
    for n, scopes in user_scopes.items():
        owner = net_owner(names[n], top)
        if owner not in hset:
            raise NetlistError(f"net '{names[n]}' belongs to unknown scope '{owner}'")
        for s in scopes:
            if not is_under(s, owner):
                raise NetlistError(f"net '{names[n]}' is used in '{s}' outside its owner '{owner}'")
    for n in list(netlist.primary_inputs) + list(netlist.primary_outputs):
        if net_owner(names[n], top) != top:
            raise NetlistError(f"port net '{names[n]}' must live in the top module")

    owned: Dict[str, List[int]] = {h: [] for h in hier}
    for n in netlist.nets:
        owned[net_owner(n.name, top)].append(n.id)

    count: Dict[str, int] = {}
    for h in hier:
        mn = netlist.module_names.get(h, h)
        count[mn] = count.get(mn, 0) + 1
    modname = {}
    for h in hier:
        mn = netlist.module_names.get(h, h)
        modname[h] = top if h == top else (mn if count[mn] == 1 and mn != top else h.replace(".", "__"))

    ports: Dict[str, List[int]] = {}
    for h in hier:
        if h != top:
            ports[h] = sorted((n for n in uses[h] if not is_under(net_owner(names[n], top), h)),
                              key=lambda i: names[i])

    def local(h: str, n: int) -> str:
        owner = net_owner(names[n], top)
        if owner == h:
            return names[n] if h == top else names[n][len(h) - len(top):]
        return _port_name(names[n])

    out: List[str] = []
    order = sorted(hier, key=lambda h: -h.count("."))
    for h in order:
        if h == top:
            attrs = f'(* stage = "{netlist.stage.value}" *)\n' if netlist.stage != Stage.G else ""
            plist = [names[i] for i in netlist.primary_inputs] + [names[i] for i in netlist.primary_outputs]
            out.append(f"{attrs}module {top} ({', '.join(plist)});")
            for i in netlist.primary_inputs:
                out.append(_decl("input", names[i], netlist.nets[i].wire_cap))
            for i in netlist.primary_outputs:
                out.append(_decl("output", names[i], netlist.nets[i].wire_cap))
            portset = set(netlist.primary_inputs) | set(netlist.primary_outputs)
        else:
            plist = [_port_name(names[i]) for i in ports[h]]
            out.append(f"module {modname[h]} ({', '.join(plist)});")
            for i in ports[h]:
                out.append(_decl("output" if i in drives[h] else "input", _port_name(names[i]), 0.0))
            portset = set(ports[h])
        for i in owned[h]:
            if i not in portset:
                out.append(_decl("wire", local(h, i), netlist.nets[i].wire_cap))
        for cid in direct[h]:
            c = netlist.cells[cid]
            out.append(_cell_line(c, h, local, library))
        for ch in children[h]:
            conns = ", ".join(f".{_port_name(names[i])}({local(h, i)})" for i in ports[ch])
            out.append(f"  {modname[ch]} {ch.rsplit('.', 1)[1]} ({conns});")
        out.append("endmodule\n")
    return "\n".join(out)


def _decl(kind: str, name: str, cap: float) -> str:
    attr = f"(* wire_cap = {cap!r} *) " if cap else ""
    return f"  {attr}{kind} {name};"


def _cell_line(c, h, local, library: Library) -> str:
    lib = library[c.lib_cell]
    conns = [f".{p}({local(h, n)})" for p, n in zip(lib.inputs, c.input_nets)]
    if lib.clock_pin:
        conns.append(f".{lib.clock_pin}({local(h, c.clock_net)})")
    conns.append(f".{lib.output}({local(h, c.output_net)})")
    return f"  {c.lib_cell} {c.instance_path.rsplit('.', 1)[1]} ({', '.join(conns)});"
