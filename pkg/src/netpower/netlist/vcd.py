"""VCD subset reader/writer and the per-cycle toggle trace type."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .types import Netlist, NetlistError


class VcdError(NetlistError):
    pass


@dataclass(frozen=True)
class ToggleTrace:
    """``bits[i, c]`` is 1 when net ``names[i]`` changed during cycle ``c``."""

    names: tuple
    bits: np.ndarray  # uint8, shape (n_nets, n_cycles)

    @property
    def n_cycles(self) -> int:
        return int(self.bits.shape[1])

    def __post_init__(self):
        if self.bits.ndim != 2 or self.bits.shape[0] != len(self.names):
            raise ValueError("trace shape does not match names")

    def row(self, name: str) -> np.ndarray:
        return self.bits[self.names.index(name)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ToggleTrace):
            return NotImplemented
        return self.names == other.names and np.array_equal(self.bits, other.bits)

    __hash__ = None  # type: ignore[assignment]


def parse_vcd(source: str, clock_period: int, netlist: Optional[Netlist] = None,
              n_cycles: Optional[int] = None) -> ToggleTrace:
    """Sample value changes into cycle windows ``[c*T, (c+1)*T)``.

    Every signal starts at 0.  A cycle toggles when any value change inside
    its window actually flips the bit.  With ``netlist`` given, rows follow the
    netlist's net ids and every VCD signal must name one of its nets.
    """
    if clock_period <= 0:
        raise VcdError("clock_period must be positive")
    words = source.split()
    codes: Dict[str, int] = {}
    names: List[str] = []
    scopes: List[str] = []
    i = 0
    while i < len(words):
        w = words[i]
        if w == "$enddefinitions":
            i = _skip_end(words, i)
            break
        if w == "$scope":
            scopes.append(words[i + 2])
            i = _skip_end(words, i)
        elif w == "$upscope":
            if scopes:
                scopes.pop()
            i = _skip_end(words, i)
        elif w == "$var":
            end = _skip_end(words, i)
            body = words[i + 1:end - 1]
            if len(body) < 4:
                raise VcdError("malformed $var declaration")
            if body[1] != "1":
                raise VcdError(f"only 1-bit signals are supported (got width {body[1]})")
            code, ref = body[2], body[3]
            full = ".".join(scopes[1:] + [ref])
            if code in codes:
                raise VcdError(f"duplicate identifier code '{code}'")
            codes[code] = len(names)
            names.append(full)
            i = end
        elif w.startswith("$"):
            i = _skip_end(words, i)
        else:
            raise VcdError(f"unexpected token '{w}' in header")
    else:
        raise VcdError("missing $enddefinitions")

    events: List[tuple] = []  # (time, signal, value)
    t = 0
    last_t = -1
    for w in words[i:]:
        if w.startswith("#"):
            t = int(w[1:])
            if t < last_t:
                raise VcdError(f"non-monotonic timestamp #{t} after #{last_t}")
            last_t = t
        elif w in ("$dumpvars", "$end", "$dumpall", "$dumpon", "$dumpoff"):
            continue
        elif w[0] in "01xXzZ":
            code = w[1:]
            if code not in codes:
                raise VcdError(f"unknown identifier code '{code}'")
            if w[0] not in "01":
                raise VcdError("only two-valued signals are supported")
            events.append((t, codes[code], int(w[0])))
        else:
            raise VcdError(f"unsupported value change '{w}'")

    if n_cycles is None:
        n_cycles = (last_t // clock_period + 1) if last_t >= 0 else 0
    bits = np.zeros((len(names), n_cycles), dtype=np.uint8)
    cur = np.zeros(len(names), dtype=np.uint8)
    for t, s, v in events:
        c = t // clock_period
        if v != cur[s]:
            cur[s] = v
            if c < n_cycles:
                bits[s, c] = 1

    if netlist is None:
        return ToggleTrace(tuple(names), bits)
    out = np.zeros((len(netlist.nets), n_cycles), dtype=np.uint8)
    for k, name in enumerate(names):
        if name not in netlist.net_index:
            raise VcdError(f"VCD signal '{name}' does not name a netlist net")
        out[netlist.net_index[name]] = bits[k]
    return ToggleTrace(tuple(n.name for n in netlist.nets), out)


def _skip_end(words: Sequence[str], i: int) -> int:
    while i < len(words) and words[i] != "$end":
        i += 1
    if i == len(words):
        raise VcdError("unterminated header section")
    return i + 1


def _code(k: int) -> str:
    chars = [chr(c) for c in range(33, 127)]
    out = ""
    k += 1
    while k:
        k, r = divmod(k - 1, len(chars))
        out = chars[r] + out
    return out


def write_vcd(names: Sequence[str], values: np.ndarray, clock_period: int = 1000,
              timescale: str = "1ps", top: str = "top") -> str:
    """Emit ``values[i, c]`` (0/1) as a VCD with one change per cycle boundary."""
    lines = [f"$timescale {timescale} $end", f"$scope module {top} $end"]
    codes = [_code(k) for k in range(len(names))]
    for code, name in zip(codes, names):
        lines.append(f"$var wire 1 {code} {name} $end")
    lines += ["$upscope $end", "$enddefinitions $end"]
    n_cycles = values.shape[1] if values.ndim == 2 else 0
    prev = np.zeros(len(names), dtype=np.uint8)
    for c in range(n_cycles):
        col = values[:, c]
        changed = np.nonzero(col != prev)[0]
        if len(changed) or c == 0:
            lines.append(f"#{c * clock_period}")
            lines.extend(f"{int(col[k])}{codes[k]}" for k in changed)
        prev = col
    if n_cycles:
        lines.append(f"#{n_cycles * clock_period - 1}")
    return "\n".join(lines) + "\n"
