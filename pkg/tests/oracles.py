"""Reference implementations the package is checked against.

Each oracle is written separately from the code under test, favouring the
most direct formulation over speed.
"""

from __future__ import annotations

import re
import shutil
import subprocess
from fractions import Fraction

from loadlord.x86 import decode

TERMINATOR_CLASSES = {"ret", "jmp_ind", "call_ind", "syscall"}


# --- gadgets ---------------------------------------------------------------


def brute_force_gadgets(code: bytes, base: int, max_len: int = 5) -> set[tuple[int, str]]:
    """Decode forward from every offset; keep starts that reach a terminator cleanly."""
    out = set()
    for start in range(len(code)):
        off = start
        for _ in range(max_len):
            if off >= len(code):
                break
            ins = decode(code, off, base + off)
            if ins.op_class in TERMINATOR_CLASSES and ins.valid:
                out.add((base + start, ins.op_class))
                break
            if ins.breaks_flow:
                break
            off += ins.length
    return out


# --- policy ----------------------------------------------------------------


def _counts(gadgets, lo, hi):
    c = {"LoadMemG": 0, "SYSG": 0, "JumpG": 0, "total": 0}
    for start, classes in gadgets:
        if lo <= start < hi:
            c["total"] += 1
            for k in ("LoadMemG", "SYSG", "JumpG"):
                c[k] += k in classes
    return c


def _chain(counts_list, predicate):
    lm = sum(c["LoadMemG"] for c in counts_list)
    other = sum(c["SYSG"] + c["JumpG"] for c in counts_list)
    return lm > 0 and (predicate == "loadmem_only" or other > 0)


class ReferencePolicy:
    """Plain-list restatement of the residency rules.

    ``functions`` is a list of (start, end); ``gadgets`` a list of (start, classes).
    """

    def __init__(self, functions, gadgets, legal, limit, semantic=True,
                 predicate="loadmem_and_sysg"):
        self.functions = sorted(functions)
        self.counts = [_counts(gadgets, lo, hi) for lo, hi in self.functions]
        self.legal = set(legal)
        self.limit = limit
        self.semantic = semantic
        self.predicate = predicate
        self.resident: list[int] = []  # oldest first
        self.residual = False

    def owner(self, addr):
        for i, (lo, hi) in enumerate(self.functions):
            if lo <= addr < hi:
                return i
        return None

    def survive(self):
        return sum(self.counts[i]["total"] for i in self.resident)

    def chain_capable(self):
        return _chain([self.counts[i] for i in self.resident], self.predicate)

    def request(self, addr):
        self.residual = False
        if addr not in self.legal:
            return "violation"
        f = self.owner(addr)
        if f in self.resident:
            return "already_resident"
        while len(self.resident) >= self.limit:
            self.resident.pop(0)
        self.resident.append(f)
        if self.semantic:
            self._unload(f)
        return "loaded"

    def _unload(self, me):
        mine = self.counts[me]
        if _chain([mine], self.predicate):
            self.resident = [i for i in self.resident if i == me or not (
                self.counts[i]["LoadMemG"] or self.counts[i]["SYSG"] or self.counts[i]["JumpG"])]
            self.residual = True
            return
        while self.chain_capable():
            if mine["LoadMemG"] == 0:
                pool = [i for i in self.resident if i != me and self.counts[i]["LoadMemG"]]
            else:
                pool = [i for i in self.resident if i != me
                        and (self.counts[i]["SYSG"] or self.counts[i]["JumpG"])]
            best = max(self.counts[i]["LoadMemG"] for i in pool)
            victim = next(i for i in pool if self.counts[i]["LoadMemG"] == best)
            self.resident.remove(victim)


def reference_replay(art, trace, limit, semantic=True, predicate="loadmem_and_sysg"):
    """Per-event resident totals for a trace, from the reference policy."""
    ref = ReferencePolicy([(r.start, r.end) for r in art.fmap.records],
                          [(g.start, g.classes) for g in art.index.gadgets() if g.owner is not None],
                          art.legal.function_starts | art.legal.call_returns
                          | art.legal.cross_jump_targets,
                          limit, semantic, predicate)
    series = []
    residents = []
    for ev in trace:
        ref.request(ev.addr)
        series.append(ref.survive())
        residents.append(list(ref.resident))
    return series, residents


# --- arithmetic ------------------------------------------------------------


def reduction_oracle(total: int, survive: int) -> Fraction:
    """Exact reduction percentage."""
    return 100 - Fraction(100 * survive, total)


def round_half_up_2(x: Fraction) -> Fraction:
    scaled = x * 100
    floor = scaled.numerator // scaled.denominator
    frac = scaled - floor
    return Fraction(floor + (1 if frac >= Fraction(1, 2) else 0), 100)


# --- toolchain oracles -------------------------------------------------------


def have(tool: str) -> bool:
    return shutil.which(tool) is not None


def readelf_load_segments(path) -> list[tuple[int, int, int, str]]:
    """(vaddr, filesz, memsz, flags) per PT_LOAD, from readelf."""
    text = subprocess.run(["readelf", "-lW", str(path)], check=True, capture_output=True,
                          text=True).stdout
    out = []
    for line in text.splitlines():
        parts = line.split()
        if parts and parts[0] == "LOAD":
            flags = "".join(parts[6:-1]).replace(" ", "")
            out.append((int(parts[2], 16), int(parts[4], 16), int(parts[5], 16), flags))
    return out


def objdump_lengths(path) -> dict[int, int]:
    """Instruction address -> length from objdump's raw-byte column."""
    text = subprocess.run(["objdump", "-d", "--insn-width=16", str(path)], check=True,
                          capture_output=True, text=True).stdout
    out = {}
    for line in text.splitlines():
        m = re.match(r"^\s+([0-9a-f]+):\t((?:[0-9a-f]{2} )+)", line)
        if m:
            out[int(m.group(1), 16)] = len(m.group(2).split())
    return out
