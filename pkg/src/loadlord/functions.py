"""Function boundaries and the legal-address table.

Boundaries are seeded from (in priority order) an ingested boundary file, the
ELF symbol table, or a heuristic over the decoded stream.  Every direct call
whose target lands strictly inside a function then splits that function at
the target, until no such call remains.
"""

from __future__ import annotations

import bisect
import dataclasses
import logging
from typing import Iterable, Sequence

from .errors import EmptyCodeRegion, OverlappingFunctions, ParseError
from .image import LoadableImage
from .x86 import Instruction

log = logging.getLogger(__name__)

SYMBOL_SEED = "symbol-seed"
HEURISTIC_SEED = "heuristic-seed"
CALL_SPLIT = "call-split"

# push rbp; mov rbp, rsp  /  endbr64
_PROLOGUES = (b"\x55\x48\x89\xe5", b"\xf3\x0f\x1e\xfa")


@dataclasses.dataclass(frozen=True)
class FunctionRecord:
    id: int
    start: int
    end: int
    provenance: str
    name: str | None = None

    @property
    def size(self) -> int:
        return self.end - self.start

    def contains(self, vaddr: int) -> bool:
        return self.start <= vaddr < self.end


class FunctionMap:
    """Non-overlapping function extents sorted by start address."""

    def __init__(self, records: Iterable[FunctionRecord]):
        self.records: list[FunctionRecord] = sorted(records, key=lambda r: r.start)
        self._starts = [r.start for r in self.records]
        self._by_id = {r.id: r for r in self.records}
        for a, b in zip(self.records, self.records[1:]):
            if a.end > b.start:
                raise OverlappingFunctions(
                    f"functions at {a.start:#x} and {b.start:#x} overlap")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FunctionMap) and self.records == other.records

    def __getitem__(self, fid: int) -> FunctionRecord:
        return self._by_id[fid]

    def __contains__(self, fid: object) -> bool:
        return fid in self._by_id

    @property
    def ids(self) -> list[int]:
        return [r.id for r in self.records]

    def owning(self, vaddr: int) -> FunctionRecord | None:
        i = bisect.bisect_right(self._starts, vaddr) - 1
        if i >= 0 and self.records[i].contains(vaddr):
            return self.records[i]
        return None

    def extents(self) -> list[tuple[int, int]]:
        return [(r.start, r.end) for r in self.records]

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "records": [
                {"id": r.id, "start": f"{r.start:#x}", "end": f"{r.end:#x}",
                 "provenance": r.provenance, "name": r.name}
                for r in self.records
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> FunctionMap:
        return cls(FunctionRecord(r["id"], int(r["start"], 16), int(r["end"], 16),
                                  r["provenance"], r.get("name"))
                   for r in doc["records"])


def owning_function(fmap: FunctionMap, vaddr: int) -> FunctionRecord | None:
    return fmap.owning(vaddr)


@dataclasses.dataclass(frozen=True)
class LegalAddressTable:
    function_starts: frozenset[int]
    call_returns: frozenset[int]
    cross_jump_targets: frozenset[int]

    def is_legal(self, addr: int) -> bool:
        return (addr in self.function_starts or addr in self.call_returns
                or addr in self.cross_jump_targets)

    def classify(self, addr: int) -> str | None:
        """Which legal class an address belongs to, first match wins."""
        if addr in self.function_starts:
            return "function_start"
        if addr in self.call_returns:
            return "call_return"
        if addr in self.cross_jump_targets:
            return "cross_jump_target"
        return None

    def to_json(self) -> dict:
        def hexes(s):
            return [f"{a:#x}" for a in sorted(s)]
        return {
            "schema_version": 1,
            "function_starts": hexes(self.function_starts),
            "call_returns": hexes(self.call_returns),
            "cross_jump_targets": hexes(self.cross_jump_targets),
        }

    @classmethod
    def from_json(cls, doc: dict) -> LegalAddressTable:
        def addrs(key):
            return frozenset(int(a, 16) for a in doc[key])
        return cls(addrs("function_starts"), addrs("call_returns"), addrs("cross_jump_targets"))


def parse_seed_file(text: str) -> list[tuple[int, int, str | None]]:
    """Parse ``hex_start hex_end [name]`` lines; blank lines and ``#`` comments are skipped."""
    seeds = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ParseError(f"expected 'start end [name]', got {raw!r}", lineno)
        try:
            start, end = int(parts[0], 16), int(parts[1], 16)
        except ValueError:
            raise ParseError(f"bad hex address in {raw!r}", lineno) from None
        if start >= end:
            raise ParseError(f"empty extent {raw!r}", lineno)
        seeds.append((start, end, parts[2] if len(parts) == 3 else None))
    return seeds


def _symbol_seeds(image: LoadableImage) -> list[tuple[int, int, str | None]]:
    syms = [s for s in image.symbols if image.is_executable(s.value)]
    starts = sorted({s.value for s in syms})
    seeds = []
    for i, start in enumerate(starts):
        seg = image.segment_for(start)
        aliases = [s for s in syms if s.value == start]
        sized = [s for s in aliases if s.size]
        if sized:
            # aliases at one address must describe one extent
            if len({s.size for s in sized}) > 1:
                raise OverlappingFunctions(f"conflicting symbol sizes at {start:#x}")
            end, name = start + sized[0].size, sized[0].name
        else:
            end = starts[i + 1] if i + 1 < len(starts) else seg.end
            name = aliases[0].name
        seeds.append((start, min(end, seg.end), name))
    return seeds


def _heuristic_seeds(image: LoadableImage, instrs: Sequence[Instruction]) -> list[tuple[int, int, str | None]]:
    points = {image.entry}
    for seg in image.executable_segments:
        points.add(seg.vaddr)
    for ins in instrs:
        if ins.op_class == "call_dir" and image.is_executable(ins.target):
            points.add(ins.target)
    code = {(s.vaddr, s.end): s for s in image.executable_segments}
    for ins in instrs:
        for (lo, hi), seg in code.items():
            if lo <= ins.vaddr < hi:
                off = ins.vaddr - lo
                if any(seg.data.startswith(p, off) for p in _PROLOGUES):
                    points.add(ins.vaddr)
                break
    ordered = sorted(points)
    seeds = []
    for i, start in enumerate(ordered):
        seg = image.segment_for(start)
        end = seg.end
        if i + 1 < len(ordered) and ordered[i + 1] < end:
            end = ordered[i + 1]
        seeds.append((start, end, None))
    return seeds


def identify_functions(image: LoadableImage, instrs: Sequence[Instruction],
                       seeds: Sequence[tuple[int, int, str | None]] | None = None) -> FunctionMap:
    if not any(i.valid for i in instrs):
        raise EmptyCodeRegion("no decodable instructions in the executable segments")

    if seeds is not None:
        extents = [(s, e, n, SYMBOL_SEED) for s, e, n in seeds]
    elif image.symbols and (sym := _symbol_seeds(image)):
        extents = [(s, e, n, SYMBOL_SEED) for s, e, n in sym]
        covered = any(s <= image.entry < e for s, e, _n, _p in extents)
        if not covered:
            nxt = min((s for s, *_ in extents if s > image.entry),
                      default=image.segment_for(image.entry).end)
            extents.append((image.entry, nxt, None, HEURISTIC_SEED))
    else:
        extents = [(s, e, n, HEURISTIC_SEED) for s, e, n in _heuristic_seeds(image, instrs)]
    extents.sort()
    for a, b in zip(extents, extents[1:]):
        if a[1] > b[0]:
            raise OverlappingFunctions(f"seed extents at {a[0]:#x} and {b[0]:#x} overlap")

    targets = sorted({i.target for i in instrs if i.op_class == "call_dir"})
    for t in targets:
        if not image.is_executable(t):
            log.warning("call target %#x is not executable; treated as data", t)

    # split until no call target lies strictly inside an extent
    changed = True
    while changed:
        changed = False
        out = []
        for start, end, name, prov in extents:
            inner = targets[bisect.bisect_right(targets, start):bisect.bisect_left(targets, end)]
            if not inner:
                out.append((start, end, name, prov))
                continue
            changed = True
            cuts = [start, *inner, end]
            out.append((start, inner[0], name, prov))
            for lo, hi in zip(cuts[1:-1], cuts[2:]):
                out.append((lo, hi, None, CALL_SPLIT))
        extents = out

    for t in targets:
        if image.is_executable(t) and not any(s <= t < e for s, e, *_ in extents):
            log.warning("call target %#x lies outside every function extent", t)

    return FunctionMap(FunctionRecord(i, s, e, p, n) for i, (s, e, n, p) in enumerate(sorted(extents)))


def build_legal_addresses(fmap: FunctionMap, instrs: Sequence[Instruction]) -> LegalAddressTable:
    starts = frozenset(r.start for r in fmap.records)
    returns = set()
    cross = set()
    for ins in instrs:
        if ins.op_class in ("call_dir", "call_ind"):
            ret = ins.next_addr
            # a return address outside every function can never be reloaded
            if fmap.owning(ret) is not None:
                returns.add(ret)
        elif ins.op_class == "jmp_dir" and ins.target is not None:
            dst = fmap.owning(ins.target)
            src = fmap.owning(ins.vaddr)
            if dst is not None and dst is not src:
                cross.add(ins.target)
    return LegalAddressTable(starts, frozenset(returns), frozenset(cross))
