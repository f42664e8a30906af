"""Instruction streams, gadget discovery and gadget classification.

A gadget is a run of at most ``max_len`` instructions that ends in a
terminator (``ret``, indirect ``jmp``/``call``, ``syscall``) and contains no
other control transfer.  Every byte offset is a potential start, so gadgets
hidden inside longer instructions are found as well.
"""

from __future__ import annotations

import dataclasses
import re
from collections import Counter
from typing import Iterable, Sequence

from .errors import ParseError
from .functions import FunctionMap
from .image import LoadableImage, Segment, bytes_at
from .x86 import Imm, Instruction, Mem, Reg, bad, canonical_reg, decode

CLASSES = ("ArithmeticG", "LoadMemG", "StoreMemG", "MoveRegG", "SYSG", "JumpG")

DEFAULT_MAX_LEN = 5
WINDOW_PER_SLOT = 16


@dataclasses.dataclass(frozen=True)
class Gadget:
    start: int
    instrs: tuple[Instruction, ...]
    terminator: str
    classes: frozenset[str] = frozenset()
    owner: int | None = None

    @property
    def end(self) -> int:
        last = self.instrs[-1]
        return last.vaddr + last.length

    @property
    def terminator_addr(self) -> int:
        return self.instrs[-1].vaddr

    def text(self) -> str:
        return "; ".join(_render(i) for i in self.instrs)


def _render(ins: Instruction) -> str:
    def op(o):
        if isinstance(o, Reg):
            return o.name
        if isinstance(o, Mem):
            base = o.base or ""
            if o.offset:
                sign = "+" if o.offset > 0 and base else ("-" if o.offset < 0 else "")
                return f"[{base}{sign}{abs(o.offset):#x}]" if base else f"[{o.offset:#x}]"
            return f"[{base}]"
        if isinstance(o, Imm):
            return f"{o.value:#x}"
        return ""
    ops = [x for x in (op(ins.dst), op(ins.src)) if x]
    if ins.op_class in ("push", "pop"):
        ops = [op(ins.src if ins.op_class == "push" else ins.dst)]
    elif ins.op_class in ("call_dir", "jmp_dir") and ins.target is not None:
        ops = [f"{ins.target:#x}"]
    return (ins.mnemonic + " " + ", ".join(o for o in ops if o)).strip()


# --- instruction streams -------------------------------------------------


class SegmentDecoder:
    """Memoising decoder over one executable segment (mem_size tail reads as zeros)."""

    def __init__(self, seg: Segment, image: LoadableImage | None = None):
        self.base = seg.vaddr
        self.code = bytes_at(image, seg.vaddr, seg.mem_size) if image is not None else seg.data
        self._cache: dict[int, Instruction] = {}

    def __len__(self) -> int:
        return len(self.code)

    def at(self, off: int) -> Instruction:
        ins = self._cache.get(off)
        if ins is None:
            ins = decode(self.code, off, self.base + off)
            self._cache[off] = ins
        return ins


def decode_stream(image: LoadableImage) -> list[Instruction]:
    """Linear-sweep decode of every executable segment."""
    out = []
    for seg in image.executable_segments:
        dec = SegmentDecoder(seg, image)
        off = 0
        while off < len(dec):
            ins = dec.at(off)
            out.append(ins)
            off += ins.length
    return out


# mnemonic -> op_class for the listing path; operand shapes refine mov/add/sub
_LISTING_SIMPLE = {
    "ret": "ret", "retq": "ret", "retn": "ret",
    "syscall": "syscall",
    "push": "push", "pushq": "push", "pushf": "push", "pushfq": "push",
    "leave": "load_mem", "leaveq": "load_mem",
}
_LISTING_ARITH = {"add", "sub", "and", "or", "xor", "adc", "sbb", "imul", "lea", "inc", "dec",
                  "neg", "not", "shl", "shr", "sal", "sar", "rol", "ror", "rcl", "rcr",
                  "mul", "div", "idiv"}
_LISTING_MOVES = {"mov", "movabs", "movzx", "movsx", "movsxd", "xchg"}
_LISTING_JCC = re.compile(r"^(j(?!mp)[a-z]+|loop[a-z]*)$")
_LINE = re.compile(r"^\s*(?:0x)?([0-9a-fA-F]+):\s+((?:[0-9a-fA-F]{2}\s)+)\s*(\S.*)?$")
_SIZE_PTR = re.compile(r"\b(?:byte|word|dword|qword|xmmword|ymmword|zmmword|tbyte|fword)\s+ptr\b",
                       re.IGNORECASE)
_SEG_OVERRIDE = re.compile(r"\b[cdefgs]s:", re.IGNORECASE)
_PREFIXES = {"lock", "rep", "repz", "repe", "repnz", "repne", "bnd", "notrack", "data16", "addr32",
             "cs", "ds", "es", "fs", "gs", "ss", "rex", "rex.w"}


def _parse_int(tok: str) -> int:
    # listing numerals are hexadecimal with or without 0x, like the addresses
    tok = tok.strip().lower()
    neg = tok.startswith("-")
    tok = tok.lstrip("+-").strip().removesuffix("h")
    val = int(tok, 16)
    return -val if neg else val


def _parse_operand(text: str):
    text = _SEG_OVERRIDE.sub("", _SIZE_PTR.sub("", text)).strip()
    if not text:
        return None
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].replace(" ", "")
        base, offset = None, 0
        for term in re.findall(r"[+-]?[^+-]+", inner):
            sign = -1 if term.startswith("-") else 1
            body = term.lstrip("+-")
            reg = canonical_reg(body)
            if reg is not None or body == "rip":
                if base is None:
                    base = reg or "rip"
            elif "*" in body:
                continue  # scaled index does not change the base/offset role
            else:
                offset += sign * _parse_int(body)
        return Mem(base, offset)
    reg = canonical_reg(text)
    if reg is not None:
        return Reg(reg)
    m = re.match(r"^([-+]?(?:0x)?[0-9a-fA-F]+)\b", text)
    if m:
        try:
            return Imm(_parse_int(m.group(1)))
        except ValueError:
            return None
    return None


def _split_operands(text: str) -> list[str]:
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur)
    return [p.strip() for p in parts]


def _listing_record(vaddr: int, length: int, mnemonic: str, operands: str) -> Instruction:
    ops = _split_operands(operands.split("<", 1)[0]) if operands else []
    roles = [_parse_operand(o) for o in ops]
    dst = roles[0] if roles else None
    src = roles[1] if len(roles) > 1 else None

    if mnemonic in ("(bad)", ".byte"):
        return bad(vaddr)
    if mnemonic in _LISTING_SIMPLE:
        cls = _LISTING_SIMPLE[mnemonic]
        if cls == "ret":
            return Instruction(vaddr, length, "ret", "ret", None, dst)
        if cls == "push":
            return Instruction(vaddr, length, "push", mnemonic, Mem("rsp", -8), dst)
        return Instruction(vaddr, length, "load_mem", "leave", Reg("rbp"), Mem("rbp", 0))
    if mnemonic in ("pop", "popq"):
        if isinstance(dst, Reg):
            return Instruction(vaddr, length, "pop", "pop", dst, Mem("rsp", 0))
        return Instruction(vaddr, length, "other", "pop")
    if mnemonic in ("call", "callq", "jmp", "jmpq") or _LISTING_JCC.match(mnemonic):
        kind = "call" if mnemonic.startswith("call") else "jmp"
        if isinstance(dst, (Reg, Mem)):
            return Instruction(vaddr, length, f"{kind}_ind", kind, None, dst)
        target = dst.value if isinstance(dst, Imm) else None
        if target is None:
            return Instruction(vaddr, length, "other", mnemonic)
        name = kind if kind == "call" or mnemonic.startswith("jmp") else \
            ("loop" if mnemonic.startswith("loop") else "jcc")
        return Instruction(vaddr, length, f"{kind}_dir", name, target=target & 0xFFFFFFFFFFFFFFFF)
    if mnemonic in _LISTING_MOVES:
        name = "mov" if mnemonic == "movabs" else mnemonic
        if isinstance(dst, Reg) and isinstance(src, (Reg, Imm)):
            return Instruction(vaddr, length, "move_reg", name, dst, src)
        if isinstance(dst, Reg) and isinstance(src, Mem) and mnemonic != "xchg":
            return Instruction(vaddr, length, "load_mem", name, dst, src)
        if isinstance(dst, Mem) and isinstance(src, (Reg, Imm)) and mnemonic != "xchg":
            return Instruction(vaddr, length, "store_mem", name, dst, src)
        return Instruction(vaddr, length, "other", name)
    if mnemonic in _LISTING_ARITH:
        if mnemonic in ("mul", "div", "idiv") or (mnemonic == "imul" and len(roles) == 1):
            return Instruction(vaddr, length, "arith", mnemonic, Reg("rax"), dst)
        if isinstance(dst, Reg):
            if mnemonic in ("add", "sub") and isinstance(src, Mem):
                return Instruction(vaddr, length, "load_mem", mnemonic, dst, src)
            if mnemonic in ("inc", "dec", "neg", "not"):
                src = dst
            return Instruction(vaddr, length, "arith", mnemonic, dst, src)
        if isinstance(dst, Mem) and isinstance(src, (Reg, Imm)) and mnemonic not in (
                "lea", "imul", "shl", "shr", "sal", "sar", "rol", "ror", "rcl", "rcr"):
            return Instruction(vaddr, length, "store_mem", mnemonic, dst, src)
        return Instruction(vaddr, length, "other", mnemonic)
    return Instruction(vaddr, length, "other", mnemonic)


def ingest_listing(text: str) -> list[Instruction]:
    """Parse ``hex_vaddr: hex_bytes  mnemonic operands`` lines into an instruction stream.

    Numerals are hexadecimal with or without a ``0x`` prefix.  Blank lines and
    lines starting with ``#`` are skipped.  Size keywords
    (``QWORD PTR``), segment overrides and ``<symbol>`` annotations are accepted
    so Intel-syntax objdump output can be fed in after trimming headers.
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        m = _LINE.match(raw.rstrip() + " ")
        if m is None:
            raise ParseError(f"unrecognised listing line {raw!r}", lineno)
        vaddr = int(m.group(1), 16)
        length = len(m.group(2).split())
        asm = (m.group(3) or "").strip()
        if not asm:
            raise ParseError("missing mnemonic", lineno)
        words = asm.split(None, 1)
        while words and words[0].lower() in _PREFIXES and len(words) > 1:
            words = words[1].split(None, 1)
        mnemonic = words[0].lower()
        operands = words[1] if len(words) > 1 else ""
        try:
            out.append(_listing_record(vaddr, length, mnemonic, operands))
        except ValueError as exc:
            raise ParseError(f"bad operand in {raw!r}: {exc}", lineno) from None
    return out


# --- gadget scanning -----------------------------------------------------


def _walk(dec: SegmentDecoder, start: int, stop: int, budget: int) -> list[Instruction] | None:
    """Instructions from ``start`` up to offset ``stop`` if they chain there cleanly."""
    seq = []
    off = start
    while off < stop:
        if len(seq) == budget:
            return None
        ins = dec.at(off)
        if ins.breaks_flow:
            return None
        seq.append(ins)
        off += ins.length
    return seq if off == stop else None


def scan_segment(dec: SegmentDecoder, max_len: int = DEFAULT_MAX_LEN) -> list[Gadget]:
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    found: dict[int, Gadget] = {}
    window = WINDOW_PER_SLOT * (max_len - 1)
    for p in range(len(dec)):
        term = dec.at(p)
        if term.terminator is None:
            continue
        for s in range(p, max(0, p - window) - 1, -1):
            seq = _walk(dec, s, p, max_len - 1)
            if seq is None:
                continue
            instrs = (*seq, term)
            g = Gadget(dec.base + s, instrs, term.terminator)
            found.setdefault(g.start, dataclasses.replace(g, classes=classify_gadget(g)))
    return [found[k] for k in sorted(found)]


def scan_gadgets(image: LoadableImage, max_len: int = DEFAULT_MAX_LEN) -> list[Gadget]:
    out = []
    for seg in image.executable_segments:
        out.extend(scan_segment(SegmentDecoder(seg, image), max_len))
    out.sort(key=lambda g: g.start)
    return out


def instruction_class(ins: Instruction) -> str | None:
    """The gadget class a single non-terminator instruction contributes, if any."""
    dst, src = ins.dst, ins.src
    if ins.op_class == "arith" and isinstance(dst, Reg):
        return "ArithmeticG"
    if ins.op_class == "pop" and isinstance(dst, Reg):
        return "LoadMemG"
    if ins.op_class == "load_mem" and isinstance(dst, Reg) and isinstance(src, Mem):
        return "LoadMemG"
    if ins.op_class == "store_mem" and isinstance(dst, Mem) and isinstance(src, Reg):
        return "StoreMemG"
    if ins.op_class == "move_reg" and isinstance(dst, Reg) and isinstance(src, (Reg, Imm)):
        return "MoveRegG"
    return None


def classify_gadget(g: Gadget) -> frozenset[str]:
    classes = {c for c in map(instruction_class, g.instrs[:-1]) if c}
    if g.terminator == "syscall":
        classes.add("SYSG")
    elif g.terminator in ("jmp_ind", "call_ind"):
        classes.add("JumpG")
    return frozenset(classes)


def class_witnesses(g: Gadget) -> dict[str, Instruction]:
    """One instruction per assigned class that justifies it."""
    out = {}
    for ins in g.instrs[:-1]:
        cls = instruction_class(ins)
        if cls in g.classes:
            out.setdefault(cls, ins)
    if "SYSG" in g.classes and g.instrs[-1].op_class == "syscall":
        out["SYSG"] = g.instrs[-1]
    if "JumpG" in g.classes and g.instrs[-1].op_class in ("jmp_ind", "call_ind"):
        out["JumpG"] = g.instrs[-1]
    return out


# --- attribution ---------------------------------------------------------


class GadgetIndex:
    def __init__(self, by_function: dict[int, list[Gadget]], unattributed: list[Gadget],
                 function_ids: Iterable[int] = ()):
        self.by_function = {fid: list(gs) for fid, gs in by_function.items()}
        for fid in function_ids:
            self.by_function.setdefault(fid, [])
        self.unattributed = list(unattributed)
        self.class_counts: dict[int, Counter] = {
            fid: Counter(c for g in gs for c in g.classes) for fid, gs in self.by_function.items()
        }
        self.gadget_counts: dict[int, int] = {fid: len(gs) for fid, gs in self.by_function.items()}
        totals = Counter()
        for counts in self.class_counts.values():
            totals.update(counts)
        totals.update(c for g in self.unattributed for c in g.classes)
        self.totals = totals
        self.total_gadgets = sum(self.gadget_counts.values()) + len(self.unattributed)

    def gadgets(self) -> list[Gadget]:
        out = [g for gs in self.by_function.values() for g in gs] + self.unattributed
        return sorted(out, key=lambda g: g.start)

    def to_json(self, include_gadgets: bool = True) -> dict:
        doc = {
            "schema_version": 1,
            "total_gadgets": self.total_gadgets,
            "totals": {c: self.totals.get(c, 0) for c in CLASSES},
            "functions": {
                str(fid): {"gadgets": self.gadget_counts[fid],
                           "classes": {c: self.class_counts[fid].get(c, 0) for c in CLASSES}}
                for fid in sorted(self.by_function)
            },
            "unattributed": {"gadgets": len(self.unattributed),
                             "classes": {c: sum(c in g.classes for g in self.unattributed)
                                         for c in CLASSES}},
        }
        if include_gadgets:
            doc["gadgets"] = [
                {"start": f"{g.start:#x}", "terminator": g.terminator,
                 "classes": [c for c in CLASSES if c in g.classes], "owner": g.owner,
                 "text": g.text()}
                for g in self.gadgets()
            ]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> GadgetIndex:
        """Rebuild from an exported bundle; gadgets come back without instruction bodies."""
        by_fn: dict[int, list[Gadget]] = {int(k): [] for k in doc["functions"]}
        unattributed = []
        for g in doc.get("gadgets", []):
            gadget = Gadget(int(g["start"], 16), (), g["terminator"], frozenset(g["classes"]),
                            g["owner"])
            (unattributed if g["owner"] is None else by_fn.setdefault(g["owner"], [])).append(gadget)
        return cls(by_fn, unattributed)


def build_gadget_index(gadgets: Sequence[Gadget], fmap: FunctionMap) -> GadgetIndex:
    by_fn: dict[int, list[Gadget]] = {r.id: [] for r in fmap.records}
    unattributed = []
    for g in gadgets:
        rec = fmap.owning(g.start)
        if rec is None:
            unattributed.append(dataclasses.replace(g, owner=None))
        else:
            by_fn[rec.id].append(dataclasses.replace(g, owner=rec.id))
    return GadgetIndex(by_fn, unattributed)
