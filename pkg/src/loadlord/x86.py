"""A small x86-64 decoder: exact lengths for the general-purpose ISA, operand
roles for the instructions that matter to gadget classification.

Anything outside the classified subset decodes as ``other`` with its length.
Byte sequences that cannot start a valid 64-bit instruction decode as a
one-byte ``(bad)`` record.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple, Union

REG64 = ("rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
         "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")

# legacy-register aliases collapse onto the 64-bit name
_ALIASES = {}
for _i, _n in enumerate(REG64[:8]):
    _b = _n[1:]
    _ALIASES["e" + _b] = _n
    _ALIASES[_b] = _n
for _n8, _n64 in (("al", "rax"), ("cl", "rcx"), ("dl", "rdx"), ("bl", "rbx"),
                  ("ah", "rax"), ("ch", "rcx"), ("dh", "rdx"), ("bh", "rbx"),
                  ("spl", "rsp"), ("bpl", "rbp"), ("sil", "rsi"), ("dil", "rdi")):
    _ALIASES[_n8] = _n64
for _i in range(8, 16):
    for _suffix in ("d", "w", "b", "l"):
        _ALIASES[f"r{_i}{_suffix}"] = f"r{_i}"
for _n in REG64:
    _ALIASES[_n] = _n


def canonical_reg(name: str) -> str | None:
    """Map any general-purpose register spelling to its 64-bit name."""
    return _ALIASES.get(name.lower())


class Reg(NamedTuple):
    name: str


class Mem(NamedTuple):
    base: str | None
    offset: int


class Imm(NamedTuple):
    value: int


Operand = Union[Reg, Mem, Imm, None]

OP_CLASSES = ("arith", "load_mem", "store_mem", "move_reg", "pop", "push", "syscall",
              "call_ind", "jmp_ind", "jmp_dir", "call_dir", "ret", "other")

TERMINATORS = {"ret": "ret", "jmp_ind": "jmp_ind", "call_ind": "call_ind", "syscall": "syscall"}

# valid instructions that still end a straight-line run
_FLOW_MNEMONICS = {"int3", "int", "int1", "hlt", "iret", "ud2", "retf", "sysenter",
                   "sysret", "jmp far", "call far", "ud0", "ud1"}

MAX_INSN_LEN = 15


@dataclasses.dataclass(frozen=True, slots=True)
class Instruction:
    vaddr: int
    length: int
    op_class: str
    mnemonic: str
    dst: Operand = None
    src: Operand = None
    target: int | None = None

    @property
    def valid(self) -> bool:
        return self.mnemonic != "(bad)"

    @property
    def next_addr(self) -> int:
        return self.vaddr + self.length

    @property
    def terminator(self) -> str | None:
        return TERMINATORS.get(self.op_class)

    @property
    def breaks_flow(self) -> bool:
        """True for anything a gadget may not contain before its last instruction."""
        return (not self.valid or self.op_class in ("ret", "jmp_ind", "jmp_dir", "call_ind",
                                                    "call_dir", "syscall")
                or self.mnemonic in _FLOW_MNEMONICS)


def bad(vaddr: int) -> Instruction:
    return Instruction(vaddr, 1, "other", "(bad)")


_LEGACY_PREFIXES = frozenset((0x26, 0x2E, 0x36, 0x3E, 0x64, 0x65, 0x66, 0x67, 0xF0, 0xF2, 0xF3))

_ALU = ("add", "or", "adc", "sbb", "and", "sub", "xor", "cmp")
_SHIFT = ("rol", "ror", "rcl", "rcr", "shl", "shr", "sal", "sar")

# one-byte map: opcode -> (has_modrm, immediate kind)
# immediate kinds: 0 none, 'b' imm8, 'w' imm16, 'z' imm16/32 by operand size,
# 'v' imm16/32/64 (mov r, imm), 'm' moffs, 'e' enter (imm16+imm8), 'rel8', 'rel32'
_INVALID_1 = frozenset((0x06, 0x07, 0x0E, 0x16, 0x17, 0x1E, 0x1F, 0x27, 0x2F, 0x37, 0x3F,
                        0x60, 0x61, 0x82, 0x9A, 0xCE, 0xD4, 0xD5, 0xD6, 0xEA))


def _one_byte_format(op: int):
    if op < 0x40:
        low = op & 7
        if low < 4:
            return True, 0
        if low == 4:
            return False, "b"
        if low == 5:
            return False, "z"
        return None
    if 0x50 <= op <= 0x5F:
        return False, 0
    if op == 0x63:
        return True, 0
    if op == 0x68:
        return False, "z"
    if op == 0x69:
        return True, "z"
    if op == 0x6A:
        return False, "b"
    if op == 0x6B:
        return True, "b"
    if 0x6C <= op <= 0x6F:
        return False, 0
    if 0x70 <= op <= 0x7F:
        return False, "rel8"
    if op in (0x80, 0x83):
        return True, "b"
    if op == 0x81:
        return True, "z"
    if 0x84 <= op <= 0x8F:
        return True, 0
    if 0x90 <= op <= 0x9F:
        return False, 0
    if 0xA0 <= op <= 0xA3:
        return False, "m"
    if 0xA4 <= op <= 0xA7 or 0xAA <= op <= 0xAF:
        return False, 0
    if op == 0xA8:
        return False, "b"
    if op == 0xA9:
        return False, "z"
    if 0xB0 <= op <= 0xB7:
        return False, "b"
    if 0xB8 <= op <= 0xBF:
        return False, "v"
    if op in (0xC0, 0xC1, 0xC6):
        return True, "b"
    if op == 0xC7:
        return True, "z"
    if op in (0xC2, 0xCA):
        return False, "w"
    if op in (0xC3, 0xC9, 0xCB, 0xCC, 0xCF):
        return False, 0
    if op == 0xC8:
        return False, "e"
    if op == 0xCD:
        return False, "b"
    if 0xD0 <= op <= 0xD3 or 0xD8 <= op <= 0xDF:
        return True, 0
    if op == 0xD7:
        return False, 0
    if 0xE0 <= op <= 0xE3 or op == 0xEB:
        return False, "rel8"
    if 0xE4 <= op <= 0xE7:
        return False, "b"
    if op in (0xE8, 0xE9):
        return False, "rel32"
    if 0xEC <= op <= 0xEF:
        return False, 0
    if op in (0xF1, 0xF4, 0xF5) or 0xF8 <= op <= 0xFD:
        return False, 0
    if op in (0xF6, 0xF7, 0xFE, 0xFF):
        return True, 0
    return None


_ONE_BYTE = {op: _one_byte_format(op) for op in range(256)
             if op not in _INVALID_1 and op not in _LEGACY_PREFIXES
             and not 0x40 <= op <= 0x4F and op not in (0x0F, 0x62, 0xC4, 0xC5)}
_ONE_BYTE = {k: v for k, v in _ONE_BYTE.items() if v is not None}

# two-byte map 0F xx
_INVALID_2 = frozenset((0x04, 0x0A, 0x0C, 0x0F, 0x24, 0x25, 0x26, 0x27, 0x36, 0x39,
                        0x3B, 0x3C, 0x3D, 0x3E, 0x3F, 0x7A, 0x7B, 0xA6, 0xA7))
_NO_MODRM_2 = frozenset((0x05, 0x06, 0x07, 0x08, 0x09, 0x0B, 0x0E, 0x30, 0x31, 0x32, 0x33, 0x34,
                         0x35, 0x37, 0x77, 0xA0, 0xA1, 0xA2, 0xA8, 0xA9, 0xAA,
                         0xC8, 0xC9, 0xCA, 0xCB, 0xCC, 0xCD, 0xCE, 0xCF))
_IMM8_2 = frozenset((0x70, 0x71, 0x72, 0x73, 0xA4, 0xAC, 0xBA, 0xC2, 0xC4, 0xC5, 0xC6))


class _Cursor:
    __slots__ = ("buf", "start", "pos", "limit")

    def __init__(self, buf: bytes, pos: int):
        self.buf = buf
        self.start = pos
        self.pos = pos
        self.limit = min(len(buf), pos + MAX_INSN_LEN)

    def byte(self) -> int:
        if self.pos >= self.limit:
            raise IndexError
        b = self.buf[self.pos]
        self.pos += 1
        return b

    def take(self, n: int) -> bytes:
        if self.pos + n > self.limit:
            raise IndexError
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def signed(self, n: int) -> int:
        return int.from_bytes(self.take(n), "little", signed=True)

    def unsigned(self, n: int) -> int:
        return int.from_bytes(self.take(n), "little", signed=False)


class _ModRM(NamedTuple):
    mod: int
    reg: int  # extended by REX.R
    rm: Operand  # Reg for mod == 3 else Mem
    opext: int  # raw reg field, for group opcodes


def _read_modrm(cur: _Cursor, rex: int) -> _ModRM:
    b = cur.byte()
    mod, reg, rm = b >> 6, (b >> 3) & 7, b & 7
    reg_ext = reg | ((rex & 4) << 1)
    if mod == 3:
        return _ModRM(mod, reg_ext, Reg(REG64[rm | ((rex & 1) << 3)]), reg)
    base: str | None
    if rm == 4:
        sib = cur.byte()
        sbase = sib & 7
        if sbase == 5 and mod == 0:
            base = None
            disp = cur.signed(4)
            return _ModRM(mod, reg_ext, Mem(base, disp), reg)
        base = REG64[sbase | ((rex & 1) << 3)]
    elif rm == 5 and mod == 0:
        return _ModRM(mod, reg_ext, Mem("rip", cur.signed(4)), reg)
    else:
        base = REG64[rm | ((rex & 1) << 3)]
    disp = 0
    if mod == 1:
        disp = cur.signed(1)
    elif mod == 2:
        disp = cur.signed(4)
    return _ModRM(mod, reg_ext, Mem(base, disp), reg)


def _imm_size(kind, opsize16: bool, rex_w: bool, addr32: bool) -> int:
    if kind == "b" or kind == "rel8":
        return 1
    if kind == "w":
        return 2
    if kind == "z":
        return 2 if opsize16 and not rex_w else 4
    if kind == "v":
        if rex_w:
            return 8
        return 2 if opsize16 else 4
    if kind == "m":
        return 4 if addr32 else 8
    if kind == "e":
        return 3
    if kind == "rel32":
        return 4
    return 0


def decode(buf: bytes, pos: int = 0, vaddr: int = 0) -> Instruction:
    """Decode one instruction from ``buf[pos:]``, reporting it at ``vaddr``."""
    try:
        return _decode(buf, pos, vaddr)
    except IndexError:
        return bad(vaddr)


def _decode(buf: bytes, pos: int, vaddr: int) -> Instruction:
    cur = _Cursor(buf, pos)
    opsize16 = addr32 = False
    rep = 0
    rex = 0
    b = cur.byte()
    while True:
        if b in _LEGACY_PREFIXES:
            rex = 0  # a REX not immediately before the opcode is ignored
            if b == 0x66:
                opsize16 = True
            elif b == 0x67:
                addr32 = True
            elif b in (0xF2, 0xF3):
                rep = b
            b = cur.byte()
        elif 0x40 <= b <= 0x4F:
            rex = b
            b = cur.byte()
        else:
            break
    rex_w = bool(rex & 8)

    def done(op_class, mnemonic, dst=None, src=None, target=None):
        return Instruction(vaddr, cur.pos - pos, op_class, mnemonic, dst, src, target)

    if b in (0xC4, 0xC5):
        if rex or opsize16 or rep:
            return bad(vaddr)
        if b == 0xC5:
            cur.byte()
            mmap = 1
        else:
            mmap = cur.byte() & 0x1F
            cur.byte()
        if mmap not in (1, 2, 3):
            return bad(vaddr)
        opcode = cur.byte()
        if not (mmap == 1 and opcode == 0x77):
            _read_modrm(cur, 0)
        if mmap == 3 or (mmap == 1 and opcode in _IMM8_2):
            cur.take(1)
        return done("other", "vex")
    if b == 0x62:
        p0 = cur.byte()
        cur.byte()
        cur.byte()
        mmap = p0 & 3
        if mmap == 0 or rex:
            return bad(vaddr)
        cur.byte()
        _read_modrm(cur, 0)
        if mmap == 3:
            cur.take(1)
        return done("other", "evex")
    if b == 0x0F:
        return _decode_0f(cur, vaddr, pos, rex, opsize16, addr32, rep, done)

    fmt = _ONE_BYTE.get(b)
    if fmt is None:
        return bad(vaddr)
    has_modrm, kind = fmt
    m = _read_modrm(cur, rex) if has_modrm else None
    # group-specific validity and immediates
    if b == 0xF6 and m.opext in (0, 1):
        kind = "b"
    elif b == 0xF7 and m.opext in (0, 1):
        kind = "z"
    elif b == 0x8F and m.opext != 0:
        return bad(vaddr)
    elif b in (0xC6, 0xC7) and m.opext != 0:
        if not (m.mod == 3 and m.opext == 7 and m.rm == Reg(REG64[(rex & 1) << 3])):
            return bad(vaddr)
        kind = "b" if b == 0xC6 else "rel32"
    elif b == 0xFE and m.opext > 1:
        return bad(vaddr)
    elif b == 0xFF and m.opext == 7:
        return bad(vaddr)
    elif b in (0x8C, 0x8E) and m.opext > 5:
        return bad(vaddr)
    imm_n = _imm_size(kind, opsize16, rex_w, addr32)
    imm = cur.signed(imm_n) if imm_n and kind != "m" else (cur.unsigned(imm_n) if imm_n else None)
    return _classify_one(b, m, imm, kind, rex, cur, done, vaddr)


def _classify_one(b, m, imm, kind, rex, cur, done, vaddr):
    if b < 0x40:
        name = _ALU[b >> 3]
        low = b & 7
        if low >= 4:
            if name == "cmp":
                return done("other", name)
            return done("arith", name, Reg("rax"), Imm(imm))
        if name == "cmp":
            return done("other", name)
        reg = Reg(REG64[m.reg])
        if low < 2:  # op r/m, reg
            if m.mod == 3:
                return done("arith", name, m.rm, reg)
            return done("store_mem", name, m.rm, reg)
        if m.mod == 3:
            return done("arith", name, reg, m.rm)
        if name in ("add", "sub"):
            return done("load_mem", name, reg, m.rm)
        return done("arith", name, reg, m.rm)
    if 0x50 <= b <= 0x57:
        return done("push", "push", Mem("rsp", -8), Reg(REG64[(b & 7) | ((rex & 1) << 3)]))
    if 0x58 <= b <= 0x5F:
        return done("pop", "pop", Reg(REG64[(b & 7) | ((rex & 1) << 3)]), Mem("rsp", 0))
    if b == 0x63:
        if m.mod == 3:
            return done("move_reg", "movsxd", Reg(REG64[m.reg]), m.rm)
        return done("load_mem", "movsxd", Reg(REG64[m.reg]), m.rm)
    if b in (0x68, 0x6A):
        return done("push", "push", Mem("rsp", -8), Imm(imm))
    if b in (0x69, 0x6B):
        return done("arith", "imul", Reg(REG64[m.reg]), m.rm)
    if 0x70 <= b <= 0x7F or 0xE0 <= b <= 0xE3:
        return done("jmp_dir", "jcc" if b < 0xE0 else "loop", target=cur_target(vaddr, cur, imm))
    if b in (0x80, 0x81, 0x83):
        name = _ALU[m.opext]
        if name == "cmp":
            return done("other", name)
        if m.mod == 3:
            return done("arith", name, m.rm, Imm(imm))
        return done("store_mem", name, m.rm, Imm(imm))
    if b in (0x84, 0x85):
        return done("other", "test")
    if b in (0x86, 0x87):
        if m.mod == 3:
            return done("move_reg", "xchg", Reg(REG64[m.reg]), m.rm)
        return done("other", "xchg")
    if b in (0x88, 0x89):
        if m.mod == 3:
            return done("move_reg", "mov", m.rm, Reg(REG64[m.reg]))
        return done("store_mem", "mov", m.rm, Reg(REG64[m.reg]))
    if b in (0x8A, 0x8B):
        if m.mod == 3:
            return done("move_reg", "mov", Reg(REG64[m.reg]), m.rm)
        return done("load_mem", "mov", Reg(REG64[m.reg]), m.rm)
    if b == 0x8D:
        if m.mod == 3:
            return bad(vaddr)
        return done("arith", "lea", Reg(REG64[m.reg]), m.rm)
    if b == 0x8F:
        if m.mod == 3:
            return done("pop", "pop", m.rm, Mem("rsp", 0))
        return done("other", "pop")
    if b == 0x90:
        if rex & 1:
            return done("move_reg", "xchg", Reg("r8"), Reg("rax"))
        return done("other", "nop")
    if 0x91 <= b <= 0x97:
        return done("move_reg", "xchg", Reg(REG64[(b & 7) | ((rex & 1) << 3)]), Reg("rax"))
    if b == 0x9C:
        return done("push", "pushf", Mem("rsp", -8), None)
    if b in (0xA0, 0xA1):
        return done("load_mem", "mov", Reg("rax"), Mem(None, imm))
    if b in (0xA2, 0xA3):
        return done("store_mem", "mov", Mem(None, imm), Reg("rax"))
    if 0xB0 <= b <= 0xBF:
        return done("move_reg", "mov", Reg(REG64[(b & 7) | ((rex & 1) << 3)]), Imm(imm))
    if b in (0xC0, 0xC1, 0xD0, 0xD1, 0xD2, 0xD3):
        if m.mod == 3:
            return done("arith", _SHIFT[m.opext], m.rm, Imm(imm) if imm is not None else None)
        return done("other", _SHIFT[m.opext])
    if b in (0xC2, 0xC3):
        return done("ret", "ret", src=Imm(imm) if imm is not None else None)
    if b in (0xC6, 0xC7):
        if m.opext == 7:
            return done("other", "xabort" if b == 0xC6 else "xbegin")
        if m.mod == 3:
            return done("move_reg", "mov", m.rm, Imm(imm))
        return done("store_mem", "mov", m.rm, Imm(imm))
    if b == 0xC9:
        return done("load_mem", "leave", Reg("rbp"), Mem("rbp", 0))
    if b in (0xCA, 0xCB):
        return done("other", "retf")
    if b == 0xCC:
        return done("other", "int3")
    if b == 0xCD:
        return done("other", "int")
    if b == 0xCF:
        return done("other", "iret")
    if b == 0xF1:
        return done("other", "int1")
    if b == 0xF4:
        return done("other", "hlt")
    if b == 0xE8:
        return done("call_dir", "call", target=cur_target(vaddr, cur, imm))
    if b in (0xE9, 0xEB):
        return done("jmp_dir", "jmp", target=cur_target(vaddr, cur, imm))
    if b in (0xF6, 0xF7):
        names = ("test", "test", "not", "neg", "mul", "imul", "div", "idiv")
        if m.opext < 2:
            return done("other", "test")
        if m.opext < 4:
            if m.mod == 3:
                return done("arith", names[m.opext], m.rm, m.rm)
            return done("other", names[m.opext])
        return done("arith", names[m.opext], Reg("rax"), m.rm)
    if b in (0xFE, 0xFF):
        name = ("inc", "dec", "call", "call far", "jmp", "jmp far", "push")[m.opext]
        if m.opext < 2:
            if m.mod == 3:
                return done("arith", name, m.rm, m.rm)
            return done("other", name)
        if m.opext == 2:
            return done("call_ind", "call", None, m.rm)
        if m.opext == 4:
            return done("jmp_ind", "jmp", None, m.rm)
        if m.opext == 6:
            return done("push", "push", Mem("rsp", -8), m.rm)
        if m.opext in (3, 5) and m.mod == 3:
            return bad(vaddr)
        return done("other", name)
    return done("other", f"op_{b:02x}")


def cur_target(vaddr: int, cur: _Cursor, rel: int) -> int:
    # relative branches resolve against the end of the instruction
    return (vaddr + (cur.pos - cur.start) + rel) & 0xFFFFFFFFFFFFFFFF


def _decode_0f(cur, vaddr, pos, rex, opsize16, addr32, rep, done):
    b = cur.byte()
    if b == 0x38:
        cur.byte()
        _read_modrm(cur, rex)
        return done("other", "0f38")
    if b == 0x3A:
        cur.byte()
        _read_modrm(cur, rex)
        cur.take(1)
        return done("other", "0f3a")
    if b in _INVALID_2:
        return bad(vaddr)
    if 0x80 <= b <= 0x8F:
        rel = cur.signed(4)
        return done("jmp_dir", "jcc", target=(vaddr + cur.pos - pos + rel) & 0xFFFFFFFFFFFFFFFF)
    if b in _NO_MODRM_2:
        if b == 0x05:
            return done("syscall", "syscall")
        names = {0x07: "sysret", 0x0B: "ud2", 0x34: "sysenter"}
        return done("other", names.get(b, f"0f{b:02x}"))
    if 0x20 <= b <= 0x23:
        cur.byte()  # control/debug register moves are register-only
        return done("other", "mov cr")
    m = _read_modrm(cur, rex)
    if b in _IMM8_2:
        cur.take(1)
    if b == 0x1E and rep == 0xF3 and m.mod == 3 and m.opext == 7:
        return done("other", "endbr")
    if b in (0xB6, 0xB7, 0xBE, 0xBF):
        name = "movzx" if b < 0xB8 else "movsx"
        if m.mod == 3:
            return done("move_reg", name, Reg(REG64[m.reg]), m.rm)
        return done("load_mem", name, Reg(REG64[m.reg]), m.rm)
    if b == 0xAF:
        return done("arith", "imul", Reg(REG64[m.reg]), m.rm)
    if b == 0xB9:
        return done("other", "ud1")
    if b == 0xFF:
        return done("other", "ud0")
    if b == 0x1F:
        return done("other", "nop")
    return done("other", f"0f{b:02x}")
