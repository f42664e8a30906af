"""ELF64 executable parsing into a loadable memory image.

Only little-endian x86-64 ELF files are accepted.  The image keeps the file
content of every PT_LOAD segment; executable segments double as the read-only
backup from which functions are copied at run time.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path
from typing import Iterator

from .errors import MalformedImage, NoExecutableSegment, OutOfRange, UnsupportedMachine

ELF_MAGIC = b"\x7fELF"
ELFCLASS64 = 2
ELFDATA2LSB = 1
EM_X86_64 = 62

ET_EXEC = 2
ET_DYN = 3

PT_LOAD = 1
PT_INTERP = 3

PF_X = 1
PF_W = 2
PF_R = 4

SHT_SYMTAB = 2
STT_FUNC = 2

_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
_PHDR = struct.Struct("<IIQQQQQQ")
_SHDR = struct.Struct("<IIQQQQIIQQ")
_SYM = struct.Struct("<IBBHQQ")


@dataclasses.dataclass(frozen=True)
class Perms:
    read: bool
    write: bool
    execute: bool

    @classmethod
    def from_flags(cls, flags: int) -> Perms:
        return cls(bool(flags & PF_R), bool(flags & PF_W), bool(flags & PF_X))

    def __str__(self) -> str:
        return ("r" if self.read else "-") + ("w" if self.write else "-") + ("x" if self.execute else "-")


@dataclasses.dataclass(frozen=True)
class Segment:
    file_offset: int
    vaddr: int
    mem_size: int
    file_size: int
    perms: Perms
    data: bytes = dataclasses.field(repr=False, compare=False)

    @property
    def end(self) -> int:
        return self.vaddr + self.mem_size

    def contains(self, vaddr: int) -> bool:
        return self.vaddr <= vaddr < self.end


@dataclasses.dataclass(frozen=True)
class FunctionSymbol:
    name: str
    value: int
    size: int


@dataclasses.dataclass(frozen=True)
class LoadableImage:
    segments: tuple[Segment, ...]
    entry: int
    machine: str = "x86-64"
    elf_type: int = ET_EXEC
    interpreter: str | None = None
    symbols: tuple[FunctionSymbol, ...] = ()

    @property
    def executable_segments(self) -> tuple[Segment, ...]:
        return tuple(s for s in self.segments if s.perms.execute)

    @property
    def code_bytes(self) -> dict[tuple[int, int], bytes]:
        """(start, end) -> file-backed bytes for every executable segment."""
        return {(s.vaddr, s.end): s.data for s in self.executable_segments}

    @property
    def is_static(self) -> bool:
        return self.interpreter is None and self.elf_type == ET_EXEC

    def segment_for(self, vaddr: int) -> Segment | None:
        for seg in self.segments:
            if seg.contains(vaddr):
                return seg
        return None

    def is_executable(self, vaddr: int) -> bool:
        seg = self.segment_for(vaddr)
        return seg is not None and seg.perms.execute

    def segment_table(self) -> list[dict]:
        return [
            {
                "file_offset": s.file_offset,
                "vaddr": f"{s.vaddr:#x}",
                "mem_size": s.mem_size,
                "file_size": s.file_size,
                "perms": str(s.perms),
            }
            for s in self.segments
        ]


def bytes_at(image: LoadableImage, vaddr: int, length: int) -> bytes:
    """Read ``length`` bytes at ``vaddr``; the mem_size tail past file_size reads as zeros."""
    if length < 0:
        raise OutOfRange(f"negative length {length}")
    for seg in image.segments:
        if seg.vaddr <= vaddr and vaddr + length <= seg.end:
            lo = vaddr - seg.vaddr
            chunk = seg.data[lo : lo + length]
            return chunk + bytes(length - len(chunk))
    raise OutOfRange(f"[{vaddr:#x}, {vaddr + length:#x}) is not inside a single segment")


def _iter_symbols(data: bytes, shoff: int, shnum: int, shentsize: int) -> Iterator[FunctionSymbol]:
    if shoff == 0 or shnum == 0:
        return
    if shentsize != _SHDR.size or shoff + shnum * shentsize > len(data):
        raise MalformedImage("section header table out of bounds")
    headers = [_SHDR.unpack_from(data, shoff + i * shentsize) for i in range(shnum)]
    for sh in headers:
        sh_type, sh_offset, sh_size, sh_link, sh_entsize = sh[1], sh[4], sh[5], sh[6], sh[9]
        if sh_type != SHT_SYMTAB:
            continue
        if sh_link >= shnum or sh_entsize != _SYM.size or sh_offset + sh_size > len(data):
            raise MalformedImage("symbol table out of bounds")
        str_off, str_size = headers[sh_link][4], headers[sh_link][5]
        strtab = data[str_off : str_off + str_size]
        for off in range(sh_offset, sh_offset + sh_size, _SYM.size):
            st_name, st_info, _other, st_shndx, st_value, st_size = _SYM.unpack_from(data, off)
            if st_info & 0xF != STT_FUNC or st_shndx == 0:
                continue
            end = strtab.find(b"\0", st_name)
            name = strtab[st_name : end if end >= 0 else None].decode("ascii", "replace")
            yield FunctionSymbol(name, st_value, st_size)


def parse_image(file_bytes: bytes) -> LoadableImage:
    data = bytes(file_bytes)
    if len(data) < _EHDR.size or data[:4] != ELF_MAGIC:
        raise MalformedImage("not an ELF file (bad magic or truncated header)")
    (ident, e_type, e_machine, _version, e_entry, e_phoff, e_shoff, _flags,
     _ehsize, e_phentsize, e_phnum, e_shentsize, e_shnum, _shstrndx) = _EHDR.unpack_from(data)
    if ident[4] != ELFCLASS64 or ident[5] != ELFDATA2LSB:
        raise UnsupportedMachine("only little-endian ELF64 is supported")
    if e_machine != EM_X86_64:
        raise UnsupportedMachine(f"unsupported e_machine {e_machine}")
    if e_type not in (ET_EXEC, ET_DYN):
        raise MalformedImage(f"ELF type {e_type} is not an executable")
    if e_phentsize != _PHDR.size or e_phoff + e_phnum * e_phentsize > len(data):
        raise MalformedImage("program header table out of bounds")

    segments = []
    interpreter = None
    for i in range(e_phnum):
        p_type, p_flags, p_offset, p_vaddr, _paddr, p_filesz, p_memsz, _align = _PHDR.unpack_from(
            data, e_phoff + i * e_phentsize)
        if p_type == PT_INTERP:
            interpreter = data[p_offset : p_offset + p_filesz].rstrip(b"\0").decode("ascii", "replace")
        if p_type != PT_LOAD:
            continue
        if p_offset + p_filesz > len(data):
            raise MalformedImage(f"segment {i} extends past end of file")
        if p_memsz < p_filesz:
            raise MalformedImage(f"segment {i} has mem_size < file_size")
        perms = Perms.from_flags(p_flags)
        if perms.write and perms.execute:
            raise MalformedImage(f"segment {i} at {p_vaddr:#x} is both writable and executable")
        segments.append(Segment(p_offset, p_vaddr, p_memsz, p_filesz, perms,
                                data[p_offset : p_offset + p_filesz]))

    segments.sort(key=lambda s: s.vaddr)
    for a, b in zip(segments, segments[1:]):
        if a.end > b.vaddr:
            raise MalformedImage(f"segments at {a.vaddr:#x} and {b.vaddr:#x} overlap")
    if not any(s.perms.execute for s in segments):
        raise NoExecutableSegment("image has no executable PT_LOAD segment")
    if not any(s.perms.execute and s.contains(e_entry) for s in segments):
        raise MalformedImage(f"entry point {e_entry:#x} is not inside an executable segment")

    symbols = tuple(sorted(set(_iter_symbols(data, e_shoff, e_shnum, e_shentsize)),
                           key=lambda s: (s.value, s.size, s.name)))
    return LoadableImage(tuple(segments), e_entry, "x86-64", e_type, interpreter, symbols)


def load_image(path: str | Path) -> LoadableImage:
    return parse_image(Path(path).read_bytes())


def image_from_code(code: bytes, base: int = 0x401000, entry: int | None = None) -> LoadableImage:
    """Wrap raw machine code as a single r-x segment image (no file container)."""
    if not code:
        raise NoExecutableSegment("empty code buffer")
    seg = Segment(0, base, len(code), len(code), Perms(True, False, True), bytes(code))
    return LoadableImage((seg,), base if entry is None else entry)
