"""Apply the residency policy to a live child process (Linux x86-64, ptrace).

The child is stopped right after ``execve``.  The supervisor then

* maps a one-page trampoline (``syscall; int3``) used to run remote syscalls,
* maps a PrepareArea holding a copy of every executable segment and seals it
  read-only,
* overwrites every executable segment with ``int3`` filler, and
* loads the entry function through the policy engine.

Every later fetch from an unloaded byte raises SIGTRAP one byte past the
faulting address.  The address goes through the policy engine; an approved
load copies the function back from PrepareArea with a writable window that is
closed before the child resumes.  Only static executables are supported.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import dataclasses
import logging
import os
import platform
import signal
import sys
from pathlib import Path
from typing import Sequence

from .artifacts import Artifacts, analyze
from .errors import (PlatformUnsupported, RemoteMemoryFailure, SpawnFailure, UnknownTrapAddress)
from .functions import FunctionRecord
from .image import LoadableImage, load_image
from .policy import LOADED, VIOLATION, PolicyConfig, PolicyState

log = logging.getLogger(__name__)

FILLER = 0xCC  # int3
PAGE = 4096

PTRACE_TRACEME = 0
PTRACE_CONT = 7
PTRACE_KILL = 8
PTRACE_GETREGS = 12
PTRACE_SETREGS = 13

SYS_MMAP = 9
SYS_MPROTECT = 10
PROT_READ, PROT_WRITE, PROT_EXEC = 1, 2, 4
MAP_PRIVATE, MAP_ANONYMOUS = 0x02, 0x20

_TRAMPOLINE_CODE = b"\x0f\x05\xcc"  # syscall; int3


class UserRegs(ctypes.Structure):
    _fields_ = [(name, ctypes.c_ulonglong) for name in (
        "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10", "r9", "r8", "rax", "rcx",
        "rdx", "rsi", "rdi", "orig_rax", "rip", "cs", "eflags", "rsp", "ss", "fs_base",
        "gs_base", "ds", "es", "fs", "gs")]


def _libc():
    lib = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6", use_errno=True)
    lib.ptrace.restype = ctypes.c_long
    lib.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]
    return lib


def platform_supported() -> tuple[bool, str]:
    if not sys.platform.startswith("linux"):
        return False, f"live supervision needs Linux, not {sys.platform}"
    if platform.machine() not in ("x86_64", "AMD64"):
        return False, f"live supervision needs an x86-64 host, not {platform.machine()}"
    try:
        _libc()
    except OSError as exc:
        return False, f"libc unavailable: {exc}"
    return True, "ok"


def probe_ptrace() -> tuple[bool, str]:
    """Check that this host lets a process trace its own child."""
    ok, why = platform_supported()
    if not ok:
        return ok, why
    lib = _libc()
    pid = os.fork()
    if pid == 0:
        rc = lib.ptrace(PTRACE_TRACEME, 0, None, None)
        if rc != 0:
            os._exit(3)
        os.kill(os.getpid(), signal.SIGSTOP)
        os._exit(0)
    _, status = os.waitpid(pid, 0)
    if os.WIFSTOPPED(status):
        lib.ptrace(PTRACE_KILL, pid, None, None)
        os.kill(pid, signal.SIGKILL)
        os.waitpid(pid, 0)
        return True, "ok"
    return False, "ptrace is not permitted on this host"


def parse_maps(text: str) -> list[tuple[int, int, str, str]]:
    out = []
    for line in text.splitlines():
        parts = line.split(None, 5)
        lo, hi = (int(x, 16) for x in parts[0].split("-"))
        out.append((lo, hi, parts[1], parts[5] if len(parts) > 5 else ""))
    return out


def wx_violations(maps: Sequence[tuple[int, int, str, str]]) -> list[tuple[int, int, str]]:
    return [(lo, hi, perms) for lo, hi, perms, _ in maps if "w" in perms and "x" in perms]


def _page_span(lo: int, hi: int) -> tuple[int, int]:
    start = lo & ~(PAGE - 1)
    end = (hi + PAGE - 1) & ~(PAGE - 1)
    return start, end - start


@dataclasses.dataclass
class RunResult:
    exit_code: int | None
    signal: int | None
    traps: int = 0
    loads: int = 0
    unloads: int = 0
    wx_checks: int = 0
    wx_failures: list[str] = dataclasses.field(default_factory=list)
    violation: dict | None = None

    @property
    def killed_for_violation(self) -> bool:
        return self.violation is not None

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "exit_code": self.exit_code,
            "signal": self.signal,
            "traps": self.traps,
            "loads": self.loads,
            "unloads": self.unloads,
            "wx_checks": self.wx_checks,
            "wx_failures": self.wx_failures,
            "violation": self.violation,
        }


class SupervisedProcess:
    """A traced child with its code regions under policy control."""

    def __init__(self, pid: int, image: LoadableImage, art: Artifacts, state: PolicyState):
        self.pid = pid
        self.image = image
        self.art = art
        self.state = state
        self.lib = _libc()
        self.trampoline: int | None = None
        self.prepare_base: int | None = None
        self._prepare_offsets: dict[int, int] = {}  # segment vaddr -> offset in PrepareArea
        self.result = RunResult(None, None)
        self.exited = False

    # -- raw access --------------------------------------------------------

    def _ptrace(self, req: int, addr=None, data=None) -> int:
        rc = self.lib.ptrace(req, self.pid, addr, data)
        if rc == -1:
            err = ctypes.get_errno()
            raise RemoteMemoryFailure(f"ptrace({req}) on {self.pid}: {os.strerror(err)}")
        return rc

    def get_regs(self) -> UserRegs:
        regs = UserRegs()
        self._ptrace(PTRACE_GETREGS, None, ctypes.byref(regs))
        return regs

    def set_regs(self, regs: UserRegs) -> None:
        self._ptrace(PTRACE_SETREGS, None, ctypes.byref(regs))

    def read(self, addr: int, length: int) -> bytes:
        try:
            with open(f"/proc/{self.pid}/mem", "rb", buffering=0) as f:
                f.seek(addr)
                data = f.read(length)
        except OSError as exc:
            raise RemoteMemoryFailure(f"read {length} bytes at {addr:#x}: {exc}") from None
        if len(data) != length:
            raise RemoteMemoryFailure(f"short read at {addr:#x}")
        return data

    def write(self, addr: int, data: bytes) -> None:
        try:
            with open(f"/proc/{self.pid}/mem", "r+b", buffering=0) as f:
                f.seek(addr)
                n = f.write(data)
        except OSError as exc:
            raise RemoteMemoryFailure(f"write {len(data)} bytes at {addr:#x}: {exc}") from None
        if n != len(data):
            raise RemoteMemoryFailure(f"short write at {addr:#x}")

    def maps(self) -> list[tuple[int, int, str, str]]:
        return parse_maps(Path(f"/proc/{self.pid}/maps").read_text())

    def _wait_trap(self) -> None:
        _, status = os.waitpid(self.pid, 0)
        if not (os.WIFSTOPPED(status) and os.WSTOPSIG(status) == signal.SIGTRAP):
            raise RemoteMemoryFailure(f"child did not stop after remote syscall (status {status:#x})")

    def remote_syscall(self, nr: int, *args: int) -> int:
        """Run one syscall in the child through the trampoline page."""
        if self.trampoline is None:
            raise RemoteMemoryFailure("trampoline not mapped")
        saved = self.get_regs()
        regs = UserRegs.from_buffer_copy(saved)
        regs.rip = self.trampoline
        regs.rax = nr
        regs.orig_rax = 2**64 - 1
        for name, val in zip(("rdi", "rsi", "rdx", "r10", "r8", "r9"), args):
            setattr(regs, name, val & 0xFFFFFFFFFFFFFFFF)
        self.set_regs(regs)
        self._ptrace(PTRACE_CONT, None, None)
        self._wait_trap()
        ret = self.get_regs().rax
        self.set_regs(saved)
        if ret >= 2**64 - 4095:
            raise RemoteMemoryFailure(f"remote syscall {nr} failed: {os.strerror(2**64 - ret)}")
        return ret

    def mprotect(self, lo: int, hi: int, prot: int) -> None:
        start, length = _page_span(lo, hi)
        self.remote_syscall(SYS_MPROTECT, start, length, prot)

    # -- setup -------------------------------------------------------------

    def _map_trampoline(self) -> None:
        # borrow the entry bytes once to run the mmap that creates the trampoline
        entry = self.image.entry
        saved_code = self.read(entry, len(_TRAMPOLINE_CODE))
        self.write(entry, _TRAMPOLINE_CODE)
        self.trampoline = entry
        try:
            page = self.remote_syscall(SYS_MMAP, 0, PAGE, PROT_READ | PROT_EXEC,
                                       MAP_PRIVATE | MAP_ANONYMOUS, 2**64 - 1, 0)
        finally:
            self.write(entry, saved_code)
        # /proc/pid/mem writes through the read-only mapping, so the page is never W+X
        self.write(page, _TRAMPOLINE_CODE)
        self.trampoline = page

    def _build_prepare_area(self) -> None:
        total = 0
        for seg in self.image.executable_segments:
            self._prepare_offsets[seg.vaddr] = total
            total += _page_span(0, seg.mem_size)[1]
        base = self.remote_syscall(SYS_MMAP, 0, total, PROT_READ | PROT_WRITE,
                                   MAP_PRIVATE | MAP_ANONYMOUS, 2**64 - 1, 0)
        for seg in self.image.executable_segments:
            self.write(base + self._prepare_offsets[seg.vaddr], self.read(seg.vaddr, seg.mem_size))
        self.remote_syscall(SYS_MPROTECT, base, total, PROT_READ)
        self.prepare_base = base

    def _clear_code(self) -> None:
        for seg in self.image.executable_segments:
            self._fill(seg.vaddr, seg.end)

    def _fill(self, lo: int, hi: int) -> None:
        self.mprotect(lo, hi, PROT_READ | PROT_WRITE)
        self.write(lo, bytes([FILLER]) * (hi - lo))
        self.mprotect(lo, hi, PROT_READ | PROT_EXEC)

    def prepare_slice(self, lo: int, hi: int) -> bytes:
        seg = self.image.segment_for(lo)
        if seg is None or self.prepare_base is None:
            raise RemoteMemoryFailure(f"{lo:#x} has no PrepareArea copy")
        off = self.prepare_base + self._prepare_offsets[seg.vaddr] + (lo - seg.vaddr)
        return self.read(off, hi - lo)

    def setup(self) -> None:
        self._map_trampoline()
        self._build_prepare_area()
        self._clear_code()
        outcome = self.state.request_load(self.image.entry)
        if outcome.kind != LOADED:
            raise SpawnFailure(f"entry {self.image.entry:#x} could not be loaded ({outcome.kind})")
        self._apply(outcome.evicted, outcome.function)

    # -- loads -------------------------------------------------------------

    def load_function_bytes(self, rec: FunctionRecord) -> None:
        data = self.prepare_slice(rec.start, rec.end)
        self.mprotect(rec.start, rec.end, PROT_READ | PROT_WRITE)
        self.write(rec.start, data)
        self.mprotect(rec.start, rec.end, PROT_READ | PROT_EXEC)

    def evict_function_bytes(self, rec: FunctionRecord) -> None:
        self._fill(rec.start, rec.end)

    def _apply(self, evicted: Sequence[int], loaded: int | None) -> None:
        for fid in evicted:
            self.evict_function_bytes(self.art.fmap[fid])
            self.result.unloads += 1
        if loaded is not None:
            self.load_function_bytes(self.art.fmap[loaded])
            self.result.loads += 1

    def check_wx(self) -> None:
        self.result.wx_checks += 1
        for lo, hi, perms in wx_violations(self.maps()):
            self.result.wx_failures.append(f"{lo:#x}-{hi:#x} {perms}")

    # -- trap handling -----------------------------------------------------

    def on_trap(self) -> str:
        """Resolve one SIGTRAP stop; returns ``loaded`` or ``violation``."""
        regs = self.get_regs()
        fault = regs.rip - 1
        self.result.traps += 1
        self.check_wx()
        if not self.image.is_executable(fault) or self.read(fault, 1)[0] != FILLER:
            raise UnknownTrapAddress(f"trap at {fault:#x} is not in cleared code")
        if fault in self.art.legal.call_returns and fault not in self.art.legal.function_starts:
            outcome = self.state.handle_return(fault)
        else:
            outcome = self.state.request_load(fault)
        if outcome.kind == VIOLATION:
            self.result.violation = {"addr": f"{fault:#x}", "reason": outcome.reason,
                                     "rsp": f"{regs.rsp:#x}"}
            return VIOLATION
        if outcome.kind != LOADED:
            # already resident yet trapping: the filler is real code, not ours
            raise UnknownTrapAddress(f"trap at {fault:#x} inside a resident function")
        self._apply(outcome.evicted, outcome.function)
        regs.rip = fault
        self.set_regs(regs)
        return LOADED

    def kill(self) -> None:
        try:
            os.kill(self.pid, signal.SIGKILL)
        except ProcessLookupError:
            return
        _, status = os.waitpid(self.pid, 0)
        self.result.signal = os.WTERMSIG(status) if os.WIFSIGNALED(status) else None
        self.exited = True

    def run(self) -> RunResult:
        self._ptrace(PTRACE_CONT, None, None)
        while True:
            _, status = os.waitpid(self.pid, 0)
            if os.WIFEXITED(status):
                self.result.exit_code = os.WEXITSTATUS(status)
                self.exited = True
                return self.result
            if os.WIFSIGNALED(status):
                self.result.signal = os.WTERMSIG(status)
                self.exited = True
                return self.result
            sig = os.WSTOPSIG(status)
            if sig == signal.SIGTRAP:
                try:
                    verdict = self.on_trap()
                except Exception:
                    self.kill()
                    raise
                if verdict == VIOLATION:
                    self.kill()
                    return self.result
                self._ptrace(PTRACE_CONT, None, None)
            else:
                self._ptrace(PTRACE_CONT, None, sig)


def spawn_supervised(path: str | Path, args: Sequence[str] = (), cfg: PolicyConfig | None = None,
                     art: Artifacts | None = None) -> SupervisedProcess:
    ok, why = platform_supported()
    if not ok:
        raise PlatformUnsupported(why)
    path = Path(path)
    if not path.is_file() or not os.access(path, os.X_OK):
        raise SpawnFailure(f"{path} is not an executable file")
    image = load_image(path)
    if not image.is_static:
        raise SpawnFailure(f"{path} is dynamically linked; live supervision needs a static executable")
    art = art or analyze(image, max_len=(cfg or PolicyConfig()).max_len)
    state = PolicyState(art.fmap, art.index, art.legal, cfg)
    lib = _libc()

    sys.stdout.flush()
    sys.stderr.flush()
    pid = os.fork()
    if pid == 0:
        try:
            if lib.ptrace(PTRACE_TRACEME, 0, None, None) != 0:
                os._exit(126)
            os.execv(str(path), [str(path), *args])
        finally:
            os._exit(127)
    _, status = os.waitpid(pid, 0)
    if not (os.WIFSTOPPED(status) and os.WSTOPSIG(status) == signal.SIGTRAP):
        if os.WIFEXITED(status) and os.WEXITSTATUS(status) == 126:
            raise PlatformUnsupported("ptrace is not permitted on this host")
        raise SpawnFailure(f"child did not stop at exec (status {status:#x})")
    proc = SupervisedProcess(pid, image, art, state)
    try:
        proc.setup()
    except Exception:
        proc.kill()
        raise
    return proc


def run_supervised(path: str | Path, args: Sequence[str] = (), cfg: PolicyConfig | None = None,
                   art: Artifacts | None = None) -> tuple[RunResult, PolicyState]:
    proc = spawn_supervised(path, args, cfg, art)
    return proc.run(), proc.state
