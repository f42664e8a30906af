"""Bundled x86-64 test programs.

The assembly sources and the static executables built from them are shipped
together so tests and the CLI never need a toolchain.  ``rebuild`` regenerates
the executables (and the synthetic source) with ``as`` and ``ld``.
"""

from __future__ import annotations

import random
import shutil
import subprocess
import tempfile
from pathlib import Path

CORPUS_DIR = Path(__file__).resolve().parent

FIXTURE = "fixture24"
DEMO = "demo8"
OVERFLOW = "overflow"
SYNTH = "synth128"
BINARIES = (FIXTURE, DEMO, OVERFLOW, SYNTH)


def path(name: str) -> Path:
    return CORPUS_DIR / name


def source(name: str) -> Path:
    return CORPUS_DIR / f"{name}.s"


_BODIES = (
    "        add rax, rbx\n        xor rdx, rdx\n",
    "        mov rax, qword ptr [rip + slots]\n",
    "        lea rdi, [rip + slots]\n        mov qword ptr [rdi + 8], rax\n",
    "        push rbx\n        mov rbx, rax\n        pop rbx\n",
    "        imul rax, rcx\n        sub rax, 3\n",
    "        mov ecx, 0x5dc3\n",
    "        mov rcx, rdx\n        mov rdx, rsi\n",
)


def synth_source(n_functions: int = 128, seed: int = 7) -> str:
    """Assembly for a program whose call graph is a random DAG over ``n_functions``."""
    rng = random.Random(seed)
    names = ["_start", "main"] + [f"fn{i:03d}" for i in range(n_functions - 2)]
    out = ["# generated by loadlord.corpus.synth_source; do not edit\n",
           "        .intel_syntax noprefix\n        .text\n"]
    for i, name in enumerate(names):
        out.append(f"        .globl {name}\n        .type {name}, @function\n{name}:\n")
        if name == "_start":
            out.append("        call main\n        mov edi, 0\n        mov eax, 60\n        syscall\n")
            out.append(f"        .size {name}, .-{name}\n")
            continue
        out.append("        push rbp\n        mov rbp, rsp\n")
        # callees only further down the list keep the graph acyclic
        later = names[i + 1:]
        fanout = min(len(later), rng.choice((0, 1, 2, 2, 3)) if name != "main" else 6)
        for callee in rng.sample(later[:24], min(fanout, len(later[:24]))):
            out.append(rng.choice(_BODIES))
            out.append(f"        call {callee}\n")
        out.append(rng.choice(_BODIES))
        tail = rng.random()
        if tail < 0.1:
            out.append("        pop rbp\n        pop rdi\n        push rdi\n        ret\n")
        elif tail < 0.15:
            out.append("        mov eax, 39\n        syscall\n        pop rbp\n        ret\n")
        elif tail < 0.2:
            out.append("        pop rbp\n        lea rax, [rip + 1f]\n        jmp rax\n1:\n        ret\n")
        else:
            out.append("        leave\n        ret\n")
        out.append(f"        .size {name}, .-{name}\n")
    out.append("        .data\nslots:\n        .quad 0, 0, 0, 0\n")
    return "".join(out)


def objdump_listing(binary: Path) -> str:
    """Instruction lines of ``objdump -d -M intel`` with headers stripped."""
    text = subprocess.run(["objdump", "-d", "-M", "intel", "--insn-width=16", str(binary)],
                          check=True, capture_output=True, text=True).stdout
    lines = [ln for ln in text.splitlines() if ln.startswith("  ") and ":\t" in ln]
    return "".join(ln.rstrip() + "\n" for ln in lines)


def assemble(src: Path, out: Path) -> Path:
    for tool in ("as", "ld"):
        if shutil.which(tool) is None:
            raise RuntimeError(f"{tool} is not installed")
    with tempfile.TemporaryDirectory() as tmp:
        obj = Path(tmp) / "a.o"
        subprocess.run(["as", "-o", str(obj), str(src)], check=True)
        subprocess.run(["ld", "-static", "-o", str(out), str(obj)], check=True)
    return out


def rebuild(directory: Path = CORPUS_DIR) -> list[Path]:
    directory = Path(directory)
    source(SYNTH).write_text(synth_source())
    built = [assemble(source(name), directory / name) for name in BINARIES]
    (directory / f"{FIXTURE}.lst").write_text(objdump_listing(directory / FIXTURE))
    return built
