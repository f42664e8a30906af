import pytest
from hypothesis import given, strategies as st

from loadlord import corpus
from loadlord.gadgets import decode_stream
from loadlord.image import load_image
from loadlord.x86 import Imm, Mem, Reg, decode

from oracles import have, objdump_lengths


@pytest.mark.parametrize("code, length, op_class", [
    ("c3", 1, "ret"),
    ("c20800", 3, "ret"),
    ("5f", 1, "pop"),
    ("415f", 2, "pop"),
    ("0f05", 2, "syscall"),
    ("ffe0", 2, "jmp_ind"),
    ("ffd3", 2, "call_ind"),
    ("e800000000", 5, "call_dir"),
    ("eb00", 2, "jmp_dir"),
    ("488b4708", 4, "load_mem"),
    ("48894708", 4, "store_mem"),
    ("4889d8", 3, "move_reg"),
    ("4801d8", 3, "arith"),
    ("c9", 1, "load_mem"),
    ("48b88877665544332211", 10, "move_reg"),
    ("660f1f440000", 6, "other"),
    ("c5f877", 3, "other"),
])
def test_lengths_and_classes(code, length, op_class):
    ins = decode(bytes.fromhex(code), 0, 0x1000)
    assert (ins.length, ins.op_class) == (length, op_class)


def test_operand_roles():
    ins = decode(bytes.fromhex("488b4708"), 0, 0)
    assert ins.dst == Reg("rax")
    assert ins.src == Mem("rdi", 8)
    mov = decode(bytes.fromhex("b8c3000000"), 0, 0)
    assert mov.src == Imm(0xC3)


def test_relative_targets():
    call = decode(bytes.fromhex("e8fb0f0000"), 0, 0x401000)
    assert call.target == 0x402000
    jmp = decode(bytes.fromhex("ebfe"), 0, 0x401000)
    assert jmp.target == 0x401000


def test_undecodable_is_one_byte_bad():
    ins = decode(b"\x06", 0, 0x10)
    assert not ins.valid and ins.length == 1 and ins.mnemonic == "(bad)"


def test_truncated_is_bad():
    assert not decode(b"\x48\x8b", 0, 0).valid


@given(st.binary(min_size=1, max_size=20))
def test_decode_total(buf):
    ins = decode(buf, 0, 0)
    assert 1 <= ins.length <= 15
    assert ins.valid or ins.length == 1


@pytest.mark.skipif(not have("objdump"), reason="objdump not installed")
@pytest.mark.parametrize("name", corpus.BINARIES)
def test_linear_sweep_matches_objdump(name):
    expected = objdump_lengths(corpus.path(name))
    got = {i.vaddr: i.length for i in decode_stream(load_image(corpus.path(name)))}
    assert got == expected
