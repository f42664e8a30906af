import random

import pytest

from loadlord import corpus
from loadlord.artifacts import analyze
from loadlord.errors import ParseError
from loadlord.gadgets import (CLASSES, GadgetIndex, SegmentDecoder, class_witnesses,
                              ingest_listing, scan_gadgets, scan_segment)
from loadlord.image import image_from_code, load_image

from oracles import brute_force_gadgets


def gadgets_of(hexcode, max_len=5):
    return scan_gadgets(image_from_code(bytes.fromhex(hexcode)), max_len)


def test_pop_ret():
    gs = gadgets_of("5dc3")
    assert [(g.start - 0x401000, g.text(), sorted(g.classes)) for g in gs] == [
        (0, "pop rbp; ret", ["LoadMemG"]), (1, "ret", [])]


def test_hidden_ret_inside_immediate():
    gs = gadgets_of("b8c3000000")
    assert [g.start - 0x401000 for g in gs] == [1]


def test_syscall_and_indirect():
    assert {g.terminator for g in gadgets_of("0f05")} == {"syscall"}
    g = gadgets_of("58ffe0")[0]
    assert g.terminator == "jmp_ind" and g.classes == {"LoadMemG", "JumpG"}


def test_immediate_store_is_not_storememg():
    g = gadgets_of("48c70700000000c3")[0]
    assert "StoreMemG" not in g.classes


def test_max_len_bounds():
    code = "90" * 6 + "c3"
    assert len(gadgets_of(code, max_len=5)) == 5
    assert len(gadgets_of(code, max_len=1)) == 1


def test_flow_break_stops_gadget():
    # jmp rel8 before the ret means only the ret itself is a gadget
    assert [g.start - 0x401000 for g in gadgets_of("eb00c3")] == [2]


def test_witnesses_justify_classes(fixture_art):
    for g in fixture_art.index.gadgets():
        assert set(class_witnesses(g)) == set(g.classes)


def test_index_counts(fixture_art):
    idx = fixture_art.index
    assert idx.total_gadgets == sum(idx.gadget_counts.values()) + len(idx.unattributed)
    for c in CLASSES:
        assert idx.totals.get(c, 0) == sum(c in g.classes for g in idx.gadgets())
    doc = idx.to_json()
    again = GadgetIndex.from_json(doc)
    assert again.total_gadgets == idx.total_gadgets
    assert again.class_counts == idx.class_counts


@pytest.mark.parametrize("name", corpus.BINARIES)
def test_scanner_matches_brute_force_on_corpus(name):
    img = load_image(corpus.path(name))
    for seg in img.executable_segments:
        ours = {(g.start, g.terminator) for g in scan_segment(SegmentDecoder(seg, img))}
        assert ours == brute_force_gadgets(seg.data + bytes(seg.mem_size - seg.file_size), seg.vaddr)


@pytest.mark.parametrize("seed", range(20))
def test_scanner_matches_brute_force_random(seed):
    rng = random.Random(seed)
    code = bytes(rng.choice((0xC3, 0x5F, 0x0F, 0x05, 0x48, 0x89, 0xFF, 0xE0, rng.randrange(256)))
                 for _ in range(512))
    img = image_from_code(code)
    ours = {(g.start, g.terminator) for g in scan_gadgets(img)}
    assert ours == brute_force_gadgets(code, 0x401000)


def test_listing_matches_decoder_on_fixture(fixture_art):
    img = load_image(corpus.path(corpus.FIXTURE))
    via_listing = analyze(img, listing=corpus.path("fixture24.lst").read_text())
    assert via_listing.fmap == fixture_art.fmap
    assert via_listing.legal == fixture_art.legal
    assert via_listing.index.to_json() == fixture_art.index.to_json()


def test_listing_forms():
    text = ("401000: 5f                   \tpop    rdi\n"
            "  401001:\tc3                   \tret    \n"
            "0x401002: e8 f9 ff ff ff  call 401000 <foo>\n"
            "401007: 48 8b 47 08   mov rax,QWORD PTR [rdi+0x8]\n")
    instrs = ingest_listing(text)
    assert [i.op_class for i in instrs] == ["pop", "ret", "call_dir", "load_mem"]
    assert instrs[2].target == 0x401000


def test_listing_garbage():
    with pytest.raises(ParseError, match="line 1"):
        ingest_listing("xyz\n")
