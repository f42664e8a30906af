"""The static-analysis pipeline and its on-disk JSON bundle."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Sequence

from .functions import (FunctionMap, LegalAddressTable, build_legal_addresses,
                        identify_functions, parse_seed_file)
from .gadgets import (DEFAULT_MAX_LEN, GadgetIndex, build_gadget_index, decode_stream,
                      ingest_listing, scan_gadgets)
from .image import LoadableImage, load_image
from .x86 import Instruction

BUNDLE_FILES = ("segments.json", "functions.json", "legal.json", "gadgets.json")


@dataclasses.dataclass
class Artifacts:
    fmap: FunctionMap
    index: GadgetIndex
    legal: LegalAddressTable
    image: LoadableImage | None = None
    instrs: Sequence[Instruction] = ()
    max_len: int = DEFAULT_MAX_LEN
    entry_addr: int | None = None

    @property
    def entry(self) -> int:
        if self.image is not None:
            return self.image.entry
        if self.entry_addr is not None:
            return self.entry_addr
        return self.fmap.records[0].start

    def direct_calls(self) -> list[Instruction]:
        return [i for i in self.instrs if i.op_class == "call_dir"]


def analyze(image: LoadableImage, listing: str | None = None, seeds: str | None = None,
            max_len: int = DEFAULT_MAX_LEN) -> Artifacts:
    instrs = ingest_listing(listing) if listing is not None else decode_stream(image)
    fmap = identify_functions(image, instrs, parse_seed_file(seeds) if seeds is not None else None)
    legal = build_legal_addresses(fmap, instrs)
    index = build_gadget_index(scan_gadgets(image, max_len), fmap)
    return Artifacts(fmap, index, legal, image, instrs, max_len)


def analyze_path(path: str | Path, listing: str | Path | None = None, seeds: str | Path | None = None,
                 max_len: int = DEFAULT_MAX_LEN) -> Artifacts:
    return analyze(load_image(path),
                   Path(listing).read_text() if listing else None,
                   Path(seeds).read_text() if seeds else None,
                   max_len)


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"


def bundle_documents(art: Artifacts) -> dict[str, str]:
    docs = {
        "functions.json": _dump(art.fmap.to_json()),
        "legal.json": _dump(art.legal.to_json()),
        "gadgets.json": _dump({**art.index.to_json(), "max_len": art.max_len}),
    }
    if art.image is not None:
        docs["segments.json"] = _dump({"schema_version": 1, "entry": f"{art.image.entry:#x}",
                                       "segments": art.image.segment_table()})
    # direct call edges let a bundle drive the random-walk trace generator
    docs["calls.json"] = _dump({"schema_version": 1, "calls": [
        {"site": f"{i.vaddr:#x}", "return": f"{i.next_addr:#x}", "target": f"{i.target:#x}"}
        for i in art.direct_calls()]})
    return docs


def save_bundle(art: Artifacts, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in bundle_documents(art).items():
        (out / name).write_text(text)
    return out


def load_bundle(path: str | Path) -> Artifacts:
    path = Path(path)
    fmap = FunctionMap.from_json(json.loads((path / "functions.json").read_text()))
    legal = LegalAddressTable.from_json(json.loads((path / "legal.json").read_text()))
    gdoc = json.loads((path / "gadgets.json").read_text())
    index = GadgetIndex.from_json(gdoc)
    instrs: list[Instruction] = []
    calls = path / "calls.json"
    if calls.exists():
        for c in json.loads(calls.read_text())["calls"]:
            site, ret, target = (int(c[k], 16) for k in ("site", "return", "target"))
            instrs.append(Instruction(site, ret - site, "call_dir", "call", target=target))
    entry = None
    seg_file = path / "segments.json"
    if seg_file.exists():
        entry = int(json.loads(seg_file.read_text())["entry"], 16)
    return Artifacts(fmap, index, legal, None, instrs, gdoc.get("max_len", DEFAULT_MAX_LEN), entry)


def load_target(target: str | Path, **kwargs) -> Artifacts:
    """A bundle directory or an executable path."""
    target = Path(target)
    if target.is_dir():
        return load_bundle(target)
    return analyze_path(target, **kwargs)
