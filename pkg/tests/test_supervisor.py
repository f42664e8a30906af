import subprocess
import sys

import pytest

from loadlord import corpus
from loadlord.errors import SpawnFailure
from loadlord.policy import PolicyConfig
from loadlord.supervisor import (FILLER, parse_maps, run_supervised, spawn_supervised,
                                 wx_violations)

from live import require_live, run_native

pytestmark = pytest.mark.live


def test_parse_maps_and_wx():
    text = ("00400000-00401000 r--p 00000000 00:00 0  /bin/x\n"
            "00401000-00402000 r-xp 00001000 00:00 0  /bin/x\n"
            "7f0000000000-7f0000001000 rwxp 00000000 00:00 0 \n")
    maps = parse_maps(text)
    assert maps[1][:3] == (0x401000, 0x402000, "r-xp")
    assert wx_violations(maps) == [(0x7F0000000000, 0x7F0000001000, "rwxp")]


def test_nonexistent_path():
    with pytest.raises(SpawnFailure):
        spawn_supervised("/nonexistent/binary")


def test_dynamic_binary_rejected():
    with pytest.raises(SpawnFailure):
        spawn_supervised(sys.executable)


def supervised_output(name, limit, *args):
    """Run a corpus program under the CLI so its stdout can be captured."""
    return subprocess.run([sys.executable, "-m", "loadlord.cli", "run", "--limit", limit,
                           str(corpus.path(name)), *args], capture_output=True)


@pytest.mark.parametrize("limit", ["1", "2", "1/4"])
def test_demo_transparent(limit):
    require_live()
    native = run_native(corpus.path(corpus.DEMO))
    ours = supervised_output(corpus.DEMO, limit)
    assert ours.stdout == native.stdout
    assert ours.returncode == native.returncode == 7


def test_demo_traps_and_wx():
    require_live()
    result, state = run_supervised(corpus.path(corpus.DEMO), cfg=PolicyConfig.with_limit("2"))
    assert result.exit_code == 7
    assert result.traps > 0 and result.wx_checks == result.traps
    assert result.wx_failures == []
    assert result.unloads > 0  # eviction happened and evicted callers were reloaded
    kinds = {e.get("reason") for e in state.event_log if e["kind"] == "load"}
    assert {"new_function", "return_reload"} <= kinds


def test_overflow_terminated():
    require_live()
    native = run_native(corpus.path(corpus.OVERFLOW))
    assert b"PWNED" in native.stdout
    proc = spawn_supervised(corpus.path(corpus.OVERFLOW), cfg=PolicyConfig.with_limit("2"))
    helper = next(r for r in proc.art.fmap if r.name == "helper")
    result = proc.run()
    assert result.violation is not None
    # xor eax, eax is two bytes; the forged return lands on the pop rdi after it
    assert int(result.violation["addr"], 16) == helper.start + 2
    assert result.exit_code is None and result.wx_failures == []
    ours = supervised_output(corpus.OVERFLOW, "2")
    assert b"PWNED" not in ours.stdout
    assert ours.returncode == 1
    assert b"violation" in ours.stderr


def test_load_copy_fidelity_and_eviction():
    require_live()
    proc = spawn_supervised(corpus.path(corpus.DEMO), cfg=PolicyConfig.with_limit("1"))
    try:
        entry = proc.art.fmap.owning(proc.image.entry)
        assert proc.read(entry.start, entry.size) == proc.prepare_slice(entry.start, entry.end)
        other = next(r for r in proc.art.fmap if r.id != entry.id)
        assert proc.read(other.start, other.size) == bytes([FILLER]) * other.size
        proc.load_function_bytes(other)
        assert proc.read(other.start, other.size) == proc.prepare_slice(other.start, other.end)
        proc.evict_function_bytes(other)
        assert proc.read(other.start, other.size) == bytes([FILLER]) * other.size
        perms = [p for lo, hi, p, _ in proc.maps() if lo <= other.start < hi][0]
        assert perms.startswith("r-x")
        prep = [p for lo, hi, p, _ in proc.maps() if lo <= proc.prepare_base < hi][0]
        assert prep.startswith("r--")
    finally:
        proc.kill()
