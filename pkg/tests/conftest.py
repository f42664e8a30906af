import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from loadlord import corpus  # noqa: E402
from loadlord.artifacts import analyze_path  # noqa: E402
from loadlord.simulator import parse_trace  # noqa: E402

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return GOLDEN


@pytest.fixture(scope="session")
def corpus_artifacts():
    return {name: analyze_path(corpus.path(name)) for name in corpus.BINARIES}


@pytest.fixture(scope="session")
def fixture_art(corpus_artifacts):
    return corpus_artifacts[corpus.FIXTURE]


@pytest.fixture(scope="session")
def fixture_trace():
    return parse_trace(corpus.path("fixture24.trace").read_text())


# --- acceptance summary -----------------------------------------------------

CRITERIA = {
    1: "reduction arithmetic reproduces the 16 published rows to +-0.01",
    2: "simulator reduction equals an independent census at every quiescent point",
    3: "gadget scanner agrees with the brute-force every-offset decoder",
    4: "no direct-call target lies strictly inside a function after splitting",
    5: "bounded residency, FIFO order and chain-breaking hold over random sequences",
    6: "mid-function and forged-return probes are violations; entries escape",
    7: "max resident gadgets is non-decreasing in the loading limit",
    8: "live supervision is transparent, keeps W^X, and stops the overflow",
}

_acceptance: dict[int, list] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    num = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
    _acceptance.setdefault(num, []).append(report)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        reports = _acceptance.get(num)
        if not reports:
            continue
        failed = [r for r in reports if r.failed]
        skipped = [r for r in reports if r.skipped]
        if failed:
            status = "FAIL"
        elif skipped and len(skipped) == len(reports):
            status = "SKIP"
        else:
            status = "PASS"
        detail = f"{len(reports) - len(failed) - len(skipped)}/{len(reports)} checks passed"
        if failed:
            names = [r.nodeid.split("[")[-1].rstrip("]") if "[" in r.nodeid else r.nodeid.split("::")[-1]
                     for r in failed]
            detail += "; failing: " + ", ".join(names)
        if skipped:
            reason = skipped[0].longrepr[2] if isinstance(skipped[0].longrepr, tuple) else ""
            detail += f"; skipped: {reason}"
        terminalreporter.write_line(f"criterion {num} {status}: {CRITERIA[num]} ({detail})")
