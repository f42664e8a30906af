"""Deterministic trace replay over the residency policy.

A trace is a list of control transfers (``call``, ``ret``, ``jmp``) plus
attacker-controlled ``probe`` transfers.  Replaying it drives a fresh
``PolicyState`` and records how many gadgets were resident at each quiescent
point, which loads were refused, and what the attacker probes achieved.
"""

from __future__ import annotations

import dataclasses
import random
from concurrent.futures import ProcessPoolExecutor
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Callable, Iterable, Sequence

from .artifacts import Artifacts
from .errors import ParseError, StrictViolation, ZeroTotal
from .policy import (CROSS_JUMP, NEW_FUNCTION, VIOLATION, LoadOutcome, PolicyConfig,
                     PolicyState)

SCHEMA_VERSION = 1

EVENT_KINDS = ("call", "ret", "jmp", "probe")

VIOLATION_OUTCOME = "violation"
KNOWN_ESCAPE = "known_escape"
UNDETECTED = "undetected"


@dataclasses.dataclass(frozen=True)
class TraceEvent:
    kind: str
    addr: int
    seq: int = 0

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown trace event kind {self.kind!r}")

    def __str__(self) -> str:
        return f"{self.kind} {self.addr:#x}"


def parse_trace(text: str) -> list[TraceEvent]:
    events = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in EVENT_KINDS:
            raise ParseError(f"expected '<call|ret|jmp|probe> <addr>', got {raw!r}", lineno)
        try:
            addr = int(parts[1], 16)
        except ValueError:
            raise ParseError(f"bad address {parts[1]!r}", lineno) from None
        events.append(TraceEvent(parts[0], addr, len(events)))
    return events


def format_trace(events: Iterable[TraceEvent]) -> str:
    return "".join(f"{e}\n" for e in events)


def measure_reduction(total: int, survive: int) -> float:
    """Percentage of gadgets removed, rounded half-up to two decimals."""
    if total <= 0:
        raise ZeroTotal("total gadget count must be positive")
    if not 0 <= survive <= total:
        raise ValueError(f"survive count {survive} outside [0, {total}]")
    exact = 100 * (1 - Fraction(survive, total))
    q = (Decimal(exact.numerator) / Decimal(exact.denominator)).quantize(Decimal("0.01"),
                                                                         rounding=ROUND_HALF_UP)
    return float(q)


def _pct(total: int, survive: float) -> float | None:
    if total <= 0:
        return None
    return round(100 * (1 - survive / total), 2)


@dataclasses.dataclass
class SimReport:
    config: dict
    effective_limit: int
    total_functions: int
    total_gadgets: int
    survive_gadgets: int = 0
    survive_gadgets_mean: float = 0.0
    survive_gadgets_final: int = 0
    resident_loadmem_max: int = 0
    loads: int = 0
    unloads: int = 0
    events: int = 0
    residual_risk_events: int = 0
    aborted: bool = False
    violations: list[dict] = dataclasses.field(default_factory=list)
    probes: list[dict] = dataclasses.field(default_factory=list)
    survive_series: list[int] = dataclasses.field(default_factory=list)
    timeline: list[dict] = dataclasses.field(default_factory=list)

    @property
    def reduce_percent(self) -> float | None:
        if self.total_gadgets <= 0:
            return None
        return measure_reduction(self.total_gadgets, self.survive_gadgets)

    def to_json(self, include_timeline: bool = True) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "effective_limit": self.effective_limit,
            "total_functions": self.total_functions,
            "total_gadgets": self.total_gadgets,
            "survive_gadgets": self.survive_gadgets,
            "survive_gadgets_mean": round(self.survive_gadgets_mean, 4),
            "survive_gadgets_final": self.survive_gadgets_final,
            "reduce_percent": self.reduce_percent,
            "reduce_percent_mean": _pct(self.total_gadgets, self.survive_gadgets_mean),
            "reduce_percent_final": _pct(self.total_gadgets, self.survive_gadgets_final),
            "resident_loadmem_max": self.resident_loadmem_max,
            "events": self.events,
            "loads": self.loads,
            "unloads": self.unloads,
            "residual_risk_events": self.residual_risk_events,
            "aborted": self.aborted,
            "violations": self.violations,
            "probes": self.probes,
        }
        if include_timeline:
            doc["survive_series"] = self.survive_series
            doc["timeline"] = self.timeline
        return doc


Observer = Callable[[PolicyState, TraceEvent, LoadOutcome], None]


def _apply(state: PolicyState, ev: TraceEvent) -> LoadOutcome:
    if ev.kind == "call":
        return state.request_load(ev.addr, NEW_FUNCTION)
    if ev.kind == "jmp":
        return state.request_load(ev.addr, CROSS_JUMP)
    if ev.kind == "ret":
        return state.handle_return(ev.addr)
    return state.request_load(ev.addr, None, origin="attacker")


def replay(trace: Sequence[TraceEvent], art: Artifacts, cfg: PolicyConfig | None = None,
           observer: Observer | None = None) -> SimReport:
    cfg = cfg or PolicyConfig()
    state = PolicyState(art.fmap, art.index, art.legal, cfg)
    report = SimReport(cfg.to_json(), state.effective_limit, len(art.fmap), art.index.total_gadgets)
    total_survive = 0
    for seq, ev in enumerate(trace):
        try:
            outcome = _apply(state, ev)
        except StrictViolation as exc:
            report.violations.append({"seq": seq, "kind": ev.kind, "addr": f"{exc.addr:#x}",
                                      "origin": exc.origin})
            report.aborted = True
            report.events += 1
            break
        report.events += 1
        if outcome.kind == VIOLATION:
            report.violations.append({"seq": seq, "kind": ev.kind, "addr": f"{ev.addr:#x}",
                                      "origin": "attacker" if ev.kind == "probe" else "program"})
        if ev.kind == "probe":
            report.probes.append({"seq": seq, "addr": f"{ev.addr:#x}",
                                  "outcome": probe_outcome(art, outcome)})
        survive = state.resident_gadgets
        report.survive_series.append(survive)
        total_survive += survive
        report.survive_gadgets = max(report.survive_gadgets, survive)
        report.resident_loadmem_max = max(report.resident_loadmem_max,
                                          state.class_counters.get("LoadMemG", 0))
        if observer is not None:
            observer(state, ev, outcome)
    report.survive_gadgets_final = state.resident_gadgets
    report.survive_gadgets_mean = total_survive / len(report.survive_series) if report.survive_series else 0.0
    report.loads = sum(e["kind"] == "load" for e in state.event_log)
    report.unloads = sum(e["kind"] == "unload" for e in state.event_log)
    report.residual_risk_events = sum(e["kind"] == "residual_risk" for e in state.event_log)
    report.timeline = state.event_log
    return report


def probe_outcome(art: Artifacts, outcome: LoadOutcome) -> str:
    if outcome.kind == VIOLATION:
        return VIOLATION_OUTCOME
    if outcome.addr in art.legal.function_starts:
        return KNOWN_ESCAPE
    return UNDETECTED


# --- limit sweeps ----------------------------------------------------------


@dataclasses.dataclass
class SweepResult:
    reports: dict[Fraction, SimReport]
    monotonic: bool

    def rows(self) -> list[tuple[str, int, int, float | None, int, int]]:
        out = []
        for frac in sorted(self.reports, reverse=True):
            r = self.reports[frac]
            out.append((f"{frac.numerator}/{frac.denominator}", r.effective_limit, r.survive_gadgets,
                        r.reduce_percent, r.resident_loadmem_max, r.loads))
        return out

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "monotonic": self.monotonic,
            "reports": {f"{f.numerator}/{f.denominator}": self.reports[f].to_json(include_timeline=False)
                        for f in sorted(self.reports, reverse=True)},
        }


def limit_monotonic(reports: Iterable[SimReport]) -> bool:
    """Max resident gadget total never decreases as the effective limit grows."""
    ordered = sorted(reports, key=lambda r: r.effective_limit)
    return all(a.survive_gadgets <= b.survive_gadgets
               for a, b in zip(ordered, ordered[1:]))


def _replay_job(args):
    trace, art, cfg = args
    return replay(trace, art, cfg)


def sweep_limits(trace: Sequence[TraceEvent], art: Artifacts, fractions: Iterable[Fraction | str],
                 base: PolicyConfig | None = None, workers: int = 1) -> SweepResult:
    base = base or PolicyConfig()
    fracs = []
    for f in fractions:
        f = Fraction(f)
        if not 0 < f <= 1:
            raise ValueError(f"fraction {f} outside (0, 1]")
        fracs.append(f)
    cfgs = [dataclasses.replace(base, limit_fraction=f, limit_absolute=None) for f in fracs]
    jobs = [(list(trace), art, c) for c in cfgs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replay_job, jobs))
    else:
        results = [_replay_job(j) for j in jobs]
    reports = dict(zip(fracs, results))
    return SweepResult(reports, limit_monotonic(reports.values()))


# --- synthetic traces -----------------------------------------------------


def call_edges(art: Artifacts) -> dict[int, list[tuple[int, int]]]:
    """function id -> [(return address, callee start)] for direct calls to function starts."""
    edges: dict[int, list[tuple[int, int]]] = {r.id: [] for r in art.fmap.records}
    for ins in art.instrs:
        if ins.op_class != "call_dir" or ins.target not in art.legal.function_starts:
            continue
        caller = art.fmap.owning(ins.vaddr)
        if caller is None or ins.next_addr not in art.legal.call_returns:
            continue
        edges[caller.id].append((ins.next_addr, ins.target))
    return edges


def jump_edges(art: Artifacts) -> dict[int, list[int]]:
    edges: dict[int, list[int]] = {r.id: [] for r in art.fmap.records}
    for ins in art.instrs:
        if ins.op_class == "jmp_dir" and ins.target in art.legal.cross_jump_targets:
            src = art.fmap.owning(ins.vaddr)
            if src is not None:
                edges[src.id].append(ins.target)
    return edges


def random_walk_trace(art: Artifacts, steps: int = 200, max_depth: int = 8, seed: int = 0,
                      call_prob: float = 0.6, jump_prob: float = 0.05) -> list[TraceEvent]:
    """A plausible call/return trace from a seeded random walk over direct-call edges."""
    rng = random.Random(seed)
    calls = call_edges(art)
    jumps = jump_edges(art)
    root = art.fmap.owning(art.entry) or art.fmap.records[0]
    events = [TraceEvent("call", root.start, 0)]
    cur = root.id
    stack: list[tuple[int, int]] = []  # (return address, caller id)
    while len(events) < steps:
        out = calls[cur]
        if jumps[cur] and rng.random() < jump_prob:
            target = rng.choice(jumps[cur])
            events.append(TraceEvent("jmp", target, len(events)))
            cur = art.fmap.owning(target).id
        elif out and len(stack) < max_depth and (not stack or rng.random() < call_prob):
            ret, callee = rng.choice(out)
            events.append(TraceEvent("call", callee, len(events)))
            stack.append((ret, cur))
            cur = art.fmap.owning(callee).id
        elif stack:
            ret, caller = stack.pop()
            events.append(TraceEvent("ret", ret, len(events)))
            cur = caller
        else:
            events.append(TraceEvent("call", root.start, len(events)))
            cur = root.id
    return events


# --- attack scenarios -----------------------------------------------------


@dataclasses.dataclass(frozen=True)
class AttackScenario:
    family: str
    name: str
    events: tuple[TraceEvent, ...]
    expected: str

    @property
    def probe_addr(self) -> int:
        return self.events[-1].addr


FAMILY_MID_FUNCTION = "a_mid_function_gadget"
FAMILY_FORGED_RETURN = "b_forged_return"
FAMILY_FUNCTION_ENTRY = "c_function_entry"
FAMILY_LEGIT_RETURN = "boundary_call_return"


def _sample(addrs: list[int], limit: int | None) -> list[int]:
    addrs = sorted(set(addrs))
    if limit is None or len(addrs) <= limit:
        return addrs
    step = len(addrs) / limit
    return [addrs[int(i * step)] for i in range(limit)]


def generate_attack_suite(art: Artifacts, per_family: int | None = None,
                          include_boundary: bool = True) -> list[AttackScenario]:
    if art.index.total_gadgets == 0:
        raise ValueError("attack suite needs a non-empty gadget index")
    legal = art.legal
    entry = art.fmap.owning(art.entry) or art.fmap.records[0]
    preamble = (TraceEvent("call", entry.start, 0),)

    mid = []
    for g in art.index.gadgets():
        rec = art.fmap.owning(g.start)
        if rec is not None and g.start != rec.start and not legal.is_legal(g.start):
            mid.append(g.start)

    forged = []
    for ret in legal.call_returns:
        rec = art.fmap.owning(ret)
        for delta in (1, 2, 3, -1):
            cand = ret + delta
            if rec.contains(cand) and not legal.is_legal(cand):
                forged.append(cand)
                break

    families = [
        (FAMILY_MID_FUNCTION, mid, VIOLATION_OUTCOME),
        (FAMILY_FORGED_RETURN, forged, VIOLATION_OUTCOME),
        (FAMILY_FUNCTION_ENTRY, list(legal.function_starts), KNOWN_ESCAPE),
    ]
    if include_boundary:
        only_returns = [a for a in legal.call_returns if a not in legal.function_starts]
        families.append((FAMILY_LEGIT_RETURN, only_returns, UNDETECTED))

    out = []
    for family, addrs, expected in families:
        for addr in _sample(addrs, per_family):
            probe = TraceEvent("probe", addr, 1)
            out.append(AttackScenario(family, f"{family}@{addr:#x}", preamble + (probe,), expected))
    return out


@dataclasses.dataclass
class AttackResult:
    scenario: AttackScenario
    outcome: str

    @property
    def matched(self) -> bool:
        return self.outcome == self.scenario.expected


def run_attack_suite(scenarios: Sequence[AttackScenario], art: Artifacts,
                     cfg: PolicyConfig | None = None) -> list[AttackResult]:
    cfg = dataclasses.replace(cfg or PolicyConfig(), strict=False)
    results = []
    for sc in scenarios:
        rep = replay(sc.events, art, cfg)
        results.append(AttackResult(sc, rep.probes[-1]["outcome"]))
    return results


def summarize_attacks(results: Sequence[AttackResult]) -> dict:
    fams: dict[str, dict] = {}
    for r in results:
        f = fams.setdefault(r.scenario.family, {"expected": r.scenario.expected, "scenarios": 0,
                                                VIOLATION_OUTCOME: 0, KNOWN_ESCAPE: 0,
                                                UNDETECTED: 0, "mismatches": []})
        f["scenarios"] += 1
        f[r.outcome] += 1
        if not r.matched:
            f["mismatches"].append(f"{r.scenario.probe_addr:#x}")
    for f in fams.values():
        n = f["scenarios"]
        f["violation_percent"] = round(100 * f[VIOLATION_OUTCOME] / n, 2) if n else None
    return {"schema_version": SCHEMA_VERSION,
            "all_matched": all(r.matched for r in results),
            "families": dict(sorted(fams.items()))}
