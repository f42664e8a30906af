"""Runtime residency policy.

The engine keeps at most ``effective_limit`` functions resident, evicting in
FIFO order, refuses any load whose address is not a function start, a call
return address or a cross-function jump target, and (when semantic unloading
is on) evicts gadget-bearing functions until the resident set can no longer
supply a chain.

One ``PolicyState`` serves one execution context; callers serialise events.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import Counter, OrderedDict
from fractions import Fraction

from .errors import EmptyResidentSet, InconsistentArtifacts, StrictViolation, UnknownAddress
from .functions import FunctionMap, LegalAddressTable
from .gadgets import CLASSES, GadgetIndex

LOADMEM_ONLY = "loadmem_only"
LOADMEM_AND_SYSG = "loadmem_and_sysg"
CHAIN_PREDICATES = (LOADMEM_ONLY, LOADMEM_AND_SYSG)

NEW_FUNCTION = "new_function"
RETURN_RELOAD = "return_reload"
CROSS_JUMP = "cross_jump"
UNCLASSIFIED = "unclassified"  # an illegal address with no caller-supplied reason

ALREADY_RESIDENT = "already_resident"
LOADED = "loaded"
VIOLATION = "violation"


def parse_limit(text: str | int | Fraction) -> tuple[Fraction | None, int | None]:
    """``"1/16"`` -> fractional limit, ``"2"`` -> absolute limit of two functions."""
    if isinstance(text, Fraction):
        return text, None
    if isinstance(text, int):
        return None, text
    text = str(text).strip()
    if "/" in text or "." in text:
        try:
            frac = Fraction(text)
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"bad limit {text!r}") from None
        return frac, None
    try:
        return None, int(text)
    except ValueError:
        raise ValueError(f"bad limit {text!r}") from None


@dataclasses.dataclass(frozen=True)
class PolicyConfig:
    limit_fraction: Fraction | None = Fraction(1, 16)
    limit_absolute: int | None = None
    semantic_unload_enabled: bool = True
    chain_predicate: str = LOADMEM_AND_SYSG
    max_len: int = 5
    strict: bool = False

    def __post_init__(self):
        if (self.limit_fraction is None) == (self.limit_absolute is None):
            raise ValueError("exactly one of limit_fraction and limit_absolute must be set")
        if self.limit_fraction is not None:
            object.__setattr__(self, "limit_fraction", Fraction(self.limit_fraction))
            if not 0 < self.limit_fraction <= 1:
                raise ValueError(f"limit fraction {self.limit_fraction} is outside (0, 1]")
        if self.limit_absolute is not None and self.limit_absolute < 1:
            raise ValueError("absolute limit must be positive")
        if self.chain_predicate not in CHAIN_PREDICATES:
            raise ValueError(f"unknown chain predicate {self.chain_predicate!r}")
        if self.max_len < 1:
            raise ValueError("max_len must be at least 1")

    @classmethod
    def with_limit(cls, limit: str | int | Fraction, **kwargs) -> PolicyConfig:
        frac, absolute = parse_limit(limit)
        return cls(limit_fraction=frac, limit_absolute=absolute, **kwargs)

    @property
    def limit_label(self) -> str:
        if self.limit_fraction is not None:
            f = self.limit_fraction
            return f"{f.numerator}/{f.denominator}"
        return str(self.limit_absolute)

    def effective_limit(self, total_functions: int) -> int:
        if self.limit_absolute is not None:
            return self.limit_absolute
        return max(1, math.floor(self.limit_fraction * total_functions))

    def to_json(self) -> dict:
        return {
            "limit": self.limit_label,
            "semantic_unload": self.semantic_unload_enabled,
            "chain_predicate": self.chain_predicate,
            "max_gadget_len": self.max_len,
            "strict": self.strict,
        }


def predicate_holds(counts: Counter | dict, predicate: str) -> bool:
    if counts.get("LoadMemG", 0) <= 0:
        return False
    if predicate == LOADMEM_ONLY:
        return True
    return counts.get("SYSG", 0) > 0 or counts.get("JumpG", 0) > 0


@dataclasses.dataclass(frozen=True)
class LoadOutcome:
    kind: str
    evicted: tuple[int, ...] = ()
    reason: str = NEW_FUNCTION
    function: int | None = None
    addr: int | None = None

    def __post_init__(self):
        if self.evicted and self.kind != LOADED:
            raise ValueError("only a load can evict")


class PolicyState:
    def __init__(self, fmap: FunctionMap, index: GadgetIndex, legal: LegalAddressTable,
                 cfg: PolicyConfig | None = None):
        cfg = cfg or PolicyConfig()
        unknown = set(index.by_function) - set(fmap.ids)
        if unknown:
            raise InconsistentArtifacts(f"gadget index references unknown functions {sorted(unknown)}")
        self.fmap = fmap
        self.index = index
        self.legal = legal
        self.cfg = cfg
        self.effective_limit = cfg.effective_limit(len(fmap))
        self.resident: OrderedDict[int, int] = OrderedDict()  # fid -> load sequence number
        self.class_counters: Counter = Counter()
        self.resident_gadgets = 0
        self.event_log: list[dict] = []
        self.clock = 0
        self._seq = 0

    # -- bookkeeping ------------------------------------------------------

    def _counts(self, fid: int) -> Counter:
        return self.index.class_counts.get(fid, Counter())

    def _add(self, fid: int) -> None:
        self._seq += 1
        self.resident[fid] = self._seq
        self.class_counters.update(self._counts(fid))
        self.resident_gadgets += self.index.gadget_counts.get(fid, 0)

    def _remove(self, fid: int, cause: str) -> None:
        del self.resident[fid]
        self.class_counters.subtract(self._counts(fid))
        self.class_counters = +self.class_counters  # drop zero entries
        self.resident_gadgets -= self.index.gadget_counts.get(fid, 0)
        rec = self.fmap[fid]
        self._log("unload", rec.start, fid, cause=cause)

    def _log(self, kind: str, addr: int | None, fid: int | None, evicted=(), **extra) -> None:
        entry = {
            "clock": self.clock,
            "kind": kind,
            "addr": None if addr is None else f"{addr:#x}",
            "function": fid,
            "evicted": list(evicted),
            "class_counters": {c: self.class_counters.get(c, 0) for c in CLASSES},
        }
        entry.update(extra)
        self.event_log.append(entry)

    def counters_snapshot(self) -> dict[str, int]:
        return {c: self.class_counters.get(c, 0) for c in CLASSES}

    # -- operations -------------------------------------------------------

    def chain_capable(self) -> bool:
        return predicate_holds(self.class_counters, self.cfg.chain_predicate)

    def evict_for_room(self) -> int:
        if not self.resident:
            raise EmptyResidentSet("no resident function to evict")
        fid = next(iter(self.resident))
        self._remove(fid, "fifo")
        return fid

    def semantic_unload(self, exempt: int | None = None) -> list[int]:
        """Evict until the resident set is no longer chain-capable.

        The function named by ``exempt`` is never evicted.  If it alone
        satisfies the chain predicate, every other contributor is evicted and a
        ``residual_risk`` event is logged.
        """
        evicted: list[int] = []
        if not self.chain_capable():
            self._log("noop", None, exempt, cause="semantic")
            return evicted
        pred = self.cfg.chain_predicate
        own = self._counts(exempt) if exempt is not None else Counter()
        while self.chain_capable():
            others = [f for f in self.resident if f != exempt]
            if exempt is not None and predicate_holds(own, pred):
                for fid in others:
                    c = self._counts(fid)
                    if c.get("LoadMemG", 0) or c.get("SYSG", 0) or c.get("JumpG", 0):
                        self._remove(fid, "semantic")
                        evicted.append(fid)
                self._log("residual_risk", self.fmap[exempt].start, exempt)
                break
            if own.get("LoadMemG", 0) == 0:
                candidates = [f for f in others if self._counts(f).get("LoadMemG", 0) > 0]
            else:
                candidates = [f for f in others
                              if self._counts(f).get("SYSG", 0) or self._counts(f).get("JumpG", 0)]
            # highest LoadMemG first; resident order is FIFO so the first max is the oldest
            victim = max(candidates, key=lambda f: self._counts(f).get("LoadMemG", 0))
            self._remove(victim, "semantic")
            evicted.append(victim)
        return evicted

    def _reason_for(self, addr: int) -> str:
        if addr in self.legal.function_starts:
            return NEW_FUNCTION
        if addr in self.legal.call_returns:
            return RETURN_RELOAD
        return CROSS_JUMP

    def request_load(self, addr: int, reason: str | None = None, origin: str = "program") -> LoadOutcome:
        self.clock += 1
        legal = self.legal.is_legal(addr)
        reason = reason or (self._reason_for(addr) if legal else UNCLASSIFIED)
        if not legal:
            self._log("violation", addr, None, reason=reason, origin=origin)
            if self.cfg.strict:
                raise StrictViolation(addr, origin)
            return LoadOutcome(VIOLATION, (), reason, None, addr)
        rec = self.fmap.owning(addr)
        if rec is None:
            raise UnknownAddress(f"legal address {addr:#x} is not inside any function")
        if rec.id in self.resident:
            return LoadOutcome(ALREADY_RESIDENT, (), reason, rec.id, addr)
        evicted = []
        while len(self.resident) >= self.effective_limit:
            evicted.append(self.evict_for_room())
        self._add(rec.id)
        self._log("load", addr, rec.id, evicted, reason=reason, origin=origin)
        if self.cfg.semantic_unload_enabled and self.chain_capable():
            evicted.extend(self.semantic_unload(exempt=rec.id))
        return LoadOutcome(LOADED, tuple(evicted), reason, rec.id, addr)

    def handle_return(self, ret_addr: int, origin: str = "program") -> LoadOutcome:
        return self.request_load(ret_addr, RETURN_RELOAD, origin)

    # -- inspection -------------------------------------------------------

    def residual_risk_active(self) -> bool:
        """True when the latest event left a logged, accepted chain-capable state."""
        for entry in reversed(self.event_log):
            if entry["kind"] == "residual_risk":
                fid = entry["function"]
                return fid in self.resident
            if entry["kind"] in ("load", "unload"):
                return False
        return False

    def event_lines(self) -> str:
        return "".join(json.dumps(e) + "\n" for e in self.event_log)


def init_state(fmap: FunctionMap, index: GadgetIndex, legal: LegalAddressTable,
               cfg: PolicyConfig | None = None) -> PolicyState:
    return PolicyState(fmap, index, legal, cfg)


def resident_gadget_census(state: PolicyState, index: GadgetIndex | None = None) -> dict[str, int]:
    """Recount resident gadgets from the gadget lists themselves."""
    index = index or state.index
    counts = {c: 0 for c in CLASSES}
    total = 0
    for fid in state.resident:
        for g in index.by_function.get(fid, ()):
            total += 1
            for c in g.classes:
                counts[c] += 1
    counts["total"] = total
    return counts
