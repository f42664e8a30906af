"""``loadlord`` command line.

Exit codes: 0 success, 1 a strict-mode violation / golden mismatch / failed
check, 2 usage, parse or I/O errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

from .artifacts import analyze_path, bundle_documents, load_target, save_bundle
from .errors import LoadLordError, ParseError
from .gadgets import CLASSES
from .policy import CHAIN_PREDICATES, PolicyConfig, parse_limit

DEFAULT_FRACTIONS = "1/4,1/8,1/16,1/32"

# config-file key -> (argparse dest, converter)
_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _to_bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {text!r}") from None


_CONFIG_KEYS = {
    "limit": ("limit", str),
    "semantic_unload": ("no_semantic_unload", lambda v: not _to_bool(v)),
    "no_semantic_unload": ("no_semantic_unload", _to_bool),
    "chain_predicate": ("chain_predicate", str),
    "max_gadget_len": ("max_gadget_len", int),
    "trace": ("trace", str),
    "listing": ("listing", str),
    "seeds": ("seeds", str),
    "strict": ("strict", _to_bool),
    "seed": ("seed", int),
    "steps": ("steps", int),
    "depth": ("depth", int),
    "out": ("out", str),
    "fractions": ("fractions", str),
}

_DEFAULTS = {
    "limit": "1/16",
    "no_semantic_unload": False,
    "chain_predicate": "loadmem_and_sysg",
    "max_gadget_len": 5,
    "strict": False,
    "seed": 0,
    "steps": 200,
    "depth": 8,
    "fractions": DEFAULT_FRACTIONS,
}


def read_config(path: str | Path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _CONFIG_KEYS:
            raise ParseError(f"unknown or malformed setting {raw!r}", lineno)
        dest, conv = _CONFIG_KEYS[key]
        try:
            out[dest] = conv(value.strip())
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return out


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the config file, then from defaults."""
    fallback = dict(_DEFAULTS)
    if getattr(args, "config", None):
        fallback.update(read_config(args.config))
    merged = dict(vars(args))
    for key, value in fallback.items():
        if merged.get(key) is None:
            merged[key] = value
    return argparse.Namespace(**merged)


def policy_config(args: argparse.Namespace) -> PolicyConfig:
    frac, absolute = parse_limit(args.limit)
    return PolicyConfig(limit_fraction=frac, limit_absolute=absolute,
                        semantic_unload_enabled=not args.no_semantic_unload,
                        chain_predicate=args.chain_predicate, max_len=args.max_gadget_len,
                        strict=args.strict)


def _dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"


def _tsv(rows) -> None:
    for row in rows:
        print("\t".join("" if v is None else str(v) for v in row))


def _target(args):
    if Path(args.target).is_dir():
        return load_target(args.target)
    return load_target(args.target, listing=args.listing, seeds=args.seeds, max_len=args.max_gadget_len)


def _trace(args, art):
    from .simulator import parse_trace, random_walk_trace
    if args.trace:
        return parse_trace(Path(args.trace).read_text())
    return random_walk_trace(art, steps=args.steps, max_depth=args.depth, seed=args.seed)


def _golden_check(text: str, golden: str | None) -> int:
    if golden is None:
        return 0
    expected = Path(golden).read_text()
    if expected != text:
        print(f"golden mismatch against {golden}", file=sys.stderr)
        return 1
    print(f"golden\tmatch\t{golden}", file=sys.stderr)
    return 0


# --- commands -------------------------------------------------------------


def cmd_analyze(args) -> int:
    art = analyze_path(args.target, listing=args.listing, seeds=args.seeds, max_len=args.max_gadget_len)
    totals = art.index.totals
    _tsv([("functions", len(art.fmap)), ("total_gadgets", art.index.total_gadgets),
          *((c, totals.get(c, 0)) for c in CLASSES),
          ("call_returns", len(art.legal.call_returns)),
          ("cross_jump_targets", len(art.legal.cross_jump_targets))])
    if args.out:
        save_bundle(art, args.out)
    rc = 0
    if args.golden:
        docs = bundle_documents(art)
        for name, text in sorted(docs.items()):
            gpath = Path(args.golden) / name
            if gpath.exists():
                rc |= _golden_check(text, str(gpath))
    return rc


def _write_report(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_simulate(args) -> int:
    from .simulator import replay
    art = _target(args)
    trace = _trace(args, art)
    cfg = policy_config(args)
    report = replay(trace, art, cfg)
    text = _dumps(report.to_json())
    _write_report(text, args.out)
    if args.out:
        from .plotting import figure_path, plot_timeline
        plot_timeline(report, figure_path(args.out))
        _tsv([("limit", "effective_limit", "total_gadgets", "survive_gadgets", "reduce_percent",
               "resident_loadmem_max", "loads", "unloads", "violations"),
              (cfg.limit_label, report.effective_limit, report.total_gadgets, report.survive_gadgets,
               report.reduce_percent, report.resident_loadmem_max, report.loads, report.unloads,
               len(report.violations))])
    rc = _golden_check(text, args.golden)
    if cfg.strict and report.violations:
        v = report.violations[0]
        print(f"strict violation at {v['addr']} ({v['origin']})", file=sys.stderr)
        rc = 1
    return rc


def _fractions(text: str) -> list[Fraction]:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(Fraction(tok))
        except (ValueError, ZeroDivisionError):
            raise ParseError(f"bad fraction {tok!r}") from None
    return out


def cmd_sweep(args) -> int:
    from .simulator import sweep_limits
    art = _target(args)
    trace = _trace(args, art)
    base = policy_config(args)
    result = sweep_limits(trace, art, _fractions(args.fractions), base, workers=args.workers)
    text = _dumps(result.to_json())
    _write_report(text, args.out)
    if args.out:
        from .plotting import figure_path, plot_sweep
        plot_sweep(result, figure_path(args.out))
        _tsv([("fraction", "effective_limit", "survive_gadgets", "reduce_percent",
               "resident_loadmem_max", "loads"), *result.rows()])
        _tsv([("monotonic", str(result.monotonic).lower())])
    rc = _golden_check(text, args.golden)
    if not result.monotonic:
        print("limit sweep is not monotonic", file=sys.stderr)
        rc = 1
    return rc


def cmd_attack_test(args) -> int:
    from .simulator import generate_attack_suite, run_attack_suite, summarize_attacks
    art = _target(args)
    scenarios = generate_attack_suite(art, per_family=args.per_family)
    results = run_attack_suite(scenarios, art, policy_config(args))
    summary = summarize_attacks(results)
    text = _dumps(summary)
    _write_report(text, args.out)
    if args.out:
        _tsv([("family", "expected", "scenarios", "violation", "known_escape", "undetected")])
        _tsv((name, f["expected"], f["scenarios"], f["violation"], f["known_escape"], f["undetected"])
             for name, f in summary["families"].items())
    rc = _golden_check(text, args.golden)
    return rc if summary["all_matched"] else 1


def cmd_run(args) -> int:
    from .supervisor import run_supervised
    cfg = policy_config(args)
    result, state = run_supervised(args.target, args.args, cfg)
    if args.out:
        Path(args.out).write_text(_dumps({**result.to_json(), "events": state.event_log}))
    if result.wx_failures:
        print(f"W^X violated at {len(result.wx_failures)} stop(s)", file=sys.stderr)
        return 1
    if result.violation is not None:
        print(f"violation: illegal load address {result.violation['addr']}; child terminated",
              file=sys.stderr)
        return 1
    if result.exit_code is None:
        print(f"child killed by signal {result.signal}", file=sys.stderr)
        return 128 + (result.signal or 0)
    return result.exit_code


# --- parser ---------------------------------------------------------------


def _policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--limit", help="loading limit: fraction like 1/16 or absolute count like 2")
    p.add_argument("--no-semantic-unload", action="store_const", const=True, default=None)
    p.add_argument("--chain-predicate", choices=CHAIN_PREDICATES)
    p.add_argument("--max-gadget-len", type=int)
    p.add_argument("--strict", action="store_const", const=True, default=None)


def _analysis_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--listing", help="disassembly listing used instead of the built-in decoder")
    p.add_argument("--seeds", help="function boundary file: 'start end [name]' per line")


def _trace_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", help="trace file; without it a seeded random walk is generated")
    p.add_argument("--seed", type=int, help="random-walk seed")
    p.add_argument("--steps", type=int, help="random-walk length")
    p.add_argument("--depth", type=int, help="random-walk maximum call depth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loadlord", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file; flags override it")
    common.add_argument("--out", help="output path (bundle directory for analyze, JSON otherwise)")
    common.add_argument("--golden", help="compare output with a committed file (directory for analyze)")

    p = sub.add_parser("analyze", parents=[common], help="build the function map, legal table and gadget index")
    p.add_argument("target", help="ELF executable")
    _analysis_flags(p)
    p.add_argument("--max-gadget-len", type=int)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", parents=[common], help="replay a trace through the policy")
    p.add_argument("target", help="ELF executable or analysis bundle directory")
    _analysis_flags(p)
    _policy_flags(p)
    _trace_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common], help="replay one trace under several loading limits")
    p.add_argument("target")
    _analysis_flags(p)
    _policy_flags(p)
    _trace_flags(p)
    p.add_argument("--fractions", help=f"comma-separated limits (default {DEFAULT_FRACTIONS})")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attack-test", parents=[common], help="probe the address checker with attack scenarios")
    p.add_argument("target")
    _analysis_flags(p)
    _policy_flags(p)
    p.add_argument("--per-family", type=int, default=None, help="cap scenarios per family")
    p.set_defaults(func=cmd_attack_test)

    p = sub.add_parser("run", parents=[common], help="execute a static binary under live supervision")
    p.add_argument("target")
    _policy_flags(p)
    p.add_argument("args", nargs=argparse.REMAINDER, help="arguments passed to the program")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = args.func
    try:
        args = _resolve(args)
        return func(args)
    except (LoadLordError, OSError, ValueError) as exc:
        print(f"loadlord: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
