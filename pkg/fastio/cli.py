"""Command-line entry point: ``fastio <subcommand> [flags]``.

Subcommands: ``scan``, ``attack``, ``ept-trace``, ``layout``, ``bench`` and
``fuzz``. Settings resolve as defaults < ``--config`` file section <
``FASTIO_<SECTION>_<FIELD>`` environment variables < flags; ``FASTIO_SEED`` and
``FASTIO_OUT`` stand in for ``--seed`` and ``--out``.

Exit status is 0 on success, 1 if any security property was breached (an
undetected attack, a fuzz audit violation, privileged execution outside the
driver) and 2 for malformed input.
"""
import argparse
import json
import logging
import os
import sys
from collections import OrderedDict
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import pandas as pd

from fastio.ept import EptConfig, FuzzConfig, run_fuzz
from fastio.layout import PptLayout
from fastio.machine import (
    ATTACK_POLICIES,
    DRIVER_SCENARIOS,
    INTERRUPT_DELIVERIES,
    AttackOutcome,
    AttackScenario,
    MachineConfig,
    SearchConfig,
    builtin_workload,
    exhaustive_search,
    prepare_vm,
    run_all,
    runs_to_frame,
)
from fastio.machine.workload import BUILTIN_WORKLOADS
from fastio.scan import OpcodePredicate, hits_to_frame, scan_buffer
from fastio.scenario import ScenarioConfig, run_scenario
from fastio.switch import BENCH_GRID, PACKET_SIZES, RX_MODES, BenchConfig, run_bench, run_grid
from fastio.types import Config
from fastio.utils import ReportWriter, load_config_file, resolve_config
from fastio.utils.config_utils import ENV_PREFIX

EXIT_OK = 0
EXIT_BREACH = 1
EXIT_MALFORMED = 2

ALL_GRID = "all"


def _int(raw: str) -> int:
    try:
        return int(raw, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {raw!r}") from None


def _byte_list(raw: str) -> List[int]:
    return [_int(part) for part in raw.split(",") if part.strip()]


class Output:
    """Where a subcommand's reports go: files under ``--out`` or stdout.

    Parameters
    ----------
    out_dir
        Report root (stdout if None)
    run_name
        Subdirectory of this run under ``out_dir``
    stream
        Stream written to when there is no ``out_dir``
    """

    def __init__(self, out_dir: Optional[str], run_name: str, stream: Any = None) -> None:
        self.stream = stream if stream is not None else sys.stdout
        self.writer = ReportWriter(out_dir=out_dir, run_name=run_name) if out_dir else None

    def csv(self, df: pd.DataFrame, filename: str) -> None:
        if self.writer is not None:
            self.writer.write_csv(df, filename)
        else:
            self.stream.write(df.to_csv(index=False))

    def json(self, obj: Mapping[str, Any], filename: str) -> None:
        if self.writer is not None:
            self.writer.write_json(obj, filename)
        else:
            self.stream.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")

    def jsonl(self, records: Iterable[Mapping[str, Any]], filename: str) -> None:
        if self.writer is not None:
            self.writer.write_jsonl(records, filename)
        else:
            for record in records:
                self.stream.write(json.dumps(record, sort_keys=True) + "\n")

    def config(self, config: Config, filename: str = "config.json") -> None:
        """Record the resolved settings (files only)."""
        if self.writer is not None:
            self.writer.write_config(config, filename)


class Context:
    """Resolved common flags shared by every subcommand."""

    def __init__(self, args: argparse.Namespace, environ: Mapping[str, str]) -> None:
        self.args = args
        self.environ = environ
        self.sections: Dict[str, Dict[str, Any]] = load_config_file(args.config) if args.config else {}
        seed = args.seed if args.seed is not None else environ.get(f"{ENV_PREFIX}SEED")
        self.seed: Optional[int] = None if seed is None else _int(str(seed))
        self.out_dir: Optional[str] = args.out or environ.get(f"{ENV_PREFIX}OUT")
        self.progress_bar: bool = bool(getattr(args, "progress", False))

    def resolve(self, name: str, config: Config, flags: Optional[Dict[str, Any]] = None) -> Config:
        return resolve_config(
            config,
            self.sections.get(name),
            f"{ENV_PREFIX}{name.upper()}_",
            flags,
            self.environ,
        )

    def output(self, subcommand: str) -> Output:
        seed = 0 if self.seed is None else self.seed
        return Output(self.out_dir, f"{subcommand}-seed{seed}")

    def layout(self) -> PptLayout:
        a = self.args
        flags = {
            "pdva": getattr(a, "pdva", None),
            "device_pages": getattr(a, "device_pages", None),
            "ppt_va_start": getattr(a, "ppt_va_start", None),
            "slab_size": getattr(a, "slab_size", None),
            "kernel_base": getattr(a, "kernel_base", None),
            "pgpa_base": getattr(a, "pgpa_base", None),
            "pgpa_start": getattr(a, "pgpa_start", None),
        }
        return self.resolve("layout", PptLayout(), flags).validate()  # type: ignore

    def machine(self) -> MachineConfig:
        flags = {
            "interrupt_delivery": getattr(self.args, "delivery", None),
            "attack_policy": getattr(self.args, "policy", None),
        }
        return self.resolve("machine", MachineConfig(), flags)  # type: ignore

    def ept(self) -> EptConfig:
        flags = {"deferred_exit_threshold": getattr(self.args, "deferred_threshold", None)}
        return self.resolve("ept", EptConfig(), flags)  # type: ignore


# Subcommands


def cmd_scan(ctx: Context) -> int:
    """Scan a raw binary file as consecutive pages; one CSV row per hit."""
    a = ctx.args
    flags = {"prefix": a.prefix, "mask": a.mask, "value": a.value}
    predicate = ctx.resolve("predicate", OpcodePredicate(), flags).validate()  # type: ignore
    with open(a.file, "rb") as f:
        data = f.read()
    hits = scan_buffer(data, predicate, progress_bar=ctx.progress_bar)
    logging.info(f"{a.file}: {len(hits)} predicate matches in {len(data)} bytes")
    ctx.output("scan").csv(hits_to_frame(hits), "hits.csv")
    return EXIT_OK


def _attack_scenarios(names: Sequence[str], run_all_flag: bool) -> List[AttackScenario]:
    if run_all_flag or not names:
        return list(DRIVER_SCENARIOS)
    scenarios = []
    for name in names:
        try:
            scenarios.append(AttackScenario(name))
        except ValueError:
            valid = [s.value for s in AttackScenario]
            raise ValueError(f"Unknown attack scenario {name!r}, expected one of {valid}") from None
    return scenarios


def cmd_attack(ctx: Context) -> int:
    """Replay attacks against a prepared guest, or run the exhaustive search."""
    a = ctx.args
    layout, machine, ept = ctx.layout(), ctx.machine(), ctx.ept()
    out = ctx.output("attack")
    if a.scenario_file:
        with open(a.scenario_file, "r") as f:
            text = f.read()
        config = ScenarioConfig(layout=layout, ept=ept, machine=machine)
        result = run_scenario(text, config, seed=ctx.seed)
        frame = runs_to_frame(result.attacks)
        out.csv(frame, "attacks.csv")
        return EXIT_BREACH if result.breached else EXIT_OK
    vm = prepare_vm(layout=layout, ept=ept._asdict(), **machine._asdict())
    if a.exhaustive:
        search = ctx.resolve("search", SearchConfig(), {"max_steps": a.max_steps})
        frame = exhaustive_search(vm, search, progress_bar=ctx.progress_bar)  # type: ignore
        counts = frame["outcome"].value_counts()
        summary: Dict[str, Any] = OrderedDict()
        summary["probes"] = int(len(frame))
        summary["outcomes"] = {str(k): int(v) for k, v in sorted(counts.items())}
        summary["undetected"] = int(counts.get(AttackOutcome.UNDETECTED.value, 0))
        out.csv(frame, "search.csv")
        out.json(summary, "summary.json")
        return EXIT_BREACH if summary["undetected"] else EXIT_OK
    frame = run_all(vm, _attack_scenarios(a.scenarios, a.all), max_steps=a.max_steps or 200)
    out.config(machine, "machine.json")
    out.csv(frame, "attacks.csv")
    return EXIT_BREACH if (frame["outcome"] == AttackOutcome.UNDETECTED.value).any() else EXIT_OK


def cmd_ept_trace(ctx: Context) -> int:
    """Replay a scenario and report its exit log and per-category counters."""
    a = ctx.args
    if a.builtin:
        text = builtin_workload(a.builtin, iterations=a.iterations, seed=ctx.seed or 0)
    elif a.file:
        with open(a.file, "r") as f:
            text = f.read()
    else:
        raise ValueError("ept-trace needs a scenario file or --builtin NAME")
    config = ScenarioConfig(layout=ctx.layout(), ept=ctx.ept(), machine=ctx.machine())
    result = run_scenario(text, config, seed=ctx.seed)
    out = ctx.output("ept-trace")
    out.config(result.config)
    out.jsonl(result.log.to_records(), "exits.jsonl")
    out.csv(result.counter.to_frame(per_op=result.ops), "counters.csv")
    return EXIT_BREACH if result.breached else EXIT_OK


def cmd_layout(ctx: Context) -> int:
    """Print the resolved PPT geometry as JSON."""
    ctx.output("layout").json(ctx.layout().geometry(), "layout.json")
    return EXIT_OK


def cmd_bench(ctx: Context) -> int:
    """Run the switch benchmark: a CSV row per agent plus a JSON summary."""
    a = ctx.args
    flags: Dict[str, Any] = {
        "n_tx": a.tx,
        "n_rx": a.rx,
        "pkt_size": a.pktsize,
        "mode": a.mode,
        "packets": a.packets,
        "seed": ctx.seed,
        "hw_ring_slots": a.hw_ring_slots,
    }
    out = ctx.output("bench")
    if a.agents == ALL_GRID:
        base = ctx.resolve("bench", BenchConfig(), {k: v for k, v in flags.items() if k not in ("n_tx", "n_rx")})
        modes = (a.mode,) if a.mode else RX_MODES
        sizes = (a.pktsize,) if a.pktsize else PACKET_SIZES
        frame = run_grid(base, modes=modes, pkt_sizes=sizes, progress_bar=ctx.progress_bar)  # type: ignore
        out.csv(frame, "grid.csv")
        return EXIT_OK
    if a.agents is not None:
        n_tx, n_rx = BENCH_GRID[a.agents]
        flags["n_tx"] = a.tx if a.tx is not None else n_tx
        flags["n_rx"] = a.rx if a.rx is not None else n_rx
    config = ctx.resolve("bench", BenchConfig(), flags)
    result = run_bench(config, progress_bar=ctx.progress_bar, wall_clock=a.wall_clock)  # type: ignore
    out.config(config)
    out.csv(result.agents, "agents.csv")
    out.json(result.summary, "summary.json")
    return EXIT_OK


def cmd_fuzz(ctx: Context) -> int:
    """Fuzz the EPT monitor over several seeds and audit every invariant."""
    a = ctx.args
    first = 0 if ctx.seed is None else ctx.seed
    flags = {"n_events": a.events, "deferred_exit_threshold": a.deferred_threshold}
    base = ctx.resolve("fuzz", FuzzConfig(), flags)
    out = ctx.output("fuzz")
    frames = []
    breaches = 0
    for seed in range(first, first + a.seeds):
        result = run_fuzz(base._replace(seed=seed), progress_bar=ctx.progress_bar)  # type: ignore
        audit = result.audit.copy()
        audit.insert(0, "seed", pd.Series([seed] * len(audit), dtype="int64"))
        frames.append(audit)
        breaches += result.breaches
    frame = pd.concat(frames, ignore_index=True)
    out.csv(frame, "audit.csv")
    if breaches:
        logging.error(f"Fuzzing found {breaches} invariant violations")
    return EXIT_BREACH if breaches else EXIT_OK


COMMANDS: Dict[str, Callable[[Context], int]] = OrderedDict(
    [
        ("scan", cmd_scan),
        ("attack", cmd_attack),
        ("ept-trace", cmd_ept_trace),
        ("layout", cmd_layout),
        ("bench", cmd_bench),
        ("fuzz", cmd_fuzz),
    ]
)


# Parser


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with one section per component")
    common.add_argument("--seed", type=_int, help="run seed (env FASTIO_SEED)")
    common.add_argument("--out", help="report directory; reports go to stdout if unset (env FASTIO_OUT)")
    common.add_argument("--progress", action="store_true", help="show progress bars")
    common.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    return common


def _layout_parser() -> argparse.ArgumentParser:
    layout = argparse.ArgumentParser(add_help=False)
    group = layout.add_argument_group("layout")
    group.add_argument("--pdva", type=_int, help="virtual address of the device window")
    group.add_argument("--device-pages", type=_int, help="pages in the device window")
    group.add_argument("--ppt-va-start", type=_int, help="virtual address of the host slab")
    group.add_argument("--slab-size", type=_int, help="bytes per agent slab")
    group.add_argument("--kernel-base", type=_int, help="start of the guest kernel half")
    group.add_argument("--pgpa-base", type=_int, help="first privileged guest-physical address")
    group.add_argument("--pgpa-start", type=_int, help="guest-physical address backing the first slab")
    return layout


def _machine_parser() -> argparse.ArgumentParser:
    machine = argparse.ArgumentParser(add_help=False)
    group = machine.add_argument_group("machine")
    group.add_argument("--delivery", choices=INTERRUPT_DELIVERIES, help="interrupt delivery mode")
    group.add_argument("--policy", choices=ATTACK_POLICIES, help="response to a detected attack")
    group.add_argument("--deferred-threshold", type=_int, help="deferred exits before a blind patch")
    return machine


def build_parser() -> argparse.ArgumentParser:
    """The ``fastio`` argument parser."""
    parser = argparse.ArgumentParser(
        prog="fastio",
        description="Simulator of software-only device passthrough: opcode subtraction, "
        "privileged page tables and zero-copy guest switching.",
    )
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True
    common, layout, machine = _common_parser(), _layout_parser(), _machine_parser()

    p = sub.add_parser("scan", parents=[common], help="scan a binary file for the forbidden opcode")
    p.add_argument("file", help="raw binary file, read as consecutive 4096-byte pages")
    p.add_argument("--prefix", type=_byte_list, help="exact prefix bytes, e.g. 0x0f,0x20")
    p.add_argument("--mask", type=_int, help="mask of the byte after the prefix")
    p.add_argument("--value", type=_int, help="value the masked byte must equal")

    p = sub.add_parser("attack", parents=[common, layout, machine], help="replay branch-into-driver attacks")
    p.add_argument("scenarios", nargs="*", metavar="SCENARIO", help=f"one of {[s.value for s in AttackScenario]}")
    p.add_argument("--all", action="store_true", help="run the three driver-entry attacks")
    p.add_argument("--exhaustive", action="store_true", help="run the small-state exhaustive search")
    p.add_argument("--scenario-file", help="scenario script whose attack lines are replayed")
    p.add_argument("--max-steps", type=_int, help="step budget per attack run")

    p = sub.add_parser("ept-trace", parents=[common, layout, machine], help="replay a scenario and log its exits")
    p.add_argument("file", nargs="?", help="scenario script")
    p.add_argument("--builtin", choices=sorted(BUILTIN_WORKLOADS), help="builtin workload instead of a file")
    p.add_argument("--iterations", type=_int, default=50, help="iterations of the builtin workload")

    sub.add_parser("layout", parents=[common, layout], help="print the resolved PPT geometry")

    p = sub.add_parser("bench", parents=[common], help="run the switch benchmark")
    p.add_argument("--agents", choices=list(BENCH_GRID) + [ALL_GRID], help="named agent configuration")
    p.add_argument("--tx", type=_int, help="transmitting agents")
    p.add_argument("--rx", type=_int, help="receiving agents")
    p.add_argument("--pktsize", type=_int, help="packet size in bytes")
    p.add_argument("--mode", choices=RX_MODES, help="receive mode")
    p.add_argument("--packets", type=_int, help="packets offered in total")
    p.add_argument("--hw-ring-slots", type=_int, help="slots of the shared software ring")
    p.add_argument("--wall-clock", action="store_true", help="also report wall-clock time (not reproducible)")

    p = sub.add_parser("fuzz", parents=[common], help="fuzz the EPT monitor and audit its invariants")
    p.add_argument("--events", type=_int, help="events per seed")
    p.add_argument("--seeds", type=_int, default=1, help="consecutive seeds to run from --seed")
    p.add_argument("--deferred-threshold", type=_int, help="deferred exits before a blind patch")
    return parser


def main(argv: Optional[Sequence[str]] = None, environ: Optional[Mapping[str, str]] = None) -> int:
    """Run the ``fastio`` command line; returns the exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    environ = os.environ if environ is None else environ
    try:
        ctx = Context(args, environ)
        return COMMANDS[args.command](ctx)
    except (ValueError, OSError) as e:
        sys.stderr.write(f"fastio {args.command}: {e}\n")
        return EXIT_MALFORMED
    except RuntimeError as e:
        sys.stderr.write(f"fastio {args.command}: invariant breach: {e}\n")
        return EXIT_BREACH


if __name__ == "__main__":
    sys.exit(main())
