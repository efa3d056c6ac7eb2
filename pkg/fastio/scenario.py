"""Line-oriented scenario scripts replayed against a simulated guest.

A scenario is one directive per line; ``#`` starts a comment. Settings
directives (``seed``, ``layout``, ``ept``, ``machine``, ``guests``) must come
before the first action::

    seed 3
    machine interrupt_delivery=posted_shadow_idt
    guests 2 ring_pages=1 buffers=16
    process init pages=2 code=planted
    boot init
    fastio 4
    exec init steps=200
    attack ExitPptJump
"""
import logging
import shlex
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from fastio.ept import EptConfig, ExitCounter, ExitLog
from fastio.layout import AttestationResult, PptLayout
from fastio.machine import (
    CODE_KINDS,
    AttackOutcome,
    AttackRun,
    AttackScenario,
    GuestVm,
    MachineConfig,
    run_attack,
)
from fastio.types import PAGE_SIZE, Config
from fastio.utils.config_utils import merge_config, parse_setting, split_assignment
from fastio.utils.core import derive_seed

SETTINGS = ("seed", "layout", "ept", "machine", "guests")
ACTIONS = (
    "driver",
    "process",
    "boot",
    "switch",
    "exec",
    "write",
    "map",
    "unmap",
    "fork",
    "exit",
    "fastio",
    "interrupt",
    "attack",
)
# bytes of random data written by a ``write`` line that gives none
RANDOM_WRITE_BYTES = 16


class ScenarioConfig(Config):
    """Everything a scenario run depends on besides its action lines.

    Parameters
    ----------
    layout
        PPT geometry
    ept
        EPT monitor settings
    machine
        vCPU settings
    guests
        Fastio agents registered next to the scripted guest (the scripted
        guest included)
    ring_pages
        Ring pages each guest registers
    n_buffers
        Packet buffers each guest registers
    seed
        Seed for data the script leaves unspecified
    """

    layout: PptLayout = PptLayout()
    ept: EptConfig = EptConfig()
    machine: MachineConfig = MachineConfig()
    guests: int = 1
    ring_pages: int = 1
    n_buffers: int = 16
    seed: int = 0


class ScenarioLine(NamedTuple):
    """One parsed directive.

    Parameters
    ----------
    lineno
        1-based line number in the script
    op
        Directive name
    args
        Positional arguments
    kwargs
        ``key=value`` arguments
    """

    lineno: int
    op: str
    args: Tuple[str, ...]
    kwargs: Tuple[Tuple[str, str], ...]

    def kw(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return dict(self.kwargs).get(key, default)


class Scenario(NamedTuple):
    config: ScenarioConfig
    actions: List[ScenarioLine]


class ScenarioResult(NamedTuple):
    """What replaying a scenario left behind.

    Parameters
    ----------
    config
        The resolved settings
    ops
        Action lines executed
    log
        Every exit the hypervisor handled, in order
    attacks
        Runs of the ``attack`` lines
    attestation
        Verdict of the driver load, if the driver was loaded
    violations
        Privileged execution outside the driver window, if any
    """

    config: ScenarioConfig
    ops: int
    log: ExitLog
    attacks: List[AttackRun]
    attestation: Optional[AttestationResult]
    violations: List[str]

    @property
    def counter(self) -> ExitCounter:
        return self.log.counter()

    @property
    def breached(self) -> bool:
        """Whether any attack went undetected or the driver window was escaped."""
        return bool(self.violations) or any(r.outcome is AttackOutcome.UNDETECTED for r in self.attacks)

    def per_op(self, category: str) -> float:
        """Exits of ``category`` per action line."""
        return self.counter.category(category) / float(max(self.ops, 1))


def _fail(line: ScenarioLine, message: str) -> ValueError:
    return ValueError(f"line {line.lineno}: {message}")


def _int(line: ScenarioLine, raw: Optional[str], what: str) -> int:
    if raw is None:
        raise _fail(line, f"{line.op} needs {what}")
    try:
        return int(raw, 0)
    except ValueError:
        raise _fail(line, f"{what} must be an integer, got {raw!r}") from None


def _tokenize(lineno: int, text: str) -> Optional[ScenarioLine]:
    try:
        tokens = shlex.split(text, comments=True)
    except ValueError as e:
        raise ValueError(f"line {lineno}: {e}") from None
    if not tokens:
        return None
    op, rest = tokens[0].lower(), tokens[1:]
    if op not in SETTINGS and op not in ACTIONS:
        raise ValueError(f"line {lineno}: unknown directive {op!r}")
    args: List[str] = []
    kwargs: List[Tuple[str, str]] = []
    for token in rest:
        if "=" in token:
            try:
                kwargs.append(split_assignment(token))
            except ValueError as e:
                raise ValueError(f"line {lineno}: {e}") from None
        elif kwargs:
            raise ValueError(f"line {lineno}: positional argument {token!r} after key=value arguments")
        else:
            args.append(token)
    return ScenarioLine(lineno, op, tuple(args), tuple(kwargs))


def _section(line: ScenarioLine, config: Config) -> Config:
    if line.args:
        raise _fail(line, f"{line.op} takes only key=value settings")
    updates: Dict[str, Any] = {}
    for key, raw in line.kwargs:
        if key not in config._fields:
            raise _fail(line, f"unknown {line.op} setting {key!r}")
        try:
            updates[key] = parse_setting(raw, getattr(config, key))
        except ValueError as e:
            raise _fail(line, str(e)) from None
    return merge_config(config, updates)


def _apply_setting(config: ScenarioConfig, line: ScenarioLine) -> ScenarioConfig:
    if line.op == "seed":
        if len(line.args) != 1 or line.kwargs:
            raise _fail(line, "seed takes one integer")
        return config._replace(seed=_int(line, line.args[0], "a seed"))
    if line.op == "guests":
        if len(line.args) != 1:
            raise _fail(line, "guests takes a count")
        n = _int(line, line.args[0], "a guest count")
        if not 1 <= n <= config.layout.max_guests:
            raise _fail(line, f"guest count {n} outside [1, {config.layout.max_guests}]")
        known = {"ring_pages", "buffers"}
        unknown = sorted(set(dict(line.kwargs)) - known)
        if unknown:
            raise _fail(line, f"unknown guests setting {unknown[0]!r}")
        ring_pages = _int(line, line.kw("ring_pages", str(config.ring_pages)), "ring_pages")
        n_buffers = _int(line, line.kw("buffers", str(config.n_buffers)), "buffers")
        return config._replace(guests=n, ring_pages=ring_pages, n_buffers=n_buffers)
    section = getattr(config, line.op)
    return config._replace(**{line.op: _section(line, section)})


def parse_scenario(text: str, config: ScenarioConfig = ScenarioConfig()) -> Scenario:
    """Parse a scenario script.

    Parameters
    ----------
    text
        Script text
    config
        Settings the script's own settings directives override

    Returns
    -------
    Scenario
        Resolved settings and the action lines in order

    Raises
    ------
    ValueError
        ``line N: ...`` for the first malformed line

    Examples
    --------
    >>> scenario = parse_scenario("seed 5\\nprocess a\\nboot a\\nfastio 3\\n")
    >>> scenario.config.seed, [line.op for line in scenario.actions]
    (5, ['process', 'boot', 'fastio'])
    >>> parse_scenario("boot a\\nseed 1\\n")
    Traceback (most recent call last):
        ...
    ValueError: line 2: seed must come before the first action
    """
    actions: List[ScenarioLine] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _tokenize(lineno, raw)
        if line is None:
            continue
        if line.op in SETTINGS:
            if actions:
                raise _fail(line, f"{line.op} must come before the first action")
            config = _apply_setting(config, line)
        else:
            actions.append(line)
    try:
        config.layout.validate()
    except ValueError as e:
        raise ValueError(f"layout: {e}") from None
    return Scenario(config, actions)


class ScenarioRunner:
    """Replays parsed action lines against a fresh :class:`GuestVm`."""

    def __init__(self, config: ScenarioConfig) -> None:
        self.config = config
        self.vm = GuestVm(
            layout=config.layout, ept=config.ept._asdict(), **config.machine._asdict()
        )
        self.rng = np.random.RandomState(derive_seed(config.seed, "scenario"))
        self.booted = False
        self.attestation: Optional[AttestationResult] = None
        self.attacks: List[AttackRun] = []
        self.ops = 0
        self._handlers: Dict[str, Callable[[ScenarioLine], None]] = {
            op: getattr(self, f"_do_{op}") for op in ACTIONS
        }

    def run(self, actions: List[ScenarioLine]) -> ScenarioResult:
        for line in actions:
            if self.vm.machine.terminated:
                logging.warning(f"Guest terminated; skipping the script from line {line.lineno}")
                break
            try:
                self._handlers[line.op](line)
            except ValueError as e:
                message = str(e)
                if message.startswith("line "):
                    raise
                raise _fail(line, message) from None
            self.ops += 1
        return ScenarioResult(
            self.config,
            self.ops,
            self.vm.log,
            self.attacks,
            self.attestation,
            list(self.vm.machine.violations),
        )

    # Helpers

    def _need_args(self, line: ScenarioLine, n: int, usage: str) -> None:
        if len(line.args) != n:
            raise _fail(line, f"usage: {usage}")

    def _need_boot(self, line: ScenarioLine) -> None:
        if not self.booted:
            raise _fail(line, f"{line.op} before any process was booted")

    def _code(self, line: ScenarioLine) -> str:
        code = line.kw("code", CODE_KINDS[0])
        if code not in CODE_KINDS:
            raise _fail(line, f"unknown code kind {code!r}, expected one of {CODE_KINDS}")
        return code  # type: ignore

    def _load_driver(self, line: ScenarioLine, certificate: Optional[str] = None) -> AttestationResult:
        self._need_boot(line)
        config = self.config
        result = self.vm.load_driver(certificate, ring_pages=config.ring_pages, n_buffers=config.n_buffers)
        self.attestation = result
        if result.trusted:
            self._register_peers()
        return result

    def _ensure_driver(self, line: ScenarioLine) -> None:
        result = self.attestation or self._load_driver(line)
        if not result.trusted:
            raise _fail(line, f"the fastio driver was rejected ({result.reason})")

    def _register_peers(self) -> None:
        """Give the other guests of the roster fastio ids and registered rings."""
        vm, config = self.vm, self.config
        n_pages = config.ring_pages + -(-config.n_buffers * 2048 // PAGE_SIZE)
        for _ in range(config.guests - 1):
            guest_id = vm.ids.allocate()
            vm.registry.mark_attested(guest_id)
            pages = [vm.memory.alloc_page() for _ in range(n_pages)]
            vm.registry.register_guest_rings(guest_id, pages, config.ring_pages)

    # Actions

    def _do_driver(self, line: ScenarioLine) -> None:
        if self.attestation is not None:
            raise _fail(line, "the driver is already loaded")
        if line.args:
            raise _fail(line, "usage: driver [certificate=HEX]")
        self._load_driver(line, line.kw("certificate"))

    def _do_process(self, line: ScenarioLine) -> None:
        self._need_args(line, 1, "process NAME [pages=N] [code=KIND]")
        pages = _int(line, line.kw("pages", "1"), "pages")
        self.vm.create_process(line.args[0], pages, self._code(line))

    def _do_boot(self, line: ScenarioLine) -> None:
        self._need_args(line, 1, "boot NAME")
        if self.booted:
            raise _fail(line, "the guest is already booted")
        self.vm.boot(line.args[0])
        self.booted = True

    def _do_switch(self, line: ScenarioLine) -> None:
        self._need_args(line, 1, "switch NAME")
        self._need_boot(line)
        self.vm.switch_to(line.args[0])

    def _do_exec(self, line: ScenarioLine) -> None:
        self._need_args(line, 1, "exec NAME [page=P] [steps=N]")
        self._need_boot(line)
        page = _int(line, line.kw("page", "0"), "page")
        steps = _int(line, line.kw("steps", "100"), "steps")
        self.vm.exec(line.args[0], page, steps)

    def _do_write(self, line: ScenarioLine) -> None:
        if len(line.args) not in (3, 4):
            raise _fail(line, "usage: write NAME PAGE OFFSET [HEX]")
        page = _int(line, line.args[1], "a page index")
        offset = _int(line, line.args[2], "an offset")
        if len(line.args) == 4:
            try:
                data = bytes.fromhex(line.args[3])
            except ValueError:
                raise _fail(line, f"bad hex data {line.args[3]!r}") from None
        else:
            data = self.rng.randint(0, 256, size=RANDOM_WRITE_BYTES).astype("uint8").tobytes()
        if not 0 <= offset <= PAGE_SIZE - len(data):
            raise _fail(line, f"write of {len(data)} bytes at offset {offset} leaves the page")
        self.vm.write(line.args[0], page, offset, data)

    def _do_map(self, line: ScenarioLine) -> None:
        self._need_args(line, 2, "map NAME PAGE [code=KIND]")
        self.vm.map_page(line.args[0], _int(line, line.args[1], "a page index"), self._code(line))

    def _do_unmap(self, line: ScenarioLine) -> None:
        self._need_args(line, 2, "unmap NAME PAGE")
        self.vm.unmap_page(line.args[0], _int(line, line.args[1], "a page index"))

    def _do_fork(self, line: ScenarioLine) -> None:
        self._need_args(line, 2, "fork PARENT CHILD")
        self.vm.fork(line.args[0], line.args[1])

    def _do_exit(self, line: ScenarioLine) -> None:
        self._need_args(line, 1, "exit NAME")
        self.vm.exit_process(line.args[0])

    def _do_fastio(self, line: ScenarioLine) -> None:
        if len(line.args) > 1:
            raise _fail(line, "usage: fastio [N]")
        n = _int(line, line.args[0], "a call count") if line.args else 1
        self._ensure_driver(line)
        self.vm.fastio(n)

    def _do_interrupt(self, line: ScenarioLine) -> None:
        if len(line.args) > 1:
            raise _fail(line, "usage: interrupt [MODE]")
        self._need_boot(line)
        self.vm.machine.inject_interrupt(line.args[0] if line.args else None)

    def _do_attack(self, line: ScenarioLine) -> None:
        self._need_args(line, 1, "attack SCENARIO")
        try:
            scenario = AttackScenario(line.args[0])
        except ValueError:
            names = [s.value for s in AttackScenario]
            raise _fail(line, f"unknown attack {line.args[0]!r}, expected one of {names}") from None
        self._ensure_driver(line)
        self.attacks.append(run_attack(self.vm, scenario))


def run_scenario(
    text: str, config: ScenarioConfig = ScenarioConfig(), seed: Optional[int] = None
) -> ScenarioResult:
    """Parse and replay a scenario script.

    Parameters
    ----------
    text
        Script text
    config
        Settings the script's settings directives override
    seed
        If given, overrides any ``seed`` line of the script

    Returns
    -------
    ScenarioResult
        The replay's exits, attacks and operation count

    Raises
    ------
    ValueError
        ``line N: ...`` for a malformed or impossible line
    """
    scenario = parse_scenario(text, config)
    resolved = scenario.config if seed is None else scenario.config._replace(seed=seed)
    logging.info(f"Replaying {len(scenario.actions)} scenario lines (seed {resolved.seed})")
    result = ScenarioRunner(resolved).run(scenario.actions)
    logging.info(f"Scenario done: {len(result.log)} exits over {result.ops} operations")
    return result
