"""``pibits`` command line: compute, verify, estimate, resume.

Every option can also be set through an environment variable named
``PIBITS_<OPTION>`` (upper case, dashes as underscores), e.g. ``PIBITS_POS``.

Exit codes: 0 success, 1 usage or configuration error, 2 storage failure,
3 verification disagreement, 130 interrupted (completed jobs are kept).
"""

from __future__ import annotations

import json
import math
import os
import signal
import sys
import threading
from dataclasses import dataclass, replace
from pathlib import Path

import click

from .checkpoint import CheckpointMismatch, CheckpointStore, StorageError
from .engine import (
    DEFAULT_TERMS_PER_THREAD,
    ClusterConfig,
    ComputationSlice,
    PartitionPlan,
    RunInterrupted,
    run,
)
from .fixedpoint import FixedFraction, round_up_precision
from .series import FORMULAS, ExtractionRequest, ExtractionResult, get_formula
from .slots import NoLoad, RandomLoadTrace
from .verify import ErrorModel, confidence, overlap_check, render_report, term_count

ENV_PREFIX = "PIBITS"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_STORAGE = 2
EXIT_DISAGREE = 3
EXIT_INTERRUPTED = 130


class VerificationFailed(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    start_position: int
    reported_bits: int = 256
    formula: str = "bellard"
    guard_bits: int = 64
    map_slots: int = os.cpu_count() or 1
    reduce_slots: int = max(1, (os.cpu_count() or 1) // 2)
    jobs: int | None = None
    tasks_per_job: int = 4
    threads_per_task: int = 1
    terms_per_thread: int = DEFAULT_TERMS_PER_THREAD
    ckpt_dir: str | None = None
    max_concurrent_jobs: int = 60
    submit_threshold: int = 1
    seed: int | None = None

    def __post_init__(self):
        positive = {
            "pos": self.start_position,
            "bits": self.reported_bits,
            "tasks-per-job": self.tasks_per_job,
            "threads-per-task": self.threads_per_task,
            "terms-per-thread": self.terms_per_thread,
            "max-concurrent-jobs": self.max_concurrent_jobs,
            "submit-threshold": self.submit_threshold,
        }
        for name, value in positive.items():
            if value < 1:
                raise click.BadParameter(f"must be >= 1, got {value}", param_hint=f"--{name}")
        if self.guard_bits < 0:
            raise click.BadParameter("must be >= 0", param_hint="--guard")
        if self.jobs is not None and self.jobs < 1:
            raise click.BadParameter("must be >= 1", param_hint="--jobs")
        if self.formula not in FORMULAS:
            raise click.BadParameter(f"unknown formula {self.formula!r}", param_hint="--formula")

    @property
    def precision_bits(self) -> int:
        return round_up_precision(self.reported_bits + self.guard_bits)

    def request(self) -> ExtractionRequest:
        p = self.precision_bits
        return ExtractionRequest(self.start_position, p, p - self.reported_bits, get_formula(self.formula))

    def plan(self, request: ExtractionRequest | None = None) -> PartitionPlan:
        if self.jobs is not None:
            return PartitionPlan(self.jobs, self.tasks_per_job, self.threads_per_task)
        total = ComputationSlice.root(request or self.request()).size
        return PartitionPlan.sized(total, self.terms_per_thread, self.tasks_per_job, self.threads_per_task)

    def cluster(self) -> ClusterConfig:
        trace = NoLoad() if self.seed is None else RandomLoadTrace(self.map_slots, self.reduce_slots, self.seed)
        return ClusterConfig(
            map_slots=self.map_slots,
            reduce_slots=self.reduce_slots,
            submit_threshold=self.submit_threshold,
            max_concurrent_jobs=self.max_concurrent_jobs,
            load_trace=trace,
        )


def _opt(*decls, **kw):
    name = decls[0].lstrip("-").replace("-", "_").upper()
    return click.option(*decls, envvar=f"{ENV_PREFIX}_{name}", show_envvar=True, **kw)


def _run_options(required_pos=True, defaults=True):
    """Options shared by compute/verify/resume.

    With ``defaults=False`` every option defaults to None so the caller can
    tell which ones were given explicitly.
    """
    d = RunConfig.__dataclass_fields__

    def dflt(key):
        return d[key].default if defaults else None

    opts = [
        _opt("--pos", "start_position", type=int, required=required_pos,
             help="1-based bit position after the radix point of the first reported bit."),
        _opt("--bits", "reported_bits", type=int, default=dflt("reported_bits"), show_default=defaults,
             help="Number of bits to report."),
        _opt("--formula", type=click.Choice(sorted(FORMULAS)), default=dflt("formula"), show_default=defaults),
        _opt("--guard", "guard_bits", type=int, default=dflt("guard_bits"), show_default=defaults,
             help="Extra low-order bits; precision is bits+guard rounded up to 64."),
        _opt("--map-slots", type=int, default=dflt("map_slots"), show_default=defaults),
        _opt("--reduce-slots", type=int, default=dflt("reduce_slots"), show_default=defaults),
        _opt("--jobs", type=int, default=None, help="Job count; derived from --terms-per-thread if omitted."),
        _opt("--tasks-per-job", type=int, default=dflt("tasks_per_job"), show_default=defaults),
        _opt("--threads-per-task", type=int, default=dflt("threads_per_task"), show_default=defaults),
        _opt("--terms-per-thread", type=int, default=dflt("terms_per_thread"), show_default=defaults),
        _opt("--max-concurrent-jobs", type=int, default=dflt("max_concurrent_jobs"), show_default=defaults),
        _opt("--submit-threshold", type=int, default=dflt("submit_threshold"), show_default=defaults,
             help="Free slots required on a side before a job is submitted there."),
        _opt("--ckpt-dir", type=click.Path(file_okay=False), default=None,
             help="Directory for run.meta and per-job sums; enables resume."),
        _opt("--seed", type=int, default=None, help="Enable a synthetic background load trace with this seed."),
        _opt("--json", "as_json", is_flag=True, help="Machine-readable output."),
    ]

    def deco(f):
        for o in reversed(opts):
            f = o(f)
        return f

    return deco


def _config_from(kwargs) -> RunConfig:
    fields = RunConfig.__dataclass_fields__
    return RunConfig(**{k: v for k, v in kwargs.items() if k in fields and v is not None})


class _StopOnSignal:
    """Turn SIGINT/SIGTERM into a stop request for the controller."""

    def __init__(self):
        self.event = threading.Event()
        self._old = {}

    def __enter__(self):
        if threading.current_thread() is threading.main_thread():
            for sig in (signal.SIGINT, signal.SIGTERM):
                self._old[sig] = signal.signal(sig, lambda *_: self.event.set())
        return self.event

    def __exit__(self, *exc):
        for sig, handler in self._old.items():
            signal.signal(sig, handler)
        return False


def _execute(config: RunConfig) -> ExtractionResult:
    request = config.request()
    store = CheckpointStore(config.ckpt_dir) if config.ckpt_dir else None
    with _StopOnSignal() as stop:
        return run(request, config.plan(request), store, config.cluster(), stop=stop)


def _result_dict(result: ExtractionResult, config: RunConfig) -> dict:
    stats = result.stats
    return {
        "position": result.start_position,
        "bits": result.reported_bits,
        "hex": result.hex,
        "formula": config.formula,
        "precision": config.precision_bits,
        "elapsed": round(stats.elapsed, 6) if stats else None,
        "cpu_seconds": round(stats.cpu_seconds, 6) if stats else None,
    }


def _print_result(result: ExtractionResult, config: RunConfig, as_json: bool) -> None:
    if as_json:
        click.echo(json.dumps(_result_dict(result, config)))
        return
    stats = result.stats
    click.echo(f"Position  : {result.start_position:,}")
    click.echo(f"Bits      : {result.reported_bits}")
    click.echo(f"Formula   : {config.formula} (p={config.precision_bits}, guard {config.precision_bits - config.reported_bits})")
    click.echo(f"Hex       : {result.blocks}")
    if stats is not None:
        click.echo(f"Time Used : {stats.elapsed:.2f} s")
        click.echo(f"CPU Time  : {stats.cpu_seconds:.2f} s")
        click.echo(
            f"Jobs      : {stats.jobs_computed} computed, {stats.jobs_reused} reused "
            f"({stats.map_side_jobs} map-side, {stats.reduce_side_jobs} reduce-side)"
        )


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Compute bits of pi at arbitrary positions by digit extraction."""


@cli.command("compute")
@_run_options()
def cmd_compute(as_json, **kwargs):
    """Compute --bits bits of pi starting at --pos."""
    config = _config_from(kwargs)
    _print_result(_execute(config), config, as_json)


def _flip(result: ExtractionResult, position: int) -> ExtractionResult:
    offset = position - result.start_position
    if not 0 <= offset < result.reported_bits:
        return result
    f = result.fraction
    flipped = FixedFraction(f.numerator ^ (1 << (f.precision_bits - 1 - offset)), f.precision_bits)
    return replace(result, fraction=flipped)


@cli.command("verify")
@_run_options()
@click.option("--flip-bit", type=int, default=None, hidden=True)
def cmd_verify(as_json, flip_bit, **kwargs):
    """Run at --pos and --pos - 4 and keep only the bits both agree on."""
    config = _config_from(kwargs)
    if config.start_position < 5:
        raise click.BadParameter("verification needs --pos >= 5", param_hint="--pos")
    runs = []
    for pos in (config.start_position, config.start_position - 4):
        sub = replace(config, start_position=pos)
        if config.ckpt_dir:
            sub = replace(sub, ckpt_dir=str(Path(config.ckpt_dir) / f"pos-{pos}"))
        runs.append(_execute(sub))
    if flip_bit is not None:
        runs[1] = _flip(runs[1], flip_bit)
    report = overlap_check(*runs)
    if as_json:
        click.echo(
            json.dumps(
                {
                    "runs": [_result_dict(r, config) for r in runs],
                    "overlap_start": report.overlap_start,
                    "overlap_bits": report.overlap_bits,
                    "verified_bits": report.verified_bits,
                    "verified_hex": report.verified_hex,
                    "first_disagreement": report.first_disagreement,
                }
            )
        )
    else:
        click.echo(render_report(report))
    if not report.agrees:
        raise VerificationFailed(f"runs disagree at bit {report.first_disagreement:,}")


@cli.command("estimate")
@_opt("--pos", "start_position", type=int, required=True)
@_opt("--precision", type=int, default=52, show_default=True, help="Working precision p; eps = 2^-(p+1).")
@_opt("--formula", type=click.Choice(sorted(FORMULAS)), default="bellard", show_default=True)
@_opt("--bound", "bounds", type=int, multiple=True, help="Bound exponent b for P(|E| < 2^-b); repeatable.")
@_opt("--json", "as_json", is_flag=True)
def cmd_estimate(start_position, precision, formula, bounds, as_json):
    """Rounding-error confidence table for a position and precision."""
    if start_position < 1 or precision < 1:
        raise click.BadParameter("--pos and --precision must be >= 1")
    m = term_count(get_formula(formula), start_position - 1, precision)
    model = ErrorModel(m, precision)
    if not bounds:
        centre = round(-math.log2(model.sigma))
        bounds = range(centre - 3, centre + 4)
    rows = [(b, confidence(model, b)) for b in bounds]
    if as_json:
        click.echo(json.dumps({"terms": m, "sigma": model.sigma, "confidence": {str(b): c for b, c in rows}}))
        return
    click.echo(f"Position  : {start_position:,}")
    click.echo(f"Precision : {precision} bits (eps = 2^-{precision + 1})")
    click.echo(f"Terms m   : {m:,}")
    click.echo(f"sigma     : {model.sigma:.6g} (2^{math.log2(model.sigma):.2f})")
    click.echo("   b   P(|E| < 2^-b)")
    for b, c in rows:
        click.echo(f"{b:4d}   {100 * c:12.6f}%")


@cli.command("resume")
@_run_options(required_pos=False, defaults=False)
def cmd_resume(as_json, **kwargs):
    """Finish an interrupted run from --ckpt-dir; other flags must match it."""
    ckpt = kwargs.get("ckpt_dir")
    if not ckpt:
        raise click.BadParameter("resume needs --ckpt-dir", param_hint="--ckpt-dir")
    meta = CheckpointStore(ckpt).read_meta()
    if meta is None:
        raise click.BadParameter(f"no run.meta in {ckpt}", param_hint="--ckpt-dir")
    try:
        p, guard = int(meta["p"]), int(meta["guard"])
        jobs = int(meta["jobs"])
        _, tasks, threads = (int(x) for x in meta["plan"].split("x"))
        stored = {
            "start_position": int(meta["n"]) + 1,
            "reported_bits": p - guard,
            "formula": meta["formula"],
            "jobs": jobs,
            "tasks_per_job": tasks,
            "threads_per_task": threads,
        }
    except (KeyError, ValueError) as exc:
        raise StorageError(f"corrupt run.meta in {ckpt}: {exc}") from exc
    given = {k: v for k, v in kwargs.items() if v is not None}
    for key in ("start_position", "reported_bits", "formula", "jobs"):
        if key in given and given[key] != stored[key]:
            raise CheckpointMismatch(f"{key}={given[key]} does not match checkpoint ({stored[key]})")
    # elastic: slot counts and task/thread shape may change between sessions
    merged = {**stored, "guard_bits": guard, **given}
    config = _config_from(merged)
    if config.precision_bits != p:
        raise CheckpointMismatch(f"--bits/--guard give p={config.precision_bits}, checkpoint has p={p}")
    config = replace(config, guard_bits=p - config.reported_bits)
    _print_result(_execute(config), config, as_json)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="pibits", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except (CheckpointMismatch, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except (StorageError, OSError) as exc:
        click.echo(f"storage error: {exc}", err=True)
        return EXIT_STORAGE
    except VerificationFailed as exc:
        click.echo(f"verification failed: {exc}", err=True)
        return EXIT_DISAGREE
    except RunInterrupted as exc:
        click.echo(f"interrupted: {exc}; rerun with `pibits resume --ckpt-dir ...`", err=True)
        sys.stdout.flush()
        sys.stderr.flush()
        # worker threads may still be inside a compiled loop; don't wait for them
        os._exit(EXIT_INTERRUPTED)
    return EXIT_OK


def entry() -> None:
    sys.exit(main())
