"""Elastic, checkpointed evaluation of the full term index set.

All terms of all series of a formula are laid end to end in one global
index space ``[0, total)``.  The index space is split into jobs, jobs into
tasks, tasks into threads::

    final sum  S       = sum over jobs      Sigma_j
    job        Sigma_j = sum over tasks     sigma_jk
    task       sigma_jk = sum over threads  s_jkt
    thread     s_jkt   = sum of its terms

A controller submits each job as either map-side or reduce-side work
depending on which slot pool has room, holds task sums in memory, and
persists each finished job sum.  Fixed-point addition is exact, so the
result does not depend on the plan, the worker count, the scheduling
history or how often the run was interrupted.
"""

from __future__ import annotations

import enum
import logging
import os
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

from .checkpoint import FORMAT_VERSION, CheckpointMismatch, CheckpointStore
from .fixedpoint import FixedFraction
from .modmath import MONTGOMERY_THRESHOLD
from .series import ExtractionRequest, ExtractionResult, Formula, get_formula, make_result, signed_range_sum, series_cutoffs
from .slots import Decision, NoLoad, Side, SlotModel, SlotMonitor, schedule_step

log = logging.getLogger(__name__)

# roughly one second of work per thread on a desktop core
DEFAULT_TERMS_PER_THREAD = 2_000_000


class Level(str, enum.Enum):
    SUM = "sum"
    JOB = "job"
    TASK = "task"
    THREAD = "thread"


_CHILD = {Level.SUM: Level.JOB, Level.JOB: Level.TASK, Level.TASK: Level.THREAD, Level.THREAD: Level.THREAD}


@dataclass(frozen=True)
class IndexSpace:
    """Concatenation of each series' term range ``[0, cutoff)``."""

    formula: Formula
    n: int
    p: int
    cutoffs: tuple[int, ...]

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for c in self.cutoffs:
            out.append(acc)
            acc += c
        return tuple(out)

    @property
    def total(self) -> int:
        return sum(self.cutoffs)

    def segments(self, lo: int, hi: int):
        """Yield (series index, k_lo, k_hi) pieces of global range [lo, hi)."""
        for i, (off, cut) in enumerate(zip(self.offsets, self.cutoffs)):
            a, b = max(lo, off), min(hi, off + cut)
            if a < b:
                yield i, a - off, b - off


@lru_cache(maxsize=128)
def index_space(formula_name: str, n: int, p: int) -> IndexSpace:
    formula = get_formula(formula_name)
    return IndexSpace(formula, n, p, tuple(series_cutoffs(formula, n, p)))


@dataclass(frozen=True)
class ComputationSlice:
    formula: str
    n: int
    p: int
    lo: int
    hi: int
    level: Level = Level.SUM

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi:
            raise ValueError(f"bad index range [{self.lo}, {self.hi})")

    @property
    def k_range(self) -> range:
        return range(self.lo, self.hi)

    @property
    def size(self) -> int:
        return self.hi - self.lo

    @property
    def slice_id(self) -> str:
        return f"{self.formula}:n={self.n}:p={self.p}:{self.level.value}:{self.lo}-{self.hi}"

    @classmethod
    def root(cls, request: ExtractionRequest) -> ComputationSlice:
        space = index_space(request.formula.name, request.n, request.precision_bits)
        return cls(request.formula.name, request.n, request.precision_bits, 0, space.total)


def partition(c: ComputationSlice, m: int) -> list[ComputationSlice]:
    """Split ``c`` into at most ``m`` contiguous parts whose sizes differ by <= 1."""
    if m < 1:
        raise ValueError("number of parts must be >= 1")
    parts = min(m, c.size) or 1
    base, extra = divmod(c.size, parts)
    level = _CHILD[c.level]
    out, lo = [], c.lo
    for i in range(parts):
        hi = lo + base + (1 if i < extra else 0)
        out.append(ComputationSlice(c.formula, c.n, c.p, lo, hi, level))
        lo = hi
    return out


def compute(c: ComputationSlice, threshold: int = MONTGOMERY_THRESHOLD) -> FixedFraction:
    """Signed sum of the terms in ``c``, mod 1."""
    space = index_space(c.formula, c.n, c.p)
    total = FixedFraction.zero(c.p)
    for i, k_lo, k_hi in space.segments(c.lo, c.hi):
        total = total + signed_range_sum(space.formula.series[i], c.n, k_lo, k_hi, c.p, threshold=threshold)
    return total


@dataclass(frozen=True)
class PartitionPlan:
    jobs: int
    tasks_per_job: int = 1
    threads_per_task: int = 1

    def __post_init__(self):
        if min(self.jobs, self.tasks_per_job, self.threads_per_task) < 1:
            raise ValueError("plan dimensions must all be >= 1")

    @classmethod
    def sized(
        cls,
        total_terms: int,
        terms_per_thread: int = DEFAULT_TERMS_PER_THREAD,
        tasks_per_job: int = 1,
        threads_per_task: int = 1,
    ) -> PartitionPlan:
        """Enough jobs that each thread gets about ``terms_per_thread`` terms."""
        per_job = terms_per_thread * tasks_per_job * threads_per_task
        return cls(max(1, -(-total_terms // per_job)), tasks_per_job, threads_per_task)

    @property
    def shape(self) -> str:
        return f"{self.jobs}x{self.tasks_per_job}x{self.threads_per_task}"

    def job_slices(self, root: ComputationSlice) -> list[ComputationSlice]:
        return partition(root, self.jobs)


@dataclass
class ClusterConfig:
    map_slots: int = field(default_factory=lambda: os.cpu_count() or 1)
    reduce_slots: int = field(default_factory=lambda: max(1, (os.cpu_count() or 1) // 2))
    submit_threshold: int = 1
    max_concurrent_jobs: int = 60
    load_trace: object = field(default_factory=NoLoad)
    poll_interval: float = 0.02
    montgomery_threshold: int = MONTGOMERY_THRESHOLD

    def __post_init__(self):
        if self.map_slots < 0 or self.reduce_slots < 0 or self.map_slots + self.reduce_slots == 0:
            raise ValueError("need a non-negative slot count on each side and at least one slot")
        if self.submit_threshold > max(self.map_slots, self.reduce_slots):
            raise ValueError("submit_threshold exceeds every slot capacity; nothing could run")
        if self.max_concurrent_jobs < 1:
            raise ValueError("max_concurrent_jobs must be >= 1")


@dataclass
class RunStats:
    elapsed: float = 0.0
    cpu_seconds: float = 0.0
    jobs_total: int = 0
    jobs_computed: int = 0
    jobs_reused: int = 0
    map_side_jobs: int = 0
    reduce_side_jobs: int = 0


class RunInterrupted(RuntimeError):
    def __init__(self, completed: int, total: int):
        super().__init__(f"run interrupted with {completed}/{total} jobs persisted")
        self.completed = completed
        self.total = total


def run_meta(request: ExtractionRequest, plan: PartitionPlan) -> dict[str, object]:
    return {
        "format": FORMAT_VERSION,
        "formula": request.formula.name,
        "n": request.n,
        "p": request.precision_bits,
        "guard": request.guard_bits,
        "jobs": plan.jobs,
        "plan": plan.shape,
    }


# fields that decide which bits the stored sums belong to
MATCH_KEYS = ("formula", "n", "p", "guard", "jobs")


def _timed_compute(c: ComputationSlice, threshold: int) -> tuple[FixedFraction, float]:
    t0 = time.thread_time()
    value = compute(c, threshold)
    return value, time.thread_time() - t0


@dataclass
class _JobState:
    index: int
    slice: ComputationSlice
    side: Side
    remaining: int
    partial: FixedFraction


class Controller:
    """Single logical thread that submits jobs and folds completed tasks."""

    def __init__(
        self,
        request: ExtractionRequest,
        plan: PartitionPlan,
        store: CheckpointStore | None = None,
        cluster: ClusterConfig | None = None,
        monitor: SlotMonitor | None = None,
        stop: threading.Event | None = None,
        on_job_complete=None,
    ):
        self.request = request
        self.plan = plan
        self.store = store
        self.cluster = cluster or ClusterConfig()
        self.monitor = monitor or SlotMonitor()
        self.stop = stop or threading.Event()
        self.on_job_complete = on_job_complete
        self.root = ComputationSlice.root(request)
        self.jobs = plan.job_slices(self.root)
        self.stats = RunStats(jobs_total=len(self.jobs))
        self._done: queue.Queue = queue.Queue()

    # job shapes per side: many single-thread mappers, or half as many
    # reducers with twice the threads each

    def _tasks_for(self, job: ComputationSlice, side: Side) -> tuple[list[ComputationSlice], int]:
        tasks, threads = self.plan.tasks_per_job, self.plan.threads_per_task
        if side is Side.REDUCE:
            return partition(job, -(-tasks // 2)), 2 * threads
        return partition(job, tasks), threads

    def _load_existing(self) -> dict[int, FixedFraction]:
        if self.store is None:
            return {}
        self.store.ensure_meta(run_meta(self.request, self.plan), MATCH_KEYS)
        found = {}
        for idx in self.store.job_indices():
            if idx >= len(self.jobs):
                raise CheckpointMismatch(f"job index {idx} outside plan of {len(self.jobs)} jobs")
            record = self.store.read_job(idx)
            expected = self.jobs[idx].slice_id
            if record.slice_id != expected:
                raise CheckpointMismatch(f"job {idx} holds {record.slice_id}, expected {expected}")
            if record.partial_sum.precision_bits != self.request.precision_bits:
                raise CheckpointMismatch(f"job {idx} has wrong precision")
            found[idx] = record.partial_sum
        return found

    def _task_body(self, task, side, threads, thread_pool):
        threshold = self.cluster.montgomery_threshold
        with self.monitor.occupy(side):
            if threads == 1 or thread_pool is None:
                return _timed_compute(task, threshold)
            futures = [thread_pool.submit(_timed_compute, part, threshold) for part in partition(task, threads)]
            total, cpu = FixedFraction.zero(task.p), 0.0
            for f in futures:
                value, dt = f.result()
                total, cpu = total + value, cpu + dt
            return total, cpu

    def execute(self) -> ExtractionResult:
        started = time.perf_counter()
        sums = self._load_existing()
        self.stats.jobs_reused = len(sums)
        pending = [j for j in range(len(self.jobs)) if j not in sums]
        pending.reverse()  # pop() from the end keeps index order

        caps = {Side.MAP: self.cluster.map_slots, Side.REDUCE: self.cluster.reduce_slots}
        in_use = {Side.MAP: 0, Side.REDUCE: 0}
        ready: dict[Side, list] = {Side.MAP: [], Side.REDUCE: []}
        running: dict[int, _JobState] = {}
        max_threads = 2 * self.plan.threads_per_task
        workers = caps[Side.MAP] + caps[Side.REDUCE]
        task_pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="task")
        thread_pool = (
            ThreadPoolExecutor(max_workers=workers * max_threads, thread_name_prefix="thread")
            if max_threads > 1
            else None
        )

        def finish(job: _JobState):
            if self.store is not None:
                self.store.write_job(job.index, job.slice.slice_id, job.partial)
            sums[job.index] = job.partial
            self.stats.jobs_computed += 1
            log.debug("job %d complete (%s side)", job.index, job.side.value)
            if self.on_job_complete is not None:
                self.on_job_complete(job.index, len(sums), len(self.jobs))

        try:
            while pending or running:
                if self.stop.is_set():
                    raise RunInterrupted(len(sums), len(self.jobs))
                bg = dict(zip((Side.MAP, Side.REDUCE), self.cluster.load_trace(time.monotonic())))

                def free(side):
                    left = caps[side] - min(bg[side], caps[side]) - in_use[side] - len(ready[side])
                    return max(0, min(caps[side], left))

                slots = SlotModel(caps[Side.MAP], caps[Side.REDUCE], free(Side.MAP), free(Side.REDUCE),
                                  self.cluster.submit_threshold)
                decision = schedule_step(slots, pending, len(running), self.cluster.max_concurrent_jobs)
                if decision is not Decision.WAIT:
                    side = Side.MAP if decision is Decision.SUBMIT_MAP_SIDE else Side.REDUCE
                    idx = pending.pop()
                    job = self.jobs[idx]
                    tasks, threads = self._tasks_for(job, side)
                    state = _JobState(idx, job, side, len(tasks), FixedFraction.zero(job.p))
                    running[idx] = state
                    if side is Side.MAP:
                        self.stats.map_side_jobs += 1
                    else:
                        self.stats.reduce_side_jobs += 1
                    ready[side].extend((state, t, threads) for t in tasks)
                    continue  # re-evaluate before blocking; more jobs may fit

                for side in (Side.MAP, Side.REDUCE):
                    while ready[side] and in_use[side] + bg[side] < caps[side]:
                        state, task, threads = ready[side].pop(0)
                        in_use[side] += 1
                        fut = task_pool.submit(self._task_body, task, side, threads, thread_pool)
                        fut.add_done_callback(lambda f, s=state, sd=side: self._done.put((s, sd, f)))

                try:
                    state, side, fut = self._done.get(timeout=self.cluster.poll_interval)
                except queue.Empty:
                    continue
                while True:
                    in_use[side] -= 1
                    value, cpu = fut.result()
                    self.stats.cpu_seconds += cpu
                    state.partial = state.partial + value
                    state.remaining -= 1
                    if state.remaining == 0:
                        del running[state.index]
                        finish(state)
                    try:
                        state, side, fut = self._done.get_nowait()
                    except queue.Empty:
                        break
        finally:
            task_pool.shutdown(wait=False, cancel_futures=True)
            if thread_pool is not None:
                thread_pool.shutdown(wait=False, cancel_futures=True)

        total = FixedFraction.zero(self.request.precision_bits)
        for idx in range(len(self.jobs)):
            total = total + sums[idx]
        self.stats.elapsed = time.perf_counter() - started
        return make_result(self.request, total, stats=self.stats)


def run(
    request: ExtractionRequest,
    plan: PartitionPlan | None = None,
    store: CheckpointStore | None = None,
    cluster: ClusterConfig | None = None,
    **kw,
) -> ExtractionResult:
    """Evaluate ``request`` under ``plan``, persisting each job sum to ``store``.

    Job sums already present in the store are reused after their header and
    slice identities are checked, so calling this again after an interruption
    resumes the run.
    """
    if plan is None:
        plan = PartitionPlan.sized(ComputationSlice.root(request).size)
    return Controller(request, plan, store, cluster, **kw).execute()


def resume(
    request: ExtractionRequest,
    plan: PartitionPlan,
    store: CheckpointStore,
    cluster: ClusterConfig | None = None,
    **kw,
) -> ExtractionResult:
    """Finish a run from whatever job sums ``store`` holds; refuses foreign records."""
    return run(request, plan, store, cluster, **kw)


def stored_sum(request: ExtractionRequest, plan: PartitionPlan, store: CheckpointStore) -> FixedFraction:
    """Sum of every persisted job record; equals the final fraction once all exist."""
    total = FixedFraction.zero(request.precision_bits)
    for idx in store.job_indices():
        total = total + store.read_job(idx).partial_sum
    return total
