"""End-to-end acceptance criteria, one test each, at their stated tolerances.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The slot-safety soak runs for ten minutes of wall time.
"""

import json
import random
import threading
import time
from fractions import Fraction

import pytest

from pibits.checkpoint import CheckpointStore
from pibits.cli import main
from pibits.engine import ClusterConfig, Controller, PartitionPlan, RunInterrupted, run
from pibits.fixedpoint import round_up_precision
from pibits.modmath import MontgomeryContext, mod_pow, montgomery_pow
from pibits.series import BBP16, BELLARD, ExtractionRequest, extract
from pibits.slots import RandomLoadTrace, Side, SlotMonitor
from pibits.verify import ErrorModel, confidence, monte_carlo_error

from conftest import bbp_fraction_of_2n_pi, pi_hex

pytestmark = pytest.mark.slow

SOAK_SECONDS = 600


def request(pos, bits, formula=BELLARD, guard=64):
    p = round_up_precision(bits + guard)
    return ExtractionRequest(pos, p, p - bits, formula)


def test_01_known_prefix(acceptance, capsys):
    expected = pi_hex(1, 1024)
    details, ok = [], True
    for name in ("bbp16", "bellard"):
        t0 = time.perf_counter()
        code = main(["compute", "--pos", "1", "--bits", "1024", "--formula", name, "--json"])
        dt = time.perf_counter() - t0
        got = json.loads(capsys.readouterr().out)["hex"]
        good = code == 0 and got == expected and len(got) == 256 and dt < 10
        ok &= good
        details.append(f"{name} {dt:.2f}s {'match' if got == expected else 'MISMATCH'}")
    main(["compute", "--pos", "9", "--bits", "8"])
    out = capsys.readouterr().out
    byte = next(line for line in out.splitlines() if line.startswith("Hex")).split(":", 1)[1].strip()
    ok &= byte == "3F"
    details.append(f"pos 9 -> {byte}")
    acceptance("1 known prefix (1024 bits, both formulas, <10 s; pos 9 = 3F)", ok, "; ".join(details))
    assert ok, details


def test_02_formula_independence(acceptance):
    rnd = random.Random(2024)
    positions = [rnd.randint(1, 10**7) for _ in range(50)]
    t0 = time.perf_counter()
    mismatches = []
    for s in positions:
        a = run(request(s, 256, BBP16)).hex
        b = run(request(s, 256, BELLARD)).hex
        if a != b:
            mismatches.append(s)
    dt = time.perf_counter() - t0
    ok = not mismatches and dt < 30 * 60
    acceptance("2 formula independence (50 random s <= 1e7, 256+64 bits, <30 min)", ok,
               f"{len(positions) - len(mismatches)}/50 agree in {dt:.0f}s")
    assert ok, mismatches


def test_03_dual_run_verification(acceptance, capsys):
    s = 10**6 + 1
    code = main(["verify", "--pos", str(s), "--bits", "256", "--json"])
    data = json.loads(capsys.readouterr().out)
    ok = code == 0 and data["first_disagreement"] is None and data["verified_bits"] >= 252
    ok &= data["verified_hex"] == pi_hex(s, 252)
    acceptance("3 dual-run verification at 1e6+1 (>= 252 verified bits)", ok,
               f"verified {data['verified_bits']} bits, exit {code}")
    assert ok


def test_04_plan_and_interrupt_invariance(acceptance, tmp_path):
    req = request(10**6 + 1, 256)
    single = run(req, PartitionPlan(1, 1, 1)).fraction
    wide = run(req, PartitionPlan(64, 1, 8)).fraction

    plan = PartitionPlan(16, 2, 1)
    store = CheckpointStore(tmp_path)
    stop = threading.Event()

    def halt_at_half(idx, done, total):
        if done >= total // 2:
            stop.set()

    interrupted = False
    try:
        run(req, plan, store, ClusterConfig(map_slots=1, reduce_slots=0), stop=stop, on_job_complete=halt_at_half)
    except RunInterrupted:
        interrupted = True
    kept = len(store.job_indices())
    resumed = run(req, plan, store)
    ok = interrupted and single == wide == resumed.fraction and resumed.stats.jobs_reused == kept
    acceptance("4 plan shape and interrupt/resume invariance (1 job/1 thread, 64 jobs/8 threads, 50% interrupt)", ok,
               f"interrupted after {kept}/16 jobs; limbs {'identical' if single == wide == resumed.fraction else 'DIFFER'}")
    assert ok


def test_05_montgomery_correctness(acceptance):
    rnd = random.Random(5)
    cases = [(rnd.randrange(0, 1 << 63), rnd.randrange(3, 1 << 63) | 1) for _ in range(100_000)]
    contexts = [MontgomeryContext(m) for _, m in cases]
    t0 = time.perf_counter()
    got = [montgomery_pow(ctx, e) for ctx, (e, _) in zip(contexts, cases)]
    dt = time.perf_counter() - t0
    wrong = sum(g != mod_pow(2, e, m) for g, (e, m) in zip(got, cases))
    rate = len(cases) / dt * 60
    ok = wrong == 0 and rate >= 1e6
    acceptance("5 Montgomery = mod_pow on 1e5 cases, >= 1e6/min", ok, f"{wrong} wrong, {rate:.3g}/min")
    assert ok


def test_06_error_model(acceptance):
    model = ErrorModel(7 * 10**14, 52)
    c29, c28 = confidence(model, 29), confidence(model, 28)
    small = ErrorModel(10**4, 20)
    sim = monte_carlo_error(small, 100_000, seed=6)
    empirical, analytic = sim.fraction_within(15), confidence(small, 15)
    ok = 0.7274 <= c29 <= 0.7284 and 0.9715 <= c28 <= 0.9725 and abs(empirical - analytic) <= 0.02
    acceptance("6 error model (b=29, b=28 figures; Monte Carlo within 0.02)", ok,
               f"b=29 {c29:.5f}, b=28 {c28:.5f}, MC {empirical:.4f} vs {analytic:.4f}")
    assert ok


def test_07_linear_scaling(acceptance):
    def best_time(n):
        times = []
        for _ in range(2):
            t0 = time.perf_counter()
            run(ExtractionRequest(n + 1, 256, 0))
            times.append(time.perf_counter() - t0)
        return min(times)

    t1, t2 = best_time(10**7), best_time(2 * 10**7)
    ratio = t2 / t1
    ok = 1.6 <= ratio <= 2.5
    acceptance("7 time(n=2e7)/time(n=1e7) at p=256 in [1.6, 2.5]", ok, f"{t1:.2f}s / {t2:.2f}s -> {ratio:.2f}")
    assert ok


def test_08_exact_rational_agreement(acceptance):
    reported = 256
    worst = Fraction(0)
    for f in (BBP16, BELLARD):
        for n in range(61):
            exact = bbp_fraction_of_2n_pi(n, reported + 128)
            r = run(request(n + 1, reported, f))
            got = Fraction(r.fraction.numerator, 1 << r.fraction.precision_bits)
            err = abs(got - exact)
            worst = max(worst, min(err, 1 - err))
    ulps = worst * (1 << reported)
    ok = ulps <= 2
    acceptance("8 exact-rational agreement for n <= 60 (<= 2 ulp of 256 bits)", ok, f"worst {float(ulps):.3g} ulp")
    assert ok


def test_09_slot_safety_soak(acceptance):
    caps = {Side.MAP: 3, Side.REDUCE: 2}
    monitor = SlotMonitor()
    rnd = random.Random(9)
    references = {}
    runs = wrong = 0
    deadline = time.monotonic() + SOAK_SECONDS
    while time.monotonic() < deadline:
        s = rnd.choice([10_001, 250_001, 1_000_001])
        if s not in references:
            references[s] = extract(request(s, 128)).fraction
        cluster = ClusterConfig(
            map_slots=caps[Side.MAP],
            reduce_slots=caps[Side.REDUCE],
            load_trace=RandomLoadTrace(caps[Side.MAP], caps[Side.REDUCE], seed=rnd.randrange(1 << 30), period=0.01),
            poll_interval=0.005,
        )
        plan = PartitionPlan(rnd.randint(4, 40), rnd.randint(1, 6), rnd.randint(1, 3))
        result = Controller(request(s, 128), plan, cluster=cluster, monitor=monitor).execute()
        runs += 1
        wrong += result.fraction != references[s]
    ok = monitor.peak[Side.MAP] <= caps[Side.MAP] and monitor.peak[Side.REDUCE] <= caps[Side.REDUCE] and wrong == 0
    parts = monitor.parts[Side.MAP] + monitor.parts[Side.REDUCE]
    acceptance("9 slot safety over a 10-minute randomized-load soak", ok,
               f"{runs} runs, {parts} parts, peak map {monitor.peak[Side.MAP]}/3 reduce {monitor.peak[Side.REDUCE]}/2, "
               f"{wrong} wrong results")
    assert ok
