import csv
import dataclasses
import io
import json

import pytest

from dualskip.bench import (
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    CostModel,
    SweepSpec,
    audit_summaries,
    audit_trace,
    emit_trace,
    load_trace,
    parse_trace_lines,
    rollout_cost,
    rows_csv,
    run_sweep,
    simulated_latency,
    speedup_from_ratio,
    step_latency,
    summary_rows,
    sweep_csv,
    trace_lines,
)
from dualskip.orchestrator import summarize
from dualskip.rollout import affine_scenario, curved_scenario, run_rollout
from dualskip.types import (
    BranchKind,
    ConfigError,
    ControllerConfig,
    Decision,
    DecisionTrace,
    StepSummary,
    make_uniform_grid,
)

V, T = BranchKind.VISION, BranchKind.TRAJECTORY


def summ(branch, computes, K):
    return StepSummary(branch=branch, computes=computes, skips=K - computes,
                       compute_ratio=computes / K, safety_fraction=0.0)


def test_latency_examples():
    cost = CostModel()
    assert simulated_latency(summ(T, 100, 100), cost) == pytest.approx(20.23)
    assert simulated_latency(summ(T, 0, 100), cost) == 0.0
    r = 10.59 / 20.23
    assert cost.trajectory_ms * r == pytest.approx(10.59)
    assert speedup_from_ratio(r) == pytest.approx(1.91, rel=0.01)
    assert speedup_from_ratio(0.0) == float("inf")


def test_step_latency_adds_overhead():
    cost = CostModel()
    full = step_latency(summ(V, 10, 10), summ(T, 10, 10), cost)
    assert full == pytest.approx(20.23 + 244.19 + 168.03)


def test_cost_model_validation():
    with pytest.raises(ConfigError):
        CostModel(vision_ms=-1.0)
    with pytest.raises(ConfigError):
        CostModel(overhead_ms=float("nan"))


def test_rollout_cost_all_compute_is_unity():
    res = run_rollout(curved_scenario(2), ControllerConfig(), make_uniform_grid(20), baseline=False,
                      force_compute=(V, T))
    rc = rollout_cost(res)
    assert rc.speedup_vision == rc.speedup_trajectory == rc.speedup_diffusion == rc.speedup_total == 1.0


def test_rollout_cost_affine():
    res = run_rollout(affine_scenario(3), ControllerConfig(), make_uniform_grid(100), baseline=False)
    rc = rollout_cost(res)
    assert rc.speedup_vision == pytest.approx(100 / 22)
    assert rc.speedup_diffusion == pytest.approx(100 / 22)
    assert 1.0 < rc.speedup_total < rc.speedup_diffusion


@pytest.fixture(scope="module")
def small_run():
    return run_rollout(curved_scenario(3, seed=4), ControllerConfig(), make_uniform_grid(11))


def test_trace_record_counts(small_run, tmp_path):
    path = emit_trace(small_run, tmp_path / "t.ndjson")
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    assert header["record"] == "header" and header["K"] == 11 and header["schema"] == 1
    steps = [json.loads(l) for l in lines[1:]]
    assert len(steps) == 3 * 2 * 11
    for s in range(3):
        assert sum(1 for r in steps if r["s"] == s) == 22
    assert all(r["branch"] == "vision" for r in steps if r["gate_forced"])


def test_trace_round_trip(small_run, tmp_path):
    path = emit_trace(small_run, tmp_path / "t.ndjson")
    back = load_trace(path)
    assert back == small_run.trace
    assert back.K == 11 and back.config == ControllerConfig()


def test_trace_replay_matches_summaries(small_run):
    back = parse_trace_lines(trace_lines(small_run.trace))
    for s, r in enumerate(small_run.steps):
        sv, st, seed = summarize(back.select(s=s), back.K)
        assert (sv, st) == (r.summary_v, r.summary_t)
        assert seed == r.seed_out


def test_parse_trace_errors():
    with pytest.raises(ConfigError):
        parse_trace_lines(['{"record": "step"'])
    with pytest.raises(ConfigError):
        parse_trace_lines(['{"record": "header", "schema": 99, "K": 3, "config": null}'])
    with pytest.raises(ConfigError):
        parse_trace_lines([])
    with pytest.raises(ConfigError):
        parse_trace_lines(['{"record": "header", "schema": 1, "K": 3, "config": null}',
                           '{"record": "mystery"}'])


def test_load_trace_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_trace(tmp_path / "absent.ndjson")


def test_audit_clean(small_run):
    assert audit_trace(small_run.trace) == []
    rows = list(csv.DictReader(io.StringIO(rows_csv(summary_rows(small_run), SUMMARY_COLUMNS))))
    assert audit_summaries(small_run.trace, rows) == []


def _mutate(trace, pick, **changes):
    entries = list(trace)
    i = next(i for i, e in enumerate(entries) if pick(e))
    entries[i] = dataclasses.replace(entries[i], **changes)
    return DecisionTrace(entries, K=trace.K, config=trace.config)


@pytest.mark.parametrize("pick, changes, needle", [
    (lambda e: e.k == 11, {"decision": Decision.SKIP}, "warm-up"),
    (lambda e: e.branch is T, {"gate_forced": True}, "gate_forced on trajectory"),
    (lambda e: e.decision is Decision.COMPUTE and e.k < 8, {"cap_hit": True,
                                                             "decision": Decision.SKIP}, "guard"),
    (lambda e: e.decision is Decision.SKIP, {"consecutive_skips": 9}, "c_max"),
])
def test_audit_detects_injected_violations(small_run, pick, changes, needle):
    problems = audit_trace(_mutate(small_run.trace, pick, **changes))
    assert any(needle in p for p in problems), problems


def test_audit_detects_missing_entries(small_run):
    entries = list(small_run.trace)[1:]
    problems = audit_trace(DecisionTrace(entries, K=11, config=small_run.trace.config))
    assert any("cover" in p for p in problems)


def test_audit_detects_long_skip_run(small_run):
    trace = DecisionTrace([dataclasses.replace(e, decision=Decision.SKIP, consecutive_skips=0,
                                               cap_hit=False, stall_hit=False, gate_forced=False,
                                               warmup_active=False, warmup_eff=0)
                           if e.s == 0 and e.branch is T else e for e in small_run.trace],
                          K=11, config=small_run.trace.config)
    problems = audit_trace(trace)
    assert any("consecutive skips" in p for p in problems)


def test_audit_detects_summary_mismatch(small_run):
    rows = summary_rows(small_run)
    rows[0] = {**rows[0], "computes": rows[0]["computes"] + 1}
    assert audit_summaries(small_run.trace, rows)


SMALL_SWEEP = SweepSpec(thetas=(0.005, 0.02), c_maxes=(2, 4), warmups=(3,), epsilons=(1e-6,),
                        repetitions=2)


def test_sweep_rows_and_columns():
    rows = run_sweep(SMALL_SWEEP, curved_scenario(2), make_uniform_grid(30))
    assert len(rows) == 8
    assert [(r["point"], r["repetition"]) for r in rows] == [(p, r) for p in range(4) for r in range(2)]
    assert {r["seed"] for r in rows} == {0, 1}
    text = sweep_csv(rows)
    assert text.splitlines()[0] == ",".join(SWEEP_COLUMNS)
    assert all(r["status"] == "ok" for r in rows)


def test_sweep_is_byte_identical_across_runs_and_workers():
    a = sweep_csv(run_sweep(SMALL_SWEEP, curved_scenario(2), make_uniform_grid(30)))
    b = sweep_csv(run_sweep(SMALL_SWEEP, curved_scenario(2), make_uniform_grid(30)))
    c = sweep_csv(run_sweep(SMALL_SWEEP, curved_scenario(2), make_uniform_grid(30), workers=2))
    assert a == b == c


def test_sweep_reports_failed_points():
    sweep = SweepSpec(thetas=(0.01,), c_maxes=(4,), warmups=(3, 50), epsilons=(1e-6,))
    rows = run_sweep(sweep, curved_scenario(1), make_uniform_grid(10))
    assert [r["status"] for r in rows] == ["ok", "failed"]
    assert "warmup" in rows[1]["error"]
    assert rows[1].get("speedup_total") is None
    assert sweep_csv(rows).splitlines()[2].endswith(",ConfigError: warmup 50 exceeds grid size K=10")


def test_sweep_spec_validation():
    with pytest.raises(ConfigError):
        SweepSpec(thetas=())
    with pytest.raises(ConfigError):
        SweepSpec(repetitions=0)
    assert len(SweepSpec().points()) == 81
