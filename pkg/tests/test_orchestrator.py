
import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import constant_diff_schedule

from dualskip.orchestrator import apply_gate, run_dual_step, seed_next, summarize
from dualskip.sampler import AffineFlowModel, CurvedFlowModel, sample_branch_full
from dualskip.types import (
    BranchKind,
    ConfigError,
    ContextRecord,
    ControllerConfig,
    Decision,
    Latent,
    TraceEntry,
    make_uniform_grid,
)

V, T = BranchKind.VISION, BranchKind.TRAJECTORY
C, S = Decision.COMPUTE, Decision.SKIP


def affine_models(dv=6, dt=3, seed=1):
    rng = np.random.default_rng(seed)
    return (AffineFlowModel(V, 5 * rng.standard_normal(dv)),
            AffineFlowModel(T, 5 * rng.standard_normal(dt)))


def ctx0():
    return ContextRecord(step_index=0, previous={})


def pattern(result, branch):
    entries = sorted((e for e in result.trace_slice if e.branch is branch), key=lambda e: -e.k)
    return "".join("C" if e.decision is C else "S" for e in entries)


def entry(k, branch, decision, warm=False, cap=False, stall=False, forced=False, s=0):
    return TraceEntry(s=s, k=k, branch=branch, decision=decision, proposed=decision,
                      warmup_active=warm, cap_hit=cap, stall_hit=stall, gate_forced=forced,
                      diff=0.1, residual=None, consecutive_skips=0, warmup_eff=3, theta_eff=0.01)


def test_golden_trace_K11_affine():
    # Hand simulation (and the oracle): warm-up k=11,10,9; window full after k=9;
    # four skips k=8..5; cap forces k=4; skips resume for k=3..1.
    golden = "CCCSSSSCSSS"
    oracle = "".join(d for _, d, _ in constant_diff_schedule(11, 3, 4))
    assert oracle == golden
    res = run_dual_step(ctx0(), affine_models(), make_uniform_grid(11), ControllerConfig())
    for b in (V, T):
        assert pattern(res, b) == golden
        assert res.summary(b).computes == 4
        # warm-up (3) plus one cap trigger
        assert res.summary(b).safety_fraction == 4 / 11
    cap_ks = [e.k for e in res.trace_slice if e.cap_hit]
    assert sorted(set(cap_ks)) == [4]


@pytest.mark.parametrize("K, W, c_max", [(11, 3, 4), (100, 3, 4), (50, 0, 2), (100, 5, 8),
                                         (30, 7, 1), (20, 2, 0), (9, 9, 3)])
def test_affine_schedule_matches_oracle(K, W, c_max):
    cfg = ControllerConfig(warmup=W, c_max=c_max)
    res = run_dual_step(ctx0(), affine_models(), make_uniform_grid(K), cfg)
    oracle = constant_diff_schedule(K, W, c_max)
    want = "".join(d for _, d, _ in oracle)
    want_sigma = sum(1 for *_, sig in oracle if sig)
    for b in (V, T):
        assert pattern(res, b) == want
        assert res.summary(b).safety_fraction == want_sigma / K


def test_force_compute_matches_full_sampler_bit_for_bit():
    grid = make_uniform_grid(11)
    mv, mt = CurvedFlowModel(V, [1.0, 2.0], amplitude=0.3), CurvedFlowModel(T, [-1.0], amplitude=0.7)
    res = run_dual_step(ctx0(), (mv, mt), grid, ControllerConfig(), rng_seed=5, force_compute=(V, T))
    for b, m in ((V, mv), (T, mt)):
        assert res.summary(b).computes == 11
        ref_model = CurvedFlowModel(b, m.anchors, amplitude=float(m.amplitude))
        ctx = ContextRecord(0, {}, start=res.x_start)
        ref = sample_branch_full(ref_model, grid, Latent(res.x_start[b], b, 11), ctx)
        assert np.array_equal(ref.values, res.x0(b).values)


def test_gate_table():
    assert apply_gate(True, S) == (C, True)
    assert apply_gate(False, S) == (S, False)
    assert apply_gate(True, C) == (C, False)
    assert apply_gate(False, C) == (C, False)


def desync_models():
    """Vision bends hard (residual-driven computes), trajectory is straight (cap cadence)."""
    rng = np.random.default_rng(3)
    mv = CurvedFlowModel(V, rng.standard_normal(2), amplitude=2.0, frequency=1)
    mt = AffineFlowModel(T, 10 * rng.standard_normal(3))
    return mv, mt


def test_gate_forces_vision_and_is_excluded_from_rho():
    grid = make_uniform_grid(100)
    res = run_dual_step(ctx0(), desync_models(), grid, ControllerConfig(), rng_seed=2)
    forced = [e for e in res.trace_slice if e.gate_forced]
    assert forced, "scenario should exercise the gate"
    assert all(e.branch is V and e.decision is C and e.proposed is S for e in forced)
    traj = {e.k: e for e in res.trace_slice if e.branch is T}
    vis = {e.k: e for e in res.trace_slice if e.branch is V}
    for k, e in traj.items():
        if e.sigma:
            assert vis[k].decision is C
    local_v = sum(1 for e in vis.values() if e.sigma)
    assert res.summary_v.safety_fraction == local_v / 100
    assert any(not vis[e.k].sigma for e in forced)


def test_gate_unidirectional():
    grid = make_uniform_grid(100)
    a = run_dual_step(ctx0(), desync_models(), grid, ControllerConfig(), rng_seed=4)
    b = run_dual_step(ctx0(), desync_models(), grid, ControllerConfig(), rng_seed=4,
                      force_compute=(V,))
    ta = [e for e in a.trace_slice if e.branch is T]
    tb = [e for e in b.trace_slice if e.branch is T]
    assert ta == tb
    assert np.array_equal(a.x0_trajectory.values, b.x0_trajectory.values)
    assert pattern(a, V) != pattern(b, V)


def test_gate_forced_compute_resets_vision_counter():
    res = run_dual_step(ctx0(), desync_models(), make_uniform_grid(100), ControllerConfig(), rng_seed=2)
    vis = {e.k: e for e in res.trace_slice if e.branch is V}
    for e in vis.values():
        if e.gate_forced and e.k > 1:
            assert vis[e.k - 1].consecutive_skips == 0


def test_summarize_seven_of_eleven_accounting():
    vision_computes = {11, 10, 8, 7, 5, 2, 1}  # seven computes, four skips
    trace = [entry(k, V, C if k in vision_computes else S) for k in range(11, 0, -1)]
    trace += [entry(k, T, C) for k in range(11, 0, -1)]
    sv, st_, _ = summarize(trace, 11)
    assert (sv.computes, sv.skips, sv.compute_ratio) == (7, 4, 7 / 11)
    assert st_.computes == 11


def test_summarize_all_compute_rho_is_warmup_fraction():
    res = run_dual_step(ctx0(), affine_models(), make_uniform_grid(100), ControllerConfig(),
                        force_compute=(V, T))
    assert res.summary_v.safety_fraction == 3 / 100
    assert res.summary_t.safety_fraction == 3 / 100


def test_summarize_rho_excludes_gate_forced():
    trace = [entry(k, V, C, forced=True) for k in range(1, 5)]
    trace += [entry(k, T, C, cap=(k == 2)) for k in range(1, 5)]
    sv, st_, seed = summarize(trace, 4)
    assert sv.safety_fraction == 0.0
    assert st_.safety_fraction == 0.25
    assert seed.beta == 0.25


def test_summarize_beta_is_max():
    trace = [entry(k, V, C, warm=(k <= 2)) for k in range(1, 11)]
    trace += [entry(k, T, C, stall=(k <= 3)) for k in range(1, 11)]
    sv, st_, seed = summarize(trace, 10)
    assert (sv.safety_fraction, st_.safety_fraction, seed.beta) == (0.2, 0.3, 0.3)


def test_summarize_rejects_incomplete():
    with pytest.raises(ConfigError):
        summarize([entry(1, V, C)], 2)


def test_seed_next_values():
    cfg = ControllerConfig(gamma=0.1, lam=0.5)
    zero = seed_next(0.0, cfg, 100)
    assert (zero.seeded_warmup, zero.seeded_theta) == (cfg.warmup, cfg.theta)
    half = seed_next(0.5, cfg, 100)
    assert (half.seeded_warmup, half.seeded_theta) == (5, 0.0125)
    assert seed_next(1.0, cfg, 20).seeded_warmup == 3


def test_seed_next_floor_is_robust_to_rounding():
    # 0.1 * 0.7 * 100 evaluates to 6.999999999999999 in binary floating point
    cfg = ControllerConfig(gamma=0.1, warmup=0)
    assert seed_next(0.7, cfg, 100).seeded_warmup == 7


def test_seed_next_rejects_out_of_range():
    with pytest.raises(ConfigError):
        seed_next(1.5, ControllerConfig(), 100)


@given(b1=st.floats(0, 1), b2=st.floats(0, 1), gamma=st.floats(0, 2), lam=st.floats(0, 2),
       K=st.integers(1, 500))
def test_seed_monotone_in_beta(b1, b2, gamma, lam, K):
    cfg = ControllerConfig(gamma=gamma, lam=lam)
    lo, hi = sorted((b1, b2))
    a, b = seed_next(lo, cfg, K), seed_next(hi, cfg, K)
    assert a.seeded_warmup <= b.seeded_warmup
    assert a.seeded_theta <= b.seeded_theta
    assert a.seeded_warmup >= cfg.warmup and a.seeded_theta >= cfg.theta


def test_seed_in_expands_warmup():
    cfg = ControllerConfig(gamma=0.1)
    seed = seed_next(0.5, cfg, 100)
    res = run_dual_step(ctx0(), affine_models(), make_uniform_grid(100), cfg, seed_in=seed)
    for b in (V, T):
        assert pattern(res, b).startswith("CCCCC")
        assert all(e.warmup_eff == 5 and e.theta_eff == 0.0125
                   for e in res.trace_slice if e.branch is b)


def test_determinism():
    grid = make_uniform_grid(50)
    runs = [run_dual_step(ctx0(), desync_models(), grid, ControllerConfig(), rng_seed=9)
            for _ in range(2)]
    assert runs[0].trace_slice == runs[1].trace_slice
    assert np.array_equal(runs[0].x0_vision.values, runs[1].x0_vision.values)
    assert np.array_equal(runs[0].x0_trajectory.values, runs[1].x0_trajectory.values)


def test_rejects_swapped_models():
    mv, mt = affine_models()
    with pytest.raises(ConfigError):
        run_dual_step(ctx0(), (mt, mv), make_uniform_grid(5), ControllerConfig())


def test_eval_count_equals_computes():
    mv, mt = desync_models()
    res = run_dual_step(ctx0(), (mv, mt), make_uniform_grid(100), ControllerConfig(), rng_seed=1)
    assert mv.eval_count == res.summary_v.computes
    assert mt.eval_count == res.summary_t.computes
