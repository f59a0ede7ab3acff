"""Acceptance suite: one PASS/FAIL line per criterion.

Each test records its verdict with :func:`report`; the lines are echoed as
they happen and collected again in the pytest terminal summary. Long-running
criteria are marked ``slow``. Criterion 9 needs tens of hours on one CPU core
at the stated budget, so it measures the cost of a gradient step, projects the
full runtime and fails unless ``BTR_FULL_ACCEPTANCE=1`` asks for the real run.
"""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from btr import analysis
from btr.config import AgentConfig, load_config
from btr.envs import GridPixelEnv, oracle_optimal_return
from btr.learner import Learner, compute_targets
from btr.network import NetworkSpec, SNConv2d, build_network, count_parameters
from btr.orchestrator import CSV_COLUMNS, epsilon_at, make_network, read_csv, run_training

from oracles import nstep_stream_mismatches
from test_learner import finite_difference_check, random_batch, state_batch
from test_replay import _filled, chi2_sampling_pvalue
from tiny import TableNet, TinyQuantileNet

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
RESULTS: dict[int, str] = {}

ATARI = NetworkSpec((4, 84, 84), 18)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    sys.__stdout__.write(f"\n{line}\n")
    sys.__stdout__.flush()
    assert ok, line


def test_c01_parameter_counts():
    c = count_parameters(ATARI)
    total, linear = c["total_mu"], c["linear_mu"]
    ok = abs(total / 2.91e6 - 1) <= 0.02 and abs(linear / 2.52e6 - 1) <= 0.02
    report(1, ok, f"total_mu={total:,} (2.91M +-2%), linear_mu={linear:,} (2.52M +-2%)")


def test_c02_maxpool_parameter_share():
    with_pool = count_parameters(ATARI)["total_mu"]
    without = count_parameters(NetworkSpec((4, 84, 84), 18, maxpool=False))["total_mu"]
    share = 100.0 * with_pool / without
    report(2, abs(share - 23.0) <= 3.0, f"maxpool/no-maxpool total_mu = {with_pool:,}/{without:,} = {share:.1f}% (23 +-3 pp)")


def test_c03_resolution_invariance():
    a = count_parameters(ATARI)
    b = count_parameters(ATARI.with_input(140, 114))
    keys = ("embedding", "heads_mu", "heads_sigma")
    ok = all(a[k] == b[k] for k in keys) and a["feature_dim"] == b["feature_dim"] == 2304
    report(3, ok, f"84x84 vs 140x114: feature_dim {a['feature_dim']}/{b['feature_dim']}, head params "
                  f"{a['heads_mu'] + a['heads_sigma']}/{b['heads_mu'] + b['heads_sigma']}")


def test_c04_gradient_oracle():
    errs = [finite_difference_check(seed) for seed in range(5)]
    report(4, max(errs) < 1e-4, f"max relative error over 5 seeds = {max(errs):.2e} (< 1e-4)")


def test_c05_target_rule_limits():
    rng = np.random.default_rng(2)
    cfg = AgentConfig(iqn_taus=4, munchausen_alpha=0.0, munchausen_tau=1e-6)
    worst = 0.0
    for seed in range(10):
        net = TinyQuantileNet(6, 8, 3, seed=seed)
        batch = random_batch(rng, 8)
        taus = torch.tensor(rng.random((8, 4)))
        got = compute_targets(batch, net, net, cfg, target_taus=taus).numpy()
        with torch.no_grad():
            z = net(torch.from_numpy(batch.next_states), taus).numpy()
        best = z.mean(1).argmax(1)
        disc = np.where(batch.terminals, 0.0, cfg.discount ** batch.horizons)
        ref = batch.returns[:, None] + disc[:, None] * z[np.arange(8), :, best]
        worst = max(worst, float(np.max(np.abs(got - ref))))
    # double-DQN rule on a 2-state chain: online picks a*=1 in state 1, the target scores it 3.0
    online = TableNet([[0.0, 0.0], [1.0, 2.0]])
    target = TableNet([[0.0, 0.0], [5.0, 3.0]])
    dcfg = AgentConfig(use_munchausen=False, use_iqn=False, discount=0.5)
    chain = state_batch([0, 0], [0, 1], [0.5, 0.5], [1, 1], [False, True], [2, 2])
    d = compute_targets(chain, online, target, dcfg).numpy()[:, 0]
    exact = d[0] == 0.5 + 0.5**2 * 3.0 and d[1] == 0.5
    report(5, worst < 1e-3 and exact,
           f"hard-max limit max |diff| = {worst:.2e} (< 1e-3); double-DQN chain targets {d.tolist()} vs [1.25, 0.5]")


def _iid_pvalue(seed: int, draws: int) -> float:
    # single proportional draws straight from the sum tree (a batch of one)
    rng = np.random.default_rng(seed)
    rp = _filled(64, 0.2, seed=seed)
    td = rng.exponential(1.0, 64)
    rp.update_priorities(np.arange(64), td)
    p = (td + 1e-6) ** 0.2
    p /= p.sum()
    counts = np.bincount(rp.tree.find(rp.rng.uniform(0, rp.tree.total, draws)), minlength=64)
    return stats.chisquare(counts, draws * p).pvalue


def test_c06_per_sampling_distribution():
    strat = [chi2_sampling_pvalue(seed, draws=100_000, batch=256) for seed in range(10)]
    # Training batches are stratified (one draw per equal-mass segment), so counts are
    # less dispersed than a multinomial and p sits near 1. The i.i.d. figures are shown
    # for reference; any vector below 0.01 is re-drawn at 2M draws.
    iid = [_iid_pvalue(seed, 100_000) for seed in range(10)]
    low = [s for s, p in enumerate(iid) if p <= 0.01]
    recheck = ", ".join(f"vector {s}: p {iid[s]:.4f} at 100k, {_iid_pvalue(s, 2_000_000):.3f} at 2M" for s in low)
    report(6, min(strat) > 0.01,
           f"stratified batches of 256, 100k draws, 10 priority vectors: min p {min(strat):.3f} (> 0.01); "
           f"i.i.d. single draws: {10 - len(low)}/10 above 0.01" + (f" ({recheck})" if recheck else ""))


def test_c07_nstep_oracle():
    lines, ok = [], True
    for n in (1, 2, 3, 5):
        checked, bad = nstep_stream_mismatches(n, 10_000, seed=100 + n)
        ok &= bad == 0 and checked > 0
        lines.append(f"n={n}: {bad}/{checked}")
    report(7, ok, "mismatches over 10k steps " + ", ".join(lines))


def test_c08_spectral_norm_oracle():
    # 20 residual convs with the default network's shapes (width 2: 32, 64, 64 channels)
    channels = [32, 64, 64]
    errs = []
    for i in range(20):
        c = channels[i % 3]
        torch.manual_seed(i)
        conv = SNConv2d(c, c, 3, padding=1)
        conv.power_iteration(50)
        w = conv.normalized_weight().detach().double().reshape(c, -1)
        errs.append(float(torch.linalg.svdvals(w)[0]))
    errs = np.array(errs)
    inside = int(np.sum((errs >= 0.99) & (errs <= 1.01)))
    report(8, inside == 20, f"{inside}/20 normalized sigma_max in [0.99, 1.01] (range {errs.min():.4f}..{errs.max():.4f})")


# --- end-to-end learning ------------------------------------------------------------------


def _seconds_per_grad_step(cfg: AgentConfig, steps: int = 3) -> float:
    torch.set_num_threads(cfg.torch_threads)
    net = make_network(cfg, 0)
    learner = Learner(net, cfg, torch.Generator().manual_seed(0))
    rng = np.random.default_rng(0)
    from btr.replay import TransitionBatch

    b = cfg.batch_size
    shape = (cfg.frame_stack, cfg.env_height, cfg.env_width)
    batch = TransitionBatch(
        states=rng.integers(0, 256, (b,) + shape, dtype=np.uint8),
        actions=rng.integers(0, 4, b),
        returns=rng.normal(size=b),
        next_states=rng.integers(0, 256, (b,) + shape, dtype=np.uint8),
        terminals=np.zeros(b, bool),
        horizons=np.full(b, 3),
    )
    learner.update(batch)
    start = time.perf_counter()
    for _ in range(steps):
        learner.update(batch)
    return (time.perf_counter() - start) / steps


@pytest.mark.slow
def test_c09_end_to_end_learning(tmp_path):
    budget = 2_000_000
    cfg = AgentConfig(total_frames=budget, env_layout="grid8", env_sticky_prob=0.25)
    oracle = oracle_optimal_return(GridPixelEnv.from_config(cfg, seed=0)).undiscounted
    target = 0.95 * oracle
    if os.environ.get("BTR_FULL_ACCEPTANCE") != "1":
        per_step = _seconds_per_grad_step(cfg)
        grad_steps = (budget - cfg.min_replay_size) / cfg.num_envs
        hours = 4 * grad_steps * per_step / 3600  # 3 seeds plus the w/o-Impala arm
        report(9, hours <= 2.0,
               f"not run: {per_step:.2f} s per batch-{cfg.batch_size} gradient step projects to {hours:.0f} h of "
               f"learning alone for 3 seeds + ablation (budget 2 h); set BTR_FULL_ACCEPTANCE=1 to run it. "
               f"Target mean >= {target:.4f} (95% of oracle {oracle:.4f})")
        return
    means = []
    for seed in range(3):
        res = run_training(cfg.replace(master_seed=seed), tmp_path / f"seed{seed}")
        means.append(res.records[-1].mean)
    ablation = run_training(cfg.replace(use_impala=False), tmp_path / "no_impala")
    rows = read_csv(tmp_path / "no_impala" / "metrics.csv")
    complete = len(rows) > 0 and all(list(r) == CSV_COLUMNS for r in rows) and ablation.state.frame_count >= budget
    ok = all(m >= target for m in means) and complete
    report(9, ok, f"final means {[round(m, 4) for m in means]} vs target {target:.4f}; w/o-Impala CSV complete: {complete}")


@pytest.mark.slow
def test_c10_ablation_matrix_smoke(tmp_path):
    base = load_config(CONFIGS / "smoke.cfg")
    arms = {
        "full": {},
        "no_munchausen": {"use_munchausen": False},
        "no_iqn": {"use_iqn": False},
        "no_sn": {"use_spectral_norm": False},
        "no_impala": {"use_impala": False},
        "no_maxpool": {"use_maxpool": False},
        "no_vectorization": {"use_vectorization": False},
    }
    start = time.perf_counter()
    problems, timings = [], {}
    for name, flags in arms.items():
        t0 = time.perf_counter()
        cfg = base.replace(**flags)
        try:
            run_training(cfg, tmp_path / name)
        except Exception as exc:  # record and keep going so every arm is reported
            problems.append(f"{name}: {type(exc).__name__}: {exc}")
            continue
        timings[name] = time.perf_counter() - t0
        with open(tmp_path / name / "metrics.csv") as f:
            header = f.readline().strip().split(",")
        rows = read_csv(tmp_path / name / "metrics.csv")
        if header != CSV_COLUMNS or not rows:
            problems.append(f"{name}: incomplete CSV")
        elif rows[-1]["frame"] < cfg.total_frames or not all(math.isfinite(r["mean"]) for r in rows):
            problems.append(f"{name}: run did not reach {cfg.total_frames} frames")
    minutes = (time.perf_counter() - start) / 60
    detail = ", ".join(f"{k} {v:.0f}s" for k, v in timings.items())
    ok = not problems and minutes <= 30
    report(10, ok, f"{len(timings)}/{len(arms)} arms trained 50k frames in {minutes:.1f} min (<= 30): {detail}"
                   + (f"; problems: {problems}" if problems else ""))


def test_c11_analysis_oracles():
    checks = {}
    checks["iqm(1..8)=4.5"] = analysis.iqm(range(1, 9)) == 4.5
    rng = np.random.default_rng(0)
    q1, _ = np.linalg.qr(rng.normal(size=(30, 30)))
    q2, _ = np.linalg.qr(rng.normal(size=(10, 10)))
    checks["srank(rank3)=3"] = analysis.srank(q1[:, :3] @ q2[:3] * 4.0, 0.01) == 3

    spec = NetworkSpec((4, 24, 24), 4, width_scale=1, maxpool_out=2, hidden=32, cos_embedding=8)

    def factory(s):
        return GridPixelEnv("grid8", resolution=(24, 24), seed=s)

    probe = analysis.build_probe(factory, 200, seed=0)
    net = build_network(spec, 0)
    k = 7
    fc = net.advantage.fc
    with torch.no_grad():
        for t in (fc.weight_mu, fc.weight_sigma, fc.bias_mu, fc.bias_sigma):
            t[:k] = 0
    layer = analysis.neuron_scores(net, probe)["head.advantage"]
    checks[f"dormant>={k}/{layer.size}"] = np.mean(layer <= 0.025) >= k / layer.size
    checks["churn(identical)=0"] = analysis.policy_churn(net, net, probe) == 0.0
    ok_gap = True
    for _ in range(10):
        q = rng.normal(size=(50, 6))
        ref = np.mean([sorted(row)[-1] - sorted(row)[-2] for row in q])
        ok_gap &= abs(analysis.action_gap_from_q(q) - ref) < 1e-12
    checks["action_gap=scan"] = ok_gap
    report(11, all(checks.values()), ", ".join(f"{k}:{'ok' if v else 'no'}" for k, v in checks.items()))


@pytest.mark.slow
def test_c12_cli_determinism(tmp_path):
    cmd = [sys.executable, "-m", "btr", "train", "--config", str(CONFIGS / "smoke.cfg"),
           "--set", "total_frames=100000", "--set", "eval_interval=25000", "--quiet"]
    start = time.perf_counter()
    outputs = []
    for name in ("a", "b"):
        run_dir = tmp_path / name
        res = subprocess.run(cmd + ["--run-dir", str(run_dir)], capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        outputs.append((run_dir / "metrics.csv").read_bytes())
    minutes = (time.perf_counter() - start) / 60
    same = outputs[0] == outputs[1]
    rows = outputs[0].count(b"\n") - 1
    report(12, same and minutes <= 10,
           f"two CLI runs of 100k frames: metrics CSVs {'identical' if same else 'DIFFER'} ({rows} rows), "
           f"{minutes:.1f} min (<= 10)")


def test_c13_schedule():
    cfg = AgentConfig()
    frames = [0, 4_000_000, 8_000_000, 100_000_000 - 1, 100_000_000]
    want = [1.0, 0.505, 0.01, 0.01, 0.0]
    got = [epsilon_at(f, cfg) for f in frames]
    ok = all(abs(g - w) < 1e-12 for g, w in zip(got, want)) and got[-1] == 0.0
    small = cfg.replace(total_frames=2_000_000)
    scaled = [epsilon_at(int(f * 0.01), small) for f in frames]
    ok &= all(abs(g - w) < 1e-12 for g, w in zip(scaled, want))
    report(13, ok, f"epsilon at {frames} = {[round(g, 6) for g in got]}; x0.01 run: {[round(g, 6) for g in scaled]}")
