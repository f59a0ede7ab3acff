import numpy as np
import pytest
import torch
from scipy import stats

from btr.config import AgentConfig
from btr.envs import GridPixelEnv, oracle_optimal_return
from btr.network import NetworkSpec, build_network
from btr.orchestrator import (
    epsilon_at,
    eval_epsilon_at,
    evaluate,
    greedy_actions,
    make_network,
    run_training,
    select_actions,
)

from tiny import agent_cell, constant_policy_network, tiny_config

SPEC = NetworkSpec((4, 24, 24), 4, width_scale=1, maxpool_out=2, hidden=16, cos_embedding=8)


# --- schedules -----------------------------------------------------------------


def test_epsilon_schedule_defaults():
    cfg = AgentConfig()
    frames = [0, 4_000_000, 8_000_000, 100_000_000 - 1, 100_000_000, 150_000_000]
    got = [epsilon_at(f, cfg) for f in frames]
    assert got[0] == 1.0
    assert got[1] == pytest.approx(0.505, abs=1e-12)
    assert got[2] == pytest.approx(0.01, abs=1e-12)
    assert got[3] == pytest.approx(0.01, abs=1e-12)
    assert got[4] == 0.0 and got[5] == 0.0


def test_epsilon_schedule_scales_with_run_length():
    cfg = AgentConfig(total_frames=2_000_000)
    assert epsilon_at(0, cfg) == 1.0
    assert epsilon_at(40_000, cfg) == pytest.approx(0.505)
    assert epsilon_at(80_000, cfg) == pytest.approx(0.01)
    assert epsilon_at(999_999, cfg) == pytest.approx(0.01)
    assert epsilon_at(1_000_000, cfg) == 0.0
    assert eval_epsilon_at(1_249_999, cfg) == 0.01
    assert eval_epsilon_at(1_250_000, cfg) == 0.0


def test_epsilon_rejects_negative_frame():
    with pytest.raises(ValueError):
        epsilon_at(-1, AgentConfig())


# --- acting ----------------------------------------------------------------------


def _obs(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, 4, 24, 24), dtype=np.uint8)


def test_epsilon_one_is_uniform():
    net = build_network(SPEC, 0)
    rng = np.random.default_rng(0)
    obs = _obs(1000)
    counts = np.zeros(4)
    for _ in range(100):
        a = select_actions(net, obs, 1.0, rng, torch.Generator().manual_seed(0))
        counts += np.bincount(a, minlength=4)
    assert counts.sum() == 100_000
    assert stats.chisquare(counts).pvalue > 0.01


def test_ties_go_to_lowest_action():
    net = constant_policy_network(SPEC, 0)
    with torch.no_grad():
        net.advantage.out.bias_mu.zero_()
    assert np.all(greedy_actions(net, _obs(16)) == 0)


def test_dominant_action_rate_matches_bernoulli():
    net = constant_policy_network(SPEC, 2)
    eps = 0.3
    rng = np.random.default_rng(1)
    a = select_actions(net, _obs(10_000), eps, rng)
    p = 1 - eps + eps / 4
    rate = np.mean(a == 2)
    assert abs(rate - p) < 4 * np.sqrt(p * (1 - p) / 10_000)


def test_action_streams_do_not_depend_on_epsilon():
    net = build_network(SPEC, 0)
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    select_actions(net, _obs(8), 0.0, r1)
    select_actions(net, _obs(8), 1.0, r2)
    assert r1.random() == r2.random()


# --- evaluation --------------------------------------------------------------------


def _grid3_optimal(obs_batch):
    # go right along the top row, then down the last column
    out = []
    for obs in obs_batch:
        r, c = agent_cell(obs, (3, 3))
        out.append(3 if c < 2 else 1)
    return np.array(out)


def grid3_factory(sticky):
    return lambda s: GridPixelEnv("grid3", resolution=(24, 24), sticky_action_prob=sticky, seed=s)


def test_hand_optimal_policy_scores_the_oracle_deterministic():
    oracle = oracle_optimal_return(grid3_factory(0.0)(0))
    scores = evaluate(_grid3_optimal, grid3_factory(0.0), 10, 0.0)
    assert oracle.undiscounted == pytest.approx(0.96)
    assert np.allclose(scores, oracle.undiscounted)


def test_hand_optimal_policy_scores_the_oracle_sticky():
    oracle = oracle_optimal_return(grid3_factory(0.25)(0))
    scores = np.array(evaluate(_grid3_optimal, grid3_factory(0.25), 3000, 0.0, seed=3))
    se = scores.std(ddof=1) / np.sqrt(len(scores))
    assert abs(scores.mean() - oracle.undiscounted) < 3 * se


def test_random_eval_matches_monte_carlo_reference():
    factory = lambda s: GridPixelEnv("corridor5", resolution=(5, 5), max_episode_steps=30, seed=s)  # noqa: E731
    scores = np.array(evaluate(_grid3_optimal, factory, 2000, 1.0, seed=1))
    rng = np.random.default_rng(99)
    ref = []
    for i in range(2000):
        env = factory(10_000 + i)
        env.reset()
        total, done = 0.0, False
        while not done:
            _, r, term, trunc = env.step(int(rng.integers(4)), render_frame=False)
            total += r
            done = term or trunc
        ref.append(total)
    ref = np.array(ref)
    se = np.sqrt(scores.var(ddof=1) / len(scores) + ref.var(ddof=1) / len(ref))
    assert abs(scores.mean() - ref.mean()) < 4 * se


def test_evaluate_is_read_only():
    net = build_network(SPEC, 3)
    net.sample_noise(torch.Generator().manual_seed(0))
    before = {k: v.clone() for k, v in net.state_dict().items()}
    factory = lambda s: GridPixelEnv("corridor5", resolution=(24, 24), max_episode_steps=20, seed=s)  # noqa: E731
    a = evaluate(net, factory, 3, 0.5, seed=4)
    b = evaluate(net, factory, 3, 0.5, seed=4)
    assert a == b
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert net.training


def test_every_episode_terminates():
    factory = lambda s: GridPixelEnv("grid8", resolution=(8, 8), max_episode_steps=7, seed=s)  # noqa: E731
    scores = evaluate(lambda o: np.zeros(len(o), int), factory, 5, 0.0)
    # always moving up into the wall: seven step penalties, then truncation
    assert np.allclose(scores, -0.07)


# --- training loop -----------------------------------------------------------------


def test_warmup_gate_blocks_learning():
    cfg = tiny_config(total_frames=400, min_replay_size=400, eval_interval=400)
    res = run_training(cfg)
    assert res.state.frame_count == 400
    assert res.state.grad_step_count == 0
    assert res.state.warmup_frames == -1


@pytest.mark.parametrize("vectorized", [True, False])
def test_replay_ratio_bookkeeping(vectorized):
    cfg = tiny_config(use_vectorization=vectorized, total_frames=1600 if vectorized else 800, eval_interval=400,
                      min_replay_size=300, analysis_on_eval=False)
    seen = []

    def check(rec, state):
        per_step = cfg.effective_num_envs * cfg.train_every
        seen.append(state.grad_step_count)
        assert state.grad_step_count * per_step + state.warmup_frames == state.frame_count

    res = run_training(cfg, on_eval=check)
    assert len(seen) >= 2 and seen[-1] > 0
    assert res.state.transitions <= res.state.frame_count


def test_full_run_is_deterministic(tmp_path):
    cfg = tiny_config(total_frames=1200, eval_interval=600, min_replay_size=300)
    run_training(cfg, tmp_path / "a")
    run_training(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.count(b"\n") == 3


def test_resume_continues_counters(tmp_path):
    cfg = tiny_config(total_frames=1200, eval_interval=600, min_replay_size=300)
    first = run_training(cfg, tmp_path)
    ckpt = tmp_path / "ckpt_1200.bin"
    assert ckpt.exists()
    longer = cfg.replace(total_frames=2400)
    with pytest.raises(ValueError):
        run_training(cfg.replace(learning_rate=3e-4), tmp_path / "other", resume_from=ckpt)
    second = run_training(cfg.replace(total_frames=1200), tmp_path, resume_from=ckpt)
    assert second.state.frame_count == 1200 and second.state.grad_step_count == first.state.grad_step_count
    res = run_training(longer, tmp_path / "longer", resume_from=ckpt)
    assert res.state.resumed_from == 1200
    assert res.state.frame_count == 2400
    # the replay restarts empty, so the warm-up gate delays learning again
    extra = res.state.grad_step_count - first.state.grad_step_count
    steps = 1200 // cfg.num_envs
    assert 0 < extra <= steps - cfg.min_replay_size // cfg.num_envs
    rows = (tmp_path / "longer" / "metrics.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["1800", "2400"]


def test_make_network_follows_ablation_flags():
    cfg = tiny_config(use_iqn=False, use_dueling=False, use_noisy=False, use_spectral_norm=False)
    net = make_network(cfg, 0)
    assert net.embedding is None and net.value is None
    assert net.noisy_layers() == [] and net.sn_layers() == []
