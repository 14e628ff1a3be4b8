import numpy as np
import pytest
import torch

from _corridor import CorridorEnv, one_hot_embed
from _reference import n_step_targets_np
from permakey.agent import (
    AgentConfig,
    PolicyCheckpoint,
    ProtocolError,
    QNetwork,
    ReplayBuffer,
    epsilon,
    evaluate,
    greedy_rollout,
    n_step_double_q_target,
    polyak_update,
    summarize_scores,
    train,
)


def test_epsilon_schedule_endpoints():
    assert epsilon(0) == 1.0
    assert epsilon(100_000) == pytest.approx(0.1)
    assert epsilon(50_000) == pytest.approx(0.55)
    assert epsilon(300_000) == pytest.approx(0.1)


def test_epsilon_negative_step():
    with pytest.raises(ValueError):
        epsilon(-1)


def test_qnetwork_output_shape():
    net = QNetwork(6, 4, lstm_units=16)
    q, hidden = net(torch.rand(3, 8, 6))
    assert q.shape == (3, 8, 4)
    assert hidden[0].shape == (1, 3, 16)


def test_qnetwork_zero_weights_zero_q():
    net = QNetwork(6, 4, lstm_units=8)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    q, _ = net(torch.rand(1, 8, 6))
    assert torch.all(q == 0.0)


def test_qnetwork_deterministic():
    net = QNetwork(6, 4, lstm_units=8)
    net.eval()
    x = torch.rand(1, 8, 6)
    a, _ = net(x)
    b, _ = net(x)
    assert torch.equal(a, b)


def test_qnetwork_shape_error():
    net = QNetwork(6, 4, lstm_units=8)
    with pytest.raises(ValueError):
        net(torch.rand(1, 8, 5))


def test_polyak_fixed_point():
    a, b = QNetwork(3, 2, 4), QNetwork(3, 2, 4)
    b.load_state_dict(a.state_dict())
    polyak_update(a, b, tau=0.005)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.allclose(pa, pb)


def test_polyak_closed_form():
    a, b = QNetwork(3, 2, 4), QNetwork(3, 2, 4)
    with torch.no_grad():
        for p in a.parameters():
            p.fill_(1.0)
        for p in b.parameters():
            p.zero_()
    polyak_update(a, b, tau=0.005)
    for p in b.parameters():
        assert torch.allclose(p, torch.full_like(p, 0.005))


def test_polyak_geometric_convergence():
    a, b = QNetwork(3, 2, 4), QNetwork(3, 2, 4)
    with torch.no_grad():
        for p in a.parameters():
            p.fill_(1.0)
        for p in b.parameters():
            p.zero_()
    n = 50
    for _ in range(n):
        polyak_update(a, b, tau=0.005)
    residual = 1.0 - next(iter(b.parameters()))[0].flatten()[0].item()
    assert residual == pytest.approx((1 - 0.005) ** n, rel=1e-5)


def _window(rewards, dones, q_online, q_target):
    return (
        torch.tensor([rewards], dtype=torch.float32),
        torch.tensor([dones], dtype=torch.float32),
        torch.tensor([q_online], dtype=torch.float32),
        torch.tensor([q_target], dtype=torch.float32),
    )


def test_nstep_terminal_closed_form():
    t_len = 8
    rewards = [1.0, 1.0, 1.0] + [0.0] * 5
    dones = [0, 0, 1] + [0] * 5
    q = [[0.0, 0.0]] * t_len
    r, d, qo, qt = _window(rewards, dones, q, q)
    targets, valid = n_step_double_q_target(r, d, qo, qt, gamma=0.5, n=3)
    assert valid[0, 0]
    assert targets[0, 0].item() == pytest.approx(1.75)


def test_nstep_pure_bootstrap():
    t_len = 8
    rewards = [0.0] * t_len
    dones = [0] * t_len
    q_online = [[1.0, 0.0]] * t_len  # argmax action 0
    q_target = [[4.0, -9.0]] * t_len
    r, d, qo, qt = _window(rewards, dones, q_online, q_target)
    targets, valid = n_step_double_q_target(r, d, qo, qt, gamma=0.5, n=3)
    assert valid[0, 0]
    assert targets[0, 0].item() == pytest.approx(0.125 * 4.0)


def test_nstep_uses_online_argmax_on_target_values():
    t_len = 4
    rewards = [0.0] * t_len
    dones = [0] * t_len
    # online prefers action 1; target's best value is at action 0
    q_online = [[0.0, 5.0]] * t_len
    q_target = [[10.0, 2.0]] * t_len
    r, d, qo, qt = _window(rewards, dones, q_online, q_target)
    targets, valid = n_step_double_q_target(r, d, qo, qt, gamma=0.5, n=3)
    assert valid[0, 0]
    assert targets[0, 0].item() == pytest.approx(0.125 * 2.0)  # not 10


def test_nstep_n1_reduces_to_double_q():
    rng = np.random.default_rng(0)
    rewards = rng.normal(size=(2, 8)).astype(np.float32)
    dones = np.zeros((2, 8), dtype=np.float32)
    qo = rng.normal(size=(2, 8, 3)).astype(np.float32)
    qt = rng.normal(size=(2, 8, 3)).astype(np.float32)
    targets, valid = n_step_double_q_target(
        torch.tensor(rewards), torch.tensor(dones), torch.tensor(qo),
        torch.tensor(qt), gamma=0.9, n=1)
    for b in range(2):
        for t in range(7):
            a_star = qo[b, t + 1].argmax()
            want = rewards[b, t] + 0.9 * qt[b, t + 1, a_star]
            assert valid[b, t]
            assert targets[b, t].item() == pytest.approx(want, rel=1e-5)
        assert not valid[b, 7]


def test_nstep_matches_reference_fuzz():
    rng = np.random.default_rng(1)
    for _ in range(30):
        t_len = int(rng.integers(4, 10))
        n = int(rng.integers(1, 4))
        gamma = float(rng.uniform(0.5, 1.0))
        rewards = rng.normal(size=t_len)
        dones = (rng.random(t_len) < 0.2).astype(float)
        qo = rng.normal(size=(t_len, 3))
        qt = rng.normal(size=(t_len, 3))
        targets, valid = n_step_double_q_target(
            torch.tensor(rewards[None], dtype=torch.float64),
            torch.tensor(dones[None], dtype=torch.float64),
            torch.tensor(qo[None], dtype=torch.float64),
            torch.tensor(qt[None], dtype=torch.float64), gamma, n)
        ref_t, ref_v = n_step_targets_np(rewards, dones.astype(bool), qo, qt,
                                         gamma, n)
        assert np.array_equal(valid[0].numpy(), ref_v)
        assert np.allclose(targets[0].numpy()[ref_v], ref_t[ref_v], atol=1e-9)


def test_replay_windows_never_cross_episodes():
    rng = np.random.default_rng(2)
    buf = ReplayBuffer(capacity=1000, window=8)
    for ep_len in [3, 12, 8, 20, 5]:
        for i in range(ep_len):
            buf.add(np.array([float(i)]), 0, 0.0, i == ep_len - 1)
    for _ in range(50):
        batch = buf.sample(16, rng)
        for b in range(16):
            real = batch["real"][b].numpy()
            dones = batch["dones"][b].numpy()
            n_real = int(real.sum())
            assert n_real >= 1
            assert np.all(real[:n_real]) and not np.any(real[n_real:])
            # a done may only appear at the last real step
            assert not np.any(dones[: n_real - 1] > 0)
            # consecutive embeddings really are consecutive
            emb = batch["emb"][b, :n_real, 0].numpy()
            assert np.all(np.diff(emb) == 1.0)


def test_replay_capacity_eviction():
    buf = ReplayBuffer(capacity=10, window=4)
    for ep in range(5):
        for i in range(4):
            buf.add(np.zeros(1), 0, 0.0, i == 3)
    assert buf.n_sampleable <= 10 + 4


def test_greedy_rollout_deterministic():
    env1 = CorridorEnv(seed=3)
    env2 = CorridorEnv(seed=3)
    net = QNetwork(5, 2, lstm_units=8)
    net.eval()
    a = greedy_rollout(env1, one_hot_embed, net, seed=3)
    b = greedy_rollout(env2, one_hot_embed, net, seed=3)
    assert a == b


def test_train_smoke_checkpoints_and_updates():
    env = CorridorEnv(seed=0)
    val_env = CorridorEnv(seed=1)
    cfg = AgentConfig(total_steps=400, val_every=200, val_episodes=2,
                      learn_start=50, eps_anneal_steps=400, lstm_units=16,
                      max_episode_steps=30)
    result = train(env, one_hot_embed, 2, cfg, val_env=val_env, seed=0)
    assert len(result.checkpoints) == 2
    assert len(result.history["loss"]) > 0
    # checkpoints sorted best first
    scores = [c.score for c in result.checkpoints]
    assert scores == sorted(scores, reverse=True)


def test_summarize_scores_constant():
    table = np.full((3, 10, 10), 5.0)
    rep = summarize_scores(table)
    assert rep["mean"] == 5.0 and rep["std"] == 0.0


def test_summarize_scores_median():
    table = np.zeros((1, 10, 10))
    for s in range(10):
        table[0, s, :] = s + 1  # per-seed means 1..10
    rep = summarize_scores(table)
    assert rep["per_policy_median"][0] == pytest.approx(5.5)


def test_evaluate_seed_overlap_protocol_error():
    cfg = AgentConfig(total_steps=1)
    ckpt = PolicyCheckpoint(QNetwork(5, 2, cfg.lstm_units).state_dict(), 0.0, 0)
    with pytest.raises(ProtocolError):
        evaluate([ckpt], lambda s: CorridorEnv(seed=s), [1, 2, 3],
                 one_hot_embed, 2, cfg, train_seeds=[2])


def test_evaluate_report_shape():
    cfg = AgentConfig(total_steps=1, lstm_units=8, max_episode_steps=30)
    net = QNetwork(5, 2, 8)
    policies = [PolicyCheckpoint(net.state_dict(), 0.0, 0) for _ in range(3)]
    rep = evaluate(policies, lambda s: CorridorEnv(seed=s), [10, 11],
                   one_hot_embed, 2, cfg, episodes_per_seed=2,
                   train_seeds=[0, 1])
    assert len(rep["per_policy_median"]) == 3
    assert np.asarray(rep["table"]).shape == (3, 2, 2)
    assert "mean" in rep and "std" in rep
