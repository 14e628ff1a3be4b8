"""Recurrent Q-learning harness: double-Q with a Polyak-averaged target
network, 3-step returns over windowed replay sequences, an LSTM Q-function,
linearly annealed epsilon-greedy exploration, and the checkpoint /
median-over-seeds evaluation protocol."""

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ProtocolError(RuntimeError):
    """Evaluation seeds overlap with training/validation seeds."""


@dataclass
class AgentConfig:
    lstm_units: int = 128
    batch_size: int = 16
    window: int = 8
    n_step: int = 3
    tau: float = 0.005
    lr: float = 2e-4
    grad_clip_norm: float = 10.0
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_anneal_steps: int = 100_000
    gamma: float = 0.99
    total_steps: int = 100_000
    replay_capacity: int = 100_000
    learn_start: int = 200  # transitions gathered before updates begin
    val_every: int = 5000
    val_episodes: int = 10
    max_episode_steps: int = 10_000

    def __post_init__(self):
        for name in ("lstm_units", "batch_size", "window", "n_step", "tau",
                     "lr", "grad_clip_norm", "gamma", "total_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def epsilon(step: int, cfg: AgentConfig = None) -> float:
    """Linear anneal from eps_start to eps_end over eps_anneal_steps."""
    cfg = cfg or AgentConfig()
    if step < 0:
        raise ValueError("step must be >= 0")
    frac = min(step / cfg.eps_anneal_steps, 1.0)
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


class QNetwork(nn.Module):
    """LSTM over a window of state embeddings, linear head to Q-values."""

    def __init__(self, input_dim: int, n_actions: int, lstm_units: int = 128):
        super().__init__()
        self.lstm = nn.LSTM(input_dim, lstm_units, batch_first=True)
        self.head = nn.Linear(lstm_units, n_actions)
        self.input_dim = input_dim
        self.n_actions = n_actions

    def forward(self, x, hidden=None):
        """x: (B, T, D) -> ((B, T, |A|) Q-values, final hidden state)."""
        if x.dim() != 3 or x.shape[-1] != self.input_dim:
            raise ValueError(f"expected (B, T, {self.input_dim}), got "
                             f"{tuple(x.shape)}")
        out, hidden = self.lstm(x, hidden)
        return self.head(out), hidden


def polyak_update(online: nn.Module, target: nn.Module, tau: float = 0.005):
    """theta_target <- tau * theta_online + (1 - tau) * theta_target."""
    online_params = dict(online.state_dict())
    with torch.no_grad():
        for name, p_t in target.state_dict().items():
            p_o = online_params.get(name)
            if p_o is None or p_o.shape != p_t.shape:
                raise ValueError(f"parameter {name} shape mismatch")
            if p_t.dtype.is_floating_point:
                p_t.mul_(1.0 - tau).add_(p_o, alpha=tau)
            else:
                p_t.copy_(p_o)


def n_step_double_q_target(rewards, dones, q_online, q_target, gamma,
                           n=3, real=None):
    """Per-step n-step double-Q targets over a batch of windows.

    rewards, dones: (B, T); q_online, q_target: (B, T, A) where index t
    holds the Q-values of state s_t. Returns (targets (B, T), valid (B, T)).
    A step is valid when its n-step horizon resolves inside the window,
    either by termination or by a bootstrap state; `real` masks padding.
    Bootstraps with Q_target at the online-argmax action.
    """
    b, t_len = rewards.shape
    if real is None:
        real = torch.ones_like(dones, dtype=torch.bool)
    targets = torch.zeros(b, t_len, dtype=q_target.dtype)
    valid = torch.zeros(b, t_len, dtype=torch.bool)
    a_star = q_online.argmax(dim=-1)
    boot = q_target.gather(-1, a_star.unsqueeze(-1)).squeeze(-1)  # (B, T)
    for t in range(t_len):
        acc = torch.zeros(b, dtype=q_target.dtype)
        running = real[:, t].clone()  # horizon still unresolved
        resolved = torch.zeros(b, dtype=torch.bool)
        for k in range(n):
            if t + k >= t_len:
                running = running & False
                break
            step_ok = running & real[:, t + k]
            acc = acc + torch.where(step_ok, (gamma**k) * rewards[:, t + k],
                                    torch.zeros(b, dtype=q_target.dtype))
            terminated = step_ok & dones[:, t + k].bool()
            resolved = resolved | terminated
            running = step_ok & ~terminated
        if t + n < t_len:
            can_boot = running & real[:, t + n]
            acc = acc + torch.where(
                can_boot, (gamma**n) * boot[:, t + n],
                torch.zeros(b, dtype=q_target.dtype))
            resolved = resolved | can_boot
        targets[:, t] = acc
        valid[:, t] = resolved
    return targets, valid


@dataclass
class _Episode:
    embeddings: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


class ReplayBuffer:
    """Uniform sampling of fixed-length windows that never cross episode
    boundaries; windows shorter than the episode tail are zero-padded and
    masked."""

    def __init__(self, capacity: int, window: int):
        self.capacity = capacity
        self.window = window
        self.episodes = []
        self._size = 0
        self._current = _Episode()

    def add(self, embedding, action, reward, done):
        self._current.embeddings.append(np.asarray(embedding, dtype=np.float32))
        self._current.actions.append(int(action))
        self._current.rewards.append(float(reward))
        self._current.dones.append(bool(done))
        self._size += 1
        if done:
            self.episodes.append(self._current)
            self._current = _Episode()
        while self._size > self.capacity and self.episodes:
            self._size -= len(self.episodes.pop(0))

    @property
    def n_sampleable(self):
        return sum(len(e) for e in self.episodes)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Returns dict of tensors: emb (B,T,D), actions/rewards/dones (B,T),
        real (B,T) marking non-padding steps."""
        if not self.episodes:
            raise ValueError("no completed episodes to sample from")
        t_len = self.window
        lengths = np.array([len(e) for e in self.episodes], dtype=np.float64)
        probs = lengths / lengths.sum()
        dim = self.episodes[0].embeddings[0].shape[0]
        emb = np.zeros((batch_size, t_len, dim), dtype=np.float32)
        actions = np.zeros((batch_size, t_len), dtype=np.int64)
        rewards = np.zeros((batch_size, t_len), dtype=np.float32)
        dones = np.zeros((batch_size, t_len), dtype=np.float32)
        real = np.zeros((batch_size, t_len), dtype=bool)
        for b in range(batch_size):
            ep = self.episodes[int(rng.choice(len(self.episodes), p=probs))]
            start = int(rng.integers(len(ep)))
            span = min(t_len, len(ep) - start)
            sl = slice(start, start + span)
            emb[b, :span] = np.stack(ep.embeddings[sl])
            actions[b, :span] = ep.actions[sl]
            rewards[b, :span] = ep.rewards[sl]
            dones[b, :span] = ep.dones[sl]
            real[b, :span] = True
        return {
            "emb": torch.from_numpy(emb),
            "actions": torch.from_numpy(actions),
            "rewards": torch.from_numpy(rewards),
            "dones": torch.from_numpy(dones),
            "real": torch.from_numpy(real),
        }


@dataclass
class PolicyCheckpoint:
    state_dict: dict
    score: float
    step: int


@dataclass
class TrainResult:
    qnet: QNetwork
    checkpoints: list  # ordered by validation score, best first
    history: dict


def greedy_rollout(env, embed_fn, qnet, max_steps=10_000, seed=None):
    """One exploration-free episode; returns the total reward."""
    obs = env.reset(seed=seed) if seed is not None else env.reset()
    hidden = None
    total = 0.0
    qnet.eval()
    with torch.no_grad():
        for _ in range(max_steps):
            emb = torch.from_numpy(
                np.asarray(embed_fn(obs), dtype=np.float32))[None, None]
            q, hidden = qnet(emb, hidden)
            action = int(q[0, -1].argmax())
            obs, reward, done = env.step(action)[:3]
            total += reward
            if done:
                break
    return total


def train(env, embed_fn, n_actions, cfg: AgentConfig, val_env=None, seed=0,
          log_every=0) -> TrainResult:
    """Run cfg.total_steps environment interactions with one learner update
    per step (after warmup), Polyak target updates every step, and periodic
    greedy validation for checkpointing."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    probe = np.asarray(embed_fn(env.reset()), dtype=np.float32)
    qnet = QNetwork(probe.shape[0], n_actions, cfg.lstm_units)
    target = copy.deepcopy(qnet)
    for p in target.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(qnet.parameters(), lr=cfg.lr)
    buffer = ReplayBuffer(cfg.replay_capacity, cfg.window)
    checkpoints = []
    history = {"loss": [], "val_scores": []}

    obs = env.reset()
    hidden = None
    ep_steps = 0
    for step in range(cfg.total_steps):
        emb = np.asarray(embed_fn(obs), dtype=np.float32)
        if rng.random() < epsilon(step, cfg):
            action = int(rng.integers(n_actions))
            with torch.no_grad():
                _, hidden = qnet(torch.from_numpy(emb)[None, None], hidden)
        else:
            with torch.no_grad():
                q, hidden = qnet(torch.from_numpy(emb)[None, None], hidden)
            action = int(q[0, -1].argmax())
        obs_next, reward, done = env.step(action)[:3]
        ep_steps += 1
        if ep_steps >= cfg.max_episode_steps:
            done = True
        buffer.add(emb, action, reward, done)
        if done:
            obs = env.reset()
            hidden = None
            ep_steps = 0
        else:
            obs = obs_next

        if buffer.n_sampleable >= max(cfg.learn_start, cfg.batch_size):
            batch = buffer.sample(cfg.batch_size, rng)
            q_seq, _ = qnet(batch["emb"])
            with torch.no_grad():
                q_tgt_seq, _ = target(batch["emb"])
            targets, valid = n_step_double_q_target(
                batch["rewards"], batch["dones"], q_seq.detach(), q_tgt_seq,
                cfg.gamma, cfg.n_step, real=batch["real"])
            q_taken = q_seq.gather(-1, batch["actions"].unsqueeze(-1)).squeeze(-1)
            mask = valid & batch["real"]
            loss = F.mse_loss(q_taken[mask], targets[mask])
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(qnet.parameters(), cfg.grad_clip_norm)
            opt.step()
            polyak_update(qnet, target, cfg.tau)
            history["loss"].append(loss.item())

        if val_env is not None and (step + 1) % cfg.val_every == 0:
            scores = [greedy_rollout(val_env, embed_fn, qnet,
                                     cfg.max_episode_steps)
                      for _ in range(cfg.val_episodes)]
            mean_score = float(np.mean(scores))
            history["val_scores"].append((step + 1, mean_score))
            checkpoints.append(PolicyCheckpoint(
                {k: v.detach().clone() for k, v in qnet.state_dict().items()},
                mean_score, step + 1))
            if log_every:
                print(f"step {step + 1}: val score {mean_score:.3f}")
            qnet.train()
    checkpoints.sort(key=lambda c: c.score, reverse=True)
    return TrainResult(qnet, checkpoints, history)


def summarize_scores(score_table: np.ndarray):
    """Table-style report: per policy, the median over seeds of per-seed
    mean episode scores; then mean and std (population) across policies.

    score_table: (n_policies, n_seeds, n_episodes).
    """
    per_seed_means = score_table.mean(axis=2)  # (P, S)
    per_policy_medians = np.median(per_seed_means, axis=1)  # (P,)
    return {
        "per_policy_median": per_policy_medians.tolist(),
        "mean": float(per_policy_medians.mean()),
        "std": float(per_policy_medians.std()),
    }


def evaluate(policies, make_env, test_seeds, embed_fn, n_actions,
             cfg: AgentConfig, episodes_per_seed=10, train_seeds=()):
    """Run each checkpointed policy for `episodes_per_seed` greedy episodes
    on every held-out seed and report mean (std) over policies of the
    per-policy median seed score."""
    overlap = set(test_seeds) & set(train_seeds)
    if overlap:
        raise ProtocolError(f"test seeds overlap train/val seeds: {overlap}")
    table = np.zeros((len(policies), len(test_seeds), episodes_per_seed))
    for p_i, ckpt in enumerate(policies):
        probe_env = make_env(test_seeds[0])
        probe = np.asarray(embed_fn(probe_env.reset()), dtype=np.float32)
        qnet = QNetwork(probe.shape[0], n_actions, cfg.lstm_units)
        state = ckpt.state_dict if isinstance(ckpt, PolicyCheckpoint) else ckpt
        qnet.load_state_dict(state)
        qnet.eval()
        for s_i, s in enumerate(test_seeds):
            env = make_env(s)
            for e_i in range(episodes_per_seed):
                table[p_i, s_i, e_i] = greedy_rollout(
                    env, embed_fn, qnet, cfg.max_episode_steps)
    report = summarize_scores(table)
    report["table"] = table.tolist()
    return report
