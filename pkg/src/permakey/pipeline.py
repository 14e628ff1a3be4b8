"""Experiment orchestration: sequences collect -> train-vae -> train-lspn ->
train-pointnet (or train-transporter) -> train-agent -> evaluate into a run
directory, with content-hash stage caching and a resumable manifest."""

import csv
import hashlib
import json
import os
from dataclasses import asdict

import numpy as np
import torch

from . import agent as rl
from .config import ExperimentConfig
from .data import FrameDataset, load_split, random_policy, save_split
from .encoders import CNNKeypointEncoder, GNNKeypointEncoder
from .lspn import (
    LSPN,
    LSPNTrainConfig,
    compute_feature_stacks,
    fused_error_maps,
    load_lspns,
    save_lspns,
    train_lspn,
)
from .metrics import CoverageReport, distractor_capture_rate, keypoint_coverage
from .pointnet import (
    KeypointPointNet,
    gaussian_maps,
    PointNetConfig,
    keypoint_features,
    load_pointnet,
    save_pointnet,
    superpose_masked_features,
    train_pointnet,
)
from .sprites import SpritesConfig, SpritesEnv
from .transporter import (
    Transporter,
    TransporterConfig,
    load_transporter,
    save_transporter,
    train_transporter,
)
from .vae import (
    SpatialVAE,
    VAEConfig,
    frames_to_tensor,
    load_vae,
    save_vae,
    train_vae,
)

MANIFEST = "manifest.json"
FAILURE_MARKER = "FAILED"


class StageFailure(RuntimeError):
    """A pipeline stage raised; the run directory holds a resumable marker."""


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _hash_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_subset_hash(cfg: ExperimentConfig, keys) -> str:
    subset = {k: getattr(cfg, k) for k in sorted(keys)}
    return _sha256_bytes(json.dumps(subset, default=list).encode())


def _load_manifest(run_dir: str) -> dict:
    path = os.path.join(run_dir, MANIFEST)
    if os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)
    return {"stages": {}}


def _save_manifest(run_dir: str, manifest: dict):
    with open(os.path.join(run_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def make_env(cfg: ExperimentConfig, seed: int) -> SpritesEnv:
    if cfg.env != "sprites":
        raise ValueError(f"unknown env {cfg.env!r}")
    sprites_cfg = SpritesConfig(distractor=cfg.distractor,
                                n_enemies=cfg.n_enemies,
                                max_steps=cfg.episode_len)
    return SpritesEnv(sprites_cfg, seed=seed)


def collect_episode_stream(env, n_frames: int, rng: np.random.Generator):
    """Random-policy rollout tracking episode boundaries.

    Returns (frames (N,84,84,3) float32, episodes list of [start, end))."""
    policy = random_policy(rng, env.n_actions)
    frames, episodes = [], []
    start = 0
    obs = env.reset()
    while len(frames) < n_frames:
        frames.append(np.asarray(obs, dtype=np.float32))
        if len(frames) == n_frames:
            break
        obs, _r, done = env.step(policy(obs))[:3]
        if done:
            episodes.append([start, len(frames)])
            start = len(frames)
            obs = env.reset()
    if start < len(frames):
        episodes.append([start, len(frames)])
    return np.stack(frames), episodes


def _clip_episodes(episodes, lo, hi):
    """Episode ranges intersected with [lo, hi), re-based to start at 0."""
    out = []
    for a, b in episodes:
        a2, b2 = max(a, lo), min(b, hi)
        if b2 - a2 >= 2:  # a usable episode needs at least one transition
            out.append([a2 - lo, b2 - lo])
    return out


# ---------------------------------------------------------------------------
# Stage bodies. Each takes (cfg, run_dir) and returns a metrics dict.


def _stage_collect(cfg: ExperimentConfig, run_dir: str) -> dict:
    env = make_env(cfg, cfg.train_env_seed)
    rng = np.random.default_rng(cfg.data_seed)
    total = cfg.n_train + cfg.n_val + cfg.n_test
    frames, episodes = collect_episode_stream(env, total, rng)
    bounds = {
        "train": (0, cfg.n_train),
        "val": (cfg.n_train, cfg.n_train + cfg.n_val),
        "test": (cfg.n_train + cfg.n_val, total),
    }
    data_dir = os.path.join(run_dir, "data")
    ep_index = {}
    for split, (lo, hi) in bounds.items():
        save_split(FrameDataset(frames[lo:hi], split=split), data_dir)
        ep_index[split] = _clip_episodes(episodes, lo, hi)
    with open(os.path.join(data_dir, "episodes.json"), "w") as fh:
        json.dump(ep_index, fh)

    # Ground-truth scenes for the test split, used by the metrics stage.
    env = make_env(cfg, cfg.train_env_seed)
    rng = np.random.default_rng(cfg.data_seed)
    policy = random_policy(rng, env.n_actions)
    obs = env.reset()
    inst, bar = [], []
    for i in range(total):
        if i >= bounds["test"][0]:
            scene = env.ground_truth()
            inst.append(np.stack(scene.instance_masks))
            bar.append(scene.distractor_mask)
        if i + 1 == total:
            break
        obs, _r, done = env.step(policy(obs))[:3]
        if done:
            obs = env.reset()
    np.savez_compressed(os.path.join(data_dir, "test_scenes.npz"),
                        instance_masks=np.stack(inst),
                        distractor_masks=np.stack(bar))
    return {"frames": total, "episodes": sum(len(v) for v in ep_index.values())}


def _vae_config(cfg: ExperimentConfig) -> VAEConfig:
    return VAEConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs,
                     patience=cfg.patience)


def _stage_train_vae(cfg: ExperimentConfig, run_dir: str) -> dict:
    data_dir = os.path.join(run_dir, "data")
    train = load_split(data_dir, "train").frames
    val = load_split(data_dir, "val").frames
    model = SpatialVAE(_vae_config(cfg))
    hist = train_vae(model, train, val, max_steps=cfg.vae_max_steps or None,
                     seed=cfg.model_seed)
    save_vae(model, os.path.join(run_dir, "vae.pt"))
    return {"val_loss": hist["val"][-1] if hist["val"] else None}


def _stage_train_lspn(cfg: ExperimentConfig, run_dir: str) -> dict:
    data_dir = os.path.join(run_dir, "data")
    vae = load_vae(os.path.join(run_dir, "vae.pt"))
    train = load_split(data_dir, "train").frames
    val = load_split(data_dir, "val").frames
    tr_feats = compute_feature_stacks(vae, train, cfg.layers)
    va_feats = compute_feature_stacks(vae, val, cfg.layers)
    lcfg = LSPNTrainConfig(p=cfg.p, layers=cfg.layers, lr=cfg.lr,
                           batch_size=cfg.batch_size, epochs=cfg.epochs,
                           patience=cfg.patience)
    nets, losses = [], []
    for layer_i, (tr, va) in enumerate(zip(tr_feats, va_feats)):
        net = LSPN(tr.shape[1], p=cfg.p)
        hist = train_lspn(net, tr, va, lcfg, max_steps=cfg.lspn_steps,
                          seed=cfg.model_seed + layer_i)
        nets.append(net)
        losses.append(hist["val"][-1] if hist["val"] else None)
    save_lspns(nets, cfg.layers, cfg.p, os.path.join(run_dir, "lspns.pt"))
    return {"val_loss_per_layer": losses}


def _fused_maps_for(run_dir: str, cfg: ExperimentConfig, frames,
                    batch_size: int = 64) -> torch.Tensor:
    vae = load_vae(os.path.join(run_dir, "vae.pt"))
    nets, layers, _p = load_lspns(os.path.join(run_dir, "lspns.pt"))
    out = []
    for i in range(0, len(frames), batch_size):
        feats = compute_feature_stacks(vae, frames[i:i + batch_size], layers)
        with torch.no_grad():
            out.append(fused_error_maps(feats, nets))
    return torch.cat(out)


def _pointnet_config(cfg: ExperimentConfig) -> PointNetConfig:
    return PointNetConfig(k=cfg.k, in_channels=len(cfg.layers),
                          sigma=cfg.sigma, lr=cfg.lr,
                          batch_size=cfg.batch_size, epochs=cfg.epochs,
                          patience=cfg.patience)


def _stage_train_pointnet(cfg: ExperimentConfig, run_dir: str) -> dict:
    data_dir = os.path.join(run_dir, "data")
    train = load_split(data_dir, "train").frames
    val = load_split(data_dir, "val").frames
    tr_maps = _fused_maps_for(run_dir, cfg, train)
    va_maps = _fused_maps_for(run_dir, cfg, val)
    model = KeypointPointNet(_pointnet_config(cfg))
    hist = train_pointnet(model, tr_maps, va_maps,
                          max_steps=cfg.pointnet_steps, seed=cfg.model_seed)
    save_pointnet(model, os.path.join(run_dir, "pointnet.pt"))
    return {"val_loss": hist["val"][-1] if hist["val"] else None}


def _stage_train_transporter(cfg: ExperimentConfig, run_dir: str) -> dict:
    data_dir = os.path.join(run_dir, "data")
    train = load_split(data_dir, "train").frames
    val = load_split(data_dir, "val").frames
    with open(os.path.join(data_dir, "episodes.json")) as fh:
        eps = json.load(fh)
    tcfg = TransporterConfig(k=cfg.k, sigma=cfg.sigma, lr=cfg.lr,
                             epochs=cfg.epochs, patience=cfg.patience)
    model = Transporter(tcfg)
    hist = train_transporter(model, train, eps["train"], val, eps["val"],
                             max_steps=cfg.transporter_steps,
                             seed=cfg.model_seed)
    save_transporter(model, os.path.join(run_dir, "transporter.pt"))
    return {"val_loss": hist["val"][-1] if hist["val"] else None}


# ---------------------------------------------------------------------------
# Frame embedding used by the agent: frozen keypoint module + keypoint
# encoder with seeded weights (the encoder is treated as a fixed random
# projection at this scale; the Q-network learns on top of it).


class FrameEmbedder:
    def __init__(self, cfg: ExperimentConfig, run_dir: str):
        self.cfg = cfg
        if cfg.method == "permakey":
            self.vae = load_vae(os.path.join(run_dir, "vae.pt"))
            self.lspns, self.layers, _ = load_lspns(
                os.path.join(run_dir, "lspns.pt"))
            self.pointnet = load_pointnet(os.path.join(run_dir, "pointnet.pt"))
            self.pointnet.eval()
            feat_dim, hw = 128, 21  # deepest encoder layer
        else:
            self.transporter = load_transporter(
                os.path.join(run_dir, "transporter.pt"))
            self.transporter.eval()
            feat_dim, hw = self.transporter.config.filters[-1], 42
        torch.manual_seed(cfg.model_seed)
        if cfg.encoder == "cnn":
            self.encoder = CNNKeypointEncoder(in_channels=feat_dim, in_hw=hw)
        else:
            self.encoder = GNNKeypointEncoder(cfg.k, feat_dim)
        self.encoder.eval()

    def _keypoints_and_features(self, x):
        """x: (1, 3, 84, 84) -> (features, masks at feature res, centers)."""
        if self.cfg.method == "permakey":
            feats, _, _ = self.vae.encode(x)
            maps = fused_error_maps([feats[l] for l in self.layers],
                                    self.lspns)
            _recon, centers, masks = self.pointnet(maps)
            return feats[3], masks, centers
        phi = self.transporter.features(x)
        centers = self.transporter.keypoints(x)
        masks = gaussian_maps(centers, self.cfg.sigma, phi.shape[-2:])
        return phi, masks, centers

    def __call__(self, frame) -> np.ndarray:
        x = frames_to_tensor(np.asarray(frame, dtype=np.float32)[None])
        with torch.no_grad():
            feats, masks, centers = self._keypoints_and_features(x)
            if self.cfg.encoder == "cnn":
                state = self.encoder(superpose_masked_features(feats, masks))
            else:
                state = self.encoder(keypoint_features(feats, masks), centers)
        return state[0].numpy()

    def keypoints(self, frames) -> np.ndarray:
        """Batch keypoint centers for (N, 84, 84, 3) frames: (N, K, 2)."""
        x = frames_to_tensor(np.asarray(frames, dtype=np.float32))
        out = []
        with torch.no_grad():
            for i in range(0, len(x), 64):
                _f, _m, centers = self._keypoints_and_features(x[i:i + 64])
                out.append(centers)
        return torch.cat(out).numpy()


def _agent_config(cfg: ExperimentConfig) -> rl.AgentConfig:
    steps = cfg.agent_steps
    return rl.AgentConfig(
        total_steps=steps, gamma=cfg.gamma, eps_anneal_steps=steps,
        learn_start=min(200, max(steps // 4, 1)),
        val_every=max(steps // 4, 1), val_episodes=3,
        max_episode_steps=cfg.episode_len)


def _stage_train_agent(cfg: ExperimentConfig, run_dir: str) -> dict:
    embed = FrameEmbedder(cfg, run_dir)
    env = make_env(cfg, cfg.train_env_seed)
    val_env = make_env(cfg, cfg.val_env_seed)
    result = rl.train(env, embed, env.n_actions, _agent_config(cfg),
                      val_env=val_env, seed=cfg.model_seed)
    ckpts = [{"step": c.step, "score": c.score, "state_dict": c.state_dict}
             for c in result.checkpoints[:3]]
    torch.save(ckpts, os.path.join(run_dir, "policies.pt"))
    return {"checkpoints": [{"step": c["step"], "score": c["score"]}
                            for c in ckpts]}


def _stage_evaluate(cfg: ExperimentConfig, run_dir: str) -> dict:
    data_dir = os.path.join(run_dir, "data")
    embed = FrameEmbedder(cfg, run_dir)

    # Keypoint quality on the held-out test frames.
    test = load_split(data_dir, "test").frames
    scenes = np.load(os.path.join(data_dir, "test_scenes.npz"))
    centers = embed.keypoints(test)
    cover, capture = [], []
    for i in range(len(test)):
        masks = [m for m in scenes["instance_masks"][i]]
        cover.append(keypoint_coverage(centers[i], cfg.sigma, masks))
        capture.append(distractor_capture_rate(
            centers[i], cfg.sigma, scenes["distractor_masks"][i]))
    coverage = CoverageReport.from_values(cover)

    # Policy scores on held-out environment seeds.
    ckpts = torch.load(os.path.join(run_dir, "policies.pt"),
                       weights_only=False)
    policies = [c["state_dict"] for c in ckpts]
    env = make_env(cfg, cfg.train_env_seed)
    eval_report = rl.evaluate(
        policies, lambda s: make_env(cfg, s), list(cfg.test_env_seeds),
        embed, env.n_actions, _agent_config(cfg), episodes_per_seed=3,
        train_seeds=(cfg.train_env_seed, cfg.val_env_seed))
    scores = np.asarray(eval_report.pop("table"))
    summary = eval_report

    with open(os.path.join(run_dir, "scores.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "seed", "episode", "score"])
        for p in range(scores.shape[0]):
            for s in range(scores.shape[1]):
                for e in range(scores.shape[2]):
                    writer.writerow([p, cfg.test_env_seeds[s], e,
                                     scores[p, s, e]])
    report = {
        "coverage_mean": coverage.mean,
        "coverage_std": coverage.std,
        "capture_rate_mean": float(np.mean(capture)),
        "score_summary": summary,
        "keypoints_sha256": _sha256_bytes(
            np.ascontiguousarray(centers).tobytes()),
    }
    with open(os.path.join(run_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    return report


# ---------------------------------------------------------------------------
# Stage graph. config_keys determine when a cached stage is stale; inputs
# are artifact paths relative to the run directory.

_COMMON_TRAIN_KEYS = ("lr", "batch_size", "epochs", "patience", "model_seed")

_STAGES = [
    ("collect",
     ("env", "distractor", "n_enemies", "n_train", "n_val", "n_test",
      "data_seed", "train_env_seed", "episode_len"),
     (), ("data/train/meta.json", "data/episodes.json", "data/test_scenes.npz"),
     _stage_collect, None),
    ("train-vae",
     _COMMON_TRAIN_KEYS + ("vae_max_steps",),
     ("data/train/meta.json",), ("vae.pt",), _stage_train_vae, "permakey"),
    ("train-lspn",
     _COMMON_TRAIN_KEYS + ("layers", "p", "lspn_steps"),
     ("data/train/meta.json", "vae.pt"), ("lspns.pt",), _stage_train_lspn,
     "permakey"),
    ("train-pointnet",
     _COMMON_TRAIN_KEYS + ("k", "sigma", "layers", "pointnet_steps"),
     ("data/train/meta.json", "vae.pt", "lspns.pt"), ("pointnet.pt",),
     _stage_train_pointnet, "permakey"),
    ("train-transporter",
     _COMMON_TRAIN_KEYS + ("k", "sigma", "transporter_steps"),
     ("data/train/meta.json", "data/episodes.json"), ("transporter.pt",),
     _stage_train_transporter, "transporter"),
    ("train-agent",
     ("encoder", "agent_steps", "gamma", "episode_len", "model_seed",
      "train_env_seed", "val_env_seed", "k", "sigma"),
     (), ("policies.pt",), _stage_train_agent, None),
    ("evaluate",
     ("test_env_seeds", "k", "sigma", "encoder"),
     ("policies.pt", "data/test_scenes.npz"),
     ("report.json", "scores.csv"), _stage_evaluate, None),
]

# train-agent and evaluate consume whichever keypoint artifact the method
# produces; resolved at run time.
_METHOD_ARTIFACTS = {
    "permakey": ("vae.pt", "lspns.pt", "pointnet.pt"),
    "transporter": ("transporter.pt",),
}


def _stage_inputs(name, declared, cfg):
    if name in ("train-agent", "evaluate"):
        return tuple(declared) + _METHOD_ARTIFACTS[cfg.method]
    return declared


def _stage_key(cfg, run_dir, keys, inputs):
    parts = [_config_subset_hash(cfg, keys)]
    for rel in inputs:
        parts.append(_hash_file(os.path.join(run_dir, rel)))
    return _sha256_bytes("|".join(parts).encode())


def run_pipeline(cfg: ExperimentConfig, run_dir: str) -> dict:
    """Execute all stages for the config, skipping stages whose config
    subset and input artifacts are unchanged since the recorded run.

    Returns the manifest. A stage exception writes a FAILED marker naming
    the stage; rerunning resumes from it (completed stages stay cached)."""
    os.makedirs(run_dir, exist_ok=True)
    manifest = _load_manifest(run_dir)
    manifest["config"] = asdict(cfg)
    marker = os.path.join(run_dir, FAILURE_MARKER)

    for name, keys, declared_in, outputs, fn, method in _STAGES:
        if method is not None and method != cfg.method:
            continue
        inputs = _stage_inputs(name, declared_in, cfg)
        key = _stage_key(cfg, run_dir, keys, inputs)
        cached = manifest["stages"].get(name)
        outputs_exist = all(
            os.path.exists(os.path.join(run_dir, rel)) for rel in outputs)
        if cached and cached["key"] == key and outputs_exist:
            cached["cache_hit"] = True
            _save_manifest(run_dir, manifest)
            continue
        try:
            metrics = fn(cfg, run_dir)
        except Exception as exc:
            with open(marker, "w") as fh:
                fh.write(f"{name}: {exc}\n")
            _save_manifest(run_dir, manifest)
            raise StageFailure(f"stage {name!r} failed: {exc}") from exc
        manifest["stages"][name] = {
            "key": key, "cache_hit": False, "metrics": metrics,
            "outputs": {rel: _hash_file(os.path.join(run_dir, rel))
                        for rel in outputs},
        }
        _save_manifest(run_dir, manifest)
    if os.path.exists(marker):
        os.remove(marker)
    _save_manifest(run_dir, manifest)
    return manifest


def run_sweep(cfg: ExperimentConfig, run_dir: str, vary_key: str,
              values) -> dict:
    """One pipeline run per value of a single swept config field, in
    subdirectories named <key>=<value>."""
    results = {}
    for value in values:
        sub_cfg = ExperimentConfig(**{**asdict(cfg), vary_key: value})
        shown = ",".join(map(str, value)) if isinstance(value, tuple) else value
        label = f"{vary_key}={shown}"
        results[label] = run_pipeline(sub_cfg, os.path.join(run_dir, label))
    return results
