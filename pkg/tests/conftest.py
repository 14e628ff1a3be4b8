"""Session-scoped fixtures shared by the end-to-end quality tests: one
trained keypoint pipeline per dataset variant, reused across criteria to
stay inside the CPU time budget."""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

# Desk-scale training budget (single CPU core). Step caps, not epochs,
# bound the wall time; the embedding architecture is narrowed the same way
# (full-width configs are exercised by the unit tests).
N_TRAIN, N_VAL, N_TEST = 400, 40, 40
VAE_STEPS = 400
VAE_SEED = 1  # seed 0's first-layer filters barely respond to one sprite
LSPN_STEPS = 450
POINTNET_STEPS = 1500
POINTNET_LR = 1e-3
POINTNET_BATCH = 8
POINTNET_SEED = 0
TRANSPORTER_STEPS = 1200
DESK_FILTERS = (16, 32, 32, 64)
DESK_LATENT = 64
DESK_BATCH = 16
LAYERS = (0, 1)
K = 6
SIGMA = 0.1


def _collect_with_scenes(distractor: bool, env_seed: int, policy_seed: int,
                         n: int, episode_len: int = 10):
    """Frames plus ground-truth scenes across several short episodes, so the
    evaluation set samples diverse sprite placements."""
    from permakey.sprites import SpritesConfig, SpritesEnv

    env = SpritesEnv(SpritesConfig(distractor=distractor, n_enemies=2),
                     seed=env_seed)
    rng = np.random.default_rng(policy_seed)
    frames, scenes = [], []
    obs = env.reset()
    for i in range(n):
        if i and i % episode_len == 0:
            obs = env.reset()
        frames.append(np.asarray(obs, dtype=np.float32))
        scenes.append(env.ground_truth())
        obs, _r, done = env.step(int(rng.integers(env.n_actions)))[:3]
        if done:
            obs = env.reset()
    return np.stack(frames), scenes


def _make_dataset(distractor: bool):
    from permakey.pipeline import _clip_episodes, collect_episode_stream
    from permakey.sprites import SpritesConfig, SpritesEnv

    env = SpritesEnv(SpritesConfig(distractor=distractor, n_enemies=2,
                                   max_steps=60), seed=0)
    frames, episodes = collect_episode_stream(
        env, N_TRAIN + N_VAL, np.random.default_rng(0))
    test, scenes = _collect_with_scenes(distractor, env_seed=2,
                                        policy_seed=1, n=N_TEST)
    return {
        "train": frames[:N_TRAIN],
        "val": frames[N_TRAIN:],
        "episodes": _clip_episodes(episodes, 0, N_TRAIN),
        "test": test,
        "scenes": scenes,
    }


@pytest.fixture(scope="session")
def sprites_data():
    return _make_dataset(distractor=False)


@pytest.fixture(scope="session")
def sprites_distractor_data():
    return _make_dataset(distractor=True)


def _train_permakey(data, seed=VAE_SEED):
    """VAE -> per-layer prediction nets -> keypoint network, K=6."""
    import time

    t0 = time.time()
    from permakey.lspn import (
        LSPN,
        LSPNTrainConfig,
        compute_feature_stacks,
        fused_error_maps,
        train_lspn,
    )
    from permakey.pointnet import (
        KeypointPointNet,
        PointNetConfig,
        train_pointnet,
    )
    from permakey.vae import SpatialVAE, VAEConfig, train_vae

    torch.manual_seed(seed)
    vae = SpatialVAE(VAEConfig(filters=DESK_FILTERS, latent_dim=DESK_LATENT,
                               batch_size=DESK_BATCH))
    train_vae(vae, data["train"], data["val"], max_steps=VAE_STEPS,
              seed=seed)
    tr_feats = compute_feature_stacks(vae, data["train"], LAYERS)
    va_feats = compute_feature_stacks(vae, data["val"], LAYERS)
    nets = []
    for i, (tr, va) in enumerate(zip(tr_feats, va_feats)):
        torch.manual_seed(seed + i)
        net = LSPN(tr.shape[1], p=2)
        train_lspn(net, tr, va, LSPNTrainConfig(), max_steps=LSPN_STEPS,
                   seed=seed + i)
        nets.append(net)

    def maps_for(frames, batch=64):
        out = []
        for i in range(0, len(frames), batch):
            feats = compute_feature_stacks(vae, frames[i:i + batch], LAYERS)
            with torch.no_grad():
                out.append(fused_error_maps(feats, nets))
        return torch.cat(out)

    tr_maps = maps_for(data["train"])
    va_maps = maps_for(data["val"])
    torch.manual_seed(POINTNET_SEED)
    pointnet = KeypointPointNet(
        PointNetConfig(k=K, in_channels=len(LAYERS), filters=DESK_FILTERS,
                       batch_size=POINTNET_BATCH, lr=POINTNET_LR,
                       patience=30, epochs=400))
    train_pointnet(pointnet, tr_maps, va_maps, max_steps=POINTNET_STEPS,
                   seed=POINTNET_SEED)
    pointnet.eval()

    def keypoints(frames):
        maps = maps_for(frames)
        with torch.no_grad():
            _r, centers, _m = pointnet(maps)
        return centers.numpy()

    return {
        "vae": vae, "lspns": nets, "pointnet": pointnet,
        "maps_for": maps_for, "keypoints": keypoints,
        "train_maps": tr_maps, "val_maps": va_maps,
        "train_seconds": time.time() - t0,
    }


@pytest.fixture(scope="session")
def permakey_pipeline(sprites_data):
    return _train_permakey(sprites_data)


@pytest.fixture(scope="session")
def permakey_distractor_pipeline(sprites_distractor_data):
    return _train_permakey(sprites_distractor_data)


@pytest.fixture(scope="session")
def transporter_distractor(sprites_distractor_data):
    from permakey.transporter import (
        Transporter,
        TransporterConfig,
        train_transporter,
    )

    data = sprites_distractor_data
    n_val = len(data["val"])
    torch.manual_seed(0)
    model = Transporter(TransporterConfig(k=K, sigma=SIGMA))
    train_transporter(model, data["train"], data["episodes"], data["val"],
                      [[0, n_val]], max_steps=TRANSPORTER_STEPS, seed=0)
    model.eval()
    return model
