"""Transporter baseline: reconstruct a temporally shifted target frame by
transporting features at keypoint locations from source to target.

Feature extractor and keypoint network are independent conv stacks; the
source branch (features and keypoint heatmaps) is gradient-stopped, so
learning is driven through the target branch only.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pointnet import gaussian_maps, heatmaps_to_centers
from .vae import ConvEncoder, frames_to_tensor

TRANSPORTER_KERNELS = (3, 3, 3, 3)
TRANSPORTER_FILTERS = (16, 16, 32, 32)
TRANSPORTER_STRIDES = (1, 1, 2, 1)


@dataclass
class TransporterConfig:
    k: int = 10
    sigma: float = 0.1
    filters: tuple = TRANSPORTER_FILTERS
    kernels: tuple = TRANSPORTER_KERNELS
    strides: tuple = TRANSPORTER_STRIDES
    lr: float = 2e-4
    lr_decay: float = 0.9
    lr_decay_steps: int = 30_000
    batch_size: int = 64
    epochs: int = 100
    patience: int = 5
    max_pair_offset: int = 20  # temporal offset range for frame pairs


class _RefineNet(nn.Module):
    """Transpose of the feature extractor with 2x bilinear upsampling."""

    def __init__(self, filters, kernels, strides, out_channels=3):
        super().__init__()
        rev_filters = list(filters[::-1])
        blocks, ups = [], []
        c_in = filters[-1]
        for i, (k, s) in enumerate(zip(kernels[::-1], strides[::-1])):
            c_out = rev_filters[i + 1] if i + 1 < len(rev_filters) else out_channels
            last = i == len(kernels) - 1
            conv = nn.Conv2d(c_in, c_out, k, stride=1, padding="same")
            blocks.append(conv if last else
                          nn.Sequential(conv, nn.BatchNorm2d(c_out), nn.ReLU()))
            ups.append(s == 2)
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.ups = ups

    def forward(self, h):
        for up, block in zip(self.ups, self.blocks):
            if up:
                h = F.interpolate(h, scale_factor=2, mode="bilinear",
                                  align_corners=False)
            h = block(h)
        return torch.sigmoid(h)


class Transporter(nn.Module):
    def __init__(self, config: TransporterConfig = None):
        super().__init__()
        self.config = config or TransporterConfig()
        cfg = self.config
        self.phi = ConvEncoder(3, cfg.filters, cfg.kernels, cfg.strides)
        self.psi = ConvEncoder(3, cfg.filters, cfg.kernels, cfg.strides)
        self.regressor = nn.Conv2d(cfg.filters[-1], cfg.k, kernel_size=1)
        self.refine = _RefineNet(cfg.filters, cfg.kernels, cfg.strides)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.phi(x)[-1]

    def keypoint_heatmaps(self, x: torch.Tensor) -> torch.Tensor:
        """Gaussian heatmaps of the K keypoints at feature resolution,
        summed over keypoints (the transport gating mask)."""
        hm = self.regressor(self.psi(x)[-1])
        centers = heatmaps_to_centers(hm)
        masks = gaussian_maps(centers, self.config.sigma, hm.shape[-2:])
        return masks.sum(dim=1, keepdim=True), centers

    def keypoints(self, x: torch.Tensor) -> torch.Tensor:
        return self.keypoint_heatmaps(x)[1]


def transport(phi_src, phi_tgt, heat_src, heat_tgt):
    """Feature transport: suppress both keypoint regions in the source
    features, then paste the target features at the target keypoints."""
    if phi_src.shape != phi_tgt.shape:
        raise ValueError("source/target feature shapes differ")
    if heat_src.shape[-2:] != phi_src.shape[-2:]:
        raise ValueError("heatmap grid does not match feature grid")
    return (1.0 - heat_src) * (1.0 - heat_tgt) * phi_src + heat_tgt * phi_tgt


def transporter_reconstruct(model: Transporter, source, target):
    """Gradient-stopped source branch; decode transported features."""
    phi_src = model.features(source).detach()
    phi_tgt = model.features(target)
    heat_src, _ = model.keypoint_heatmaps(source)
    heat_tgt, _ = model.keypoint_heatmaps(target)
    transported = transport(phi_src, phi_tgt, heat_src.detach(), heat_tgt)
    return model.refine(transported)


def transporter_loss(model: Transporter, source, target) -> torch.Tensor:
    recon = transporter_reconstruct(model, source, target)
    loss = F.mse_loss(recon, target)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite Transporter loss")
    return loss


def sample_frame_pairs(episodes, batch_size, max_offset, rng):
    """Draw (source, target) index pairs within single episodes.

    `episodes` is a list of (start, end) index ranges into the frame array.
    """
    pairs = []
    spans = [(s, e) for s, e in episodes if e - s >= 2]
    if not spans:
        raise ValueError("no episode long enough for frame pairs")
    while len(pairs) < batch_size:
        s, e = spans[int(rng.integers(len(spans)))]
        i = int(rng.integers(s, e - 1))
        hi = min(e - 1, i + max_offset)
        j = int(rng.integers(i + 1, hi + 1))
        pairs.append((i, j))
    return pairs


def train_transporter(model: Transporter, frames: np.ndarray, episodes,
                      val_frames: np.ndarray, val_episodes, max_steps=None,
                      seed=0):
    """Frame-pair reconstruction training with early stopping."""
    cfg = model.config
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_steps, cfg.lr_decay)
    rng = np.random.default_rng(seed)
    x = frames_to_tensor(frames)
    x_val = frames_to_tensor(val_frames)
    steps_per_epoch = max(1, len(frames) // cfg.batch_size)
    best, best_state, bad = np.inf, None, 0
    history = {"train": [], "val": []}
    step = 0
    for _epoch in range(cfg.epochs):
        model.train()
        losses = []
        for _ in range(steps_per_epoch):
            pairs = sample_frame_pairs(episodes, cfg.batch_size,
                                       cfg.max_pair_offset, rng)
            src = x[[i for i, _ in pairs]]
            tgt = x[[j for _, j in pairs]]
            loss = transporter_loss(model, src, tgt)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        val = validation_loss(model, x_val, val_episodes, cfg, seed=seed)
        history["train"].append(float(np.mean(losses)))
        history["val"].append(val)
        if val < best - 1e-9:
            best, bad = val, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            bad += 1
            if bad >= cfg.patience:
                break
        if max_steps is not None and step >= max_steps:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


def validation_loss(model, x_val, episodes, cfg, seed=0, n_batches=4):
    model.eval()
    rng = np.random.default_rng(seed + 1)
    total = 0.0
    with torch.no_grad():
        for _ in range(n_batches):
            pairs = sample_frame_pairs(episodes, min(cfg.batch_size, 32),
                                       cfg.max_pair_offset, rng)
            src = x_val[[i for i, _ in pairs]]
            tgt = x_val[[j for _, j in pairs]]
            total += transporter_loss(model, src, tgt).item()
    return total / n_batches


def save_transporter(model: Transporter, path: str):
    torch.save({"config": model.config.__dict__, "state": model.state_dict()}, path)


def load_transporter(path: str) -> Transporter:
    blob = torch.load(path, weights_only=False)
    model = Transporter(TransporterConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model
