"""Convolutional VAE providing the spatial feature embedding.

The encoder's per-layer post-ReLU activations are the feature space in
which the local spatial prediction task is solved; the VAE itself is
trained with the usual reconstruction + KL objective and never receives
gradients from the downstream modules.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

IMAGE_HW = 84

ENCODER_KERNELS = (4, 3, 3, 3)
ENCODER_FILTERS = (32, 64, 64, 128)
ENCODER_STRIDES = (1, 2, 2, 1)


@dataclass
class VAEConfig:
    latent_dim: int = 128
    filters: tuple = ENCODER_FILTERS
    kernels: tuple = ENCODER_KERNELS
    strides: tuple = ENCODER_STRIDES
    in_channels: int = 3
    lr: float = 2e-4
    lr_decay: float = 0.85
    lr_decay_steps: int = 10_000
    batch_size: int = 32
    epochs: int = 100
    patience: int = 10


class ConvEncoder(nn.Module):
    """Conv-BatchNorm-ReLU stack; forward returns every layer's activations."""

    def __init__(self, in_channels=3, filters=ENCODER_FILTERS,
                 kernels=ENCODER_KERNELS, strides=ENCODER_STRIDES):
        super().__init__()
        layers = []
        c_in = in_channels
        for k, f, s in zip(kernels, filters, strides):
            if s == 1:
                conv = nn.Conv2d(c_in, f, k, stride=1, padding="same")
            else:
                conv = nn.Conv2d(c_in, f, k, stride=s, padding=(k - 1) // 2)
            layers.append(nn.Sequential(conv, nn.BatchNorm2d(f), nn.ReLU()))
            c_in = f
        self.blocks = nn.ModuleList(layers)
        self.filters = tuple(filters)

    def forward(self, x):
        feats = []
        h = x
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return feats


class ConvDecoder(nn.Module):
    """Transpose of the encoder, with 2x bilinear upsampling undoing strides."""

    def __init__(self, latent_dim, out_channels=3, filters=ENCODER_FILTERS,
                 kernels=ENCODER_KERNELS, strides=ENCODER_STRIDES, bottom_hw=21):
        super().__init__()
        self.bottom_hw = bottom_hw
        self.bottom_ch = filters[-1]
        self.fc = nn.Linear(latent_dim, self.bottom_ch * bottom_hw * bottom_hw)
        blocks = []
        self.upsample_before = []
        rev_filters = list(filters[::-1])
        rev_kernels = list(kernels[::-1])
        rev_strides = list(strides[::-1])
        c_in = filters[-1]
        for i, (k, s) in enumerate(zip(rev_kernels, rev_strides)):
            c_out = rev_filters[i + 1] if i + 1 < len(rev_filters) else out_channels
            last = i == len(rev_kernels) - 1
            conv = nn.Conv2d(c_in, c_out, k, stride=1, padding="same")
            if last:
                blocks.append(nn.Sequential(conv))
            else:
                blocks.append(nn.Sequential(conv, nn.BatchNorm2d(c_out), nn.ReLU()))
            self.upsample_before.append(s == 2)
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)

    def forward(self, z):
        h = self.fc(z).view(-1, self.bottom_ch, self.bottom_hw, self.bottom_hw)
        for up, block in zip(self.upsample_before, self.blocks):
            if up:
                h = F.interpolate(h, scale_factor=2, mode="bilinear",
                                  align_corners=False)
            h = block(h)
        return torch.sigmoid(h)


class SpatialVAE(nn.Module):
    def __init__(self, config: VAEConfig = None):
        super().__init__()
        self.config = config or VAEConfig()
        cfg = self.config
        self.encoder = ConvEncoder(cfg.in_channels, cfg.filters, cfg.kernels,
                                   cfg.strides)
        stride_prod = int(np.prod(cfg.strides))
        self.bottom_hw = IMAGE_HW // stride_prod
        flat = cfg.filters[-1] * self.bottom_hw * self.bottom_hw
        self.latent_head = nn.Linear(flat, 2 * cfg.latent_dim)
        self.decoder = ConvDecoder(cfg.latent_dim, cfg.in_channels, cfg.filters,
                                   cfg.kernels, cfg.strides, self.bottom_hw)

    def encode(self, x):
        """Returns (per-layer activations, posterior mean, posterior logvar)."""
        if x.dim() != 4 or x.shape[-2:] != (IMAGE_HW, IMAGE_HW):
            raise ValueError(f"expected Bx{self.config.in_channels}x84x84, got "
                             f"{tuple(x.shape)}")
        feats = self.encoder(x)
        stats = self.latent_head(feats[-1].flatten(1))
        mean, logvar = stats.chunk(2, dim=1)
        return feats, mean, logvar

    def decode(self, z):
        if z.dim() != 2 or z.shape[1] != self.config.latent_dim:
            raise ValueError(f"expected latent dim {self.config.latent_dim}, got "
                             f"{tuple(z.shape)}")
        return self.decoder(z)

    def forward(self, x, noise=None):
        feats, mean, logvar = self.encode(x)
        if noise is None:
            noise = torch.randn_like(mean)
        z = mean + torch.exp(0.5 * logvar) * noise
        return self.decode(z), mean, logvar


def kl_diag_gaussian(mean, logvar):
    """KL(N(mean, diag exp(logvar)) || N(0, I)), summed over latent dims."""
    return 0.5 * torch.sum(mean.pow(2) + logvar.exp() - 1.0 - logvar, dim=1)


def elbo_loss(model: SpatialVAE, batch, noise=None):
    """Negative ELBO (to minimize): 0.5 * sum sq. recon error + KL.

    Gaussian likelihood with fixed unit variance, constants dropped; one
    reparameterized latent sample per image.
    """
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    recon, mean, logvar = model(batch, noise=noise)
    if not torch.isfinite(recon).all():
        bad = (~torch.isfinite(recon.flatten(1)).all(dim=1)).nonzero()[0].item()
        raise FloatingPointError(f"non-finite activations at batch index {bad}")
    rec = 0.5 * (recon - batch).pow(2).flatten(1).sum(dim=1)
    kl = kl_diag_gaussian(mean, logvar)
    return (rec + kl).mean()


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(N, 84, 84, 3) float arrays -> (N, 3, 84, 84) float tensor."""
    return torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2).float()


def train_vae(model: SpatialVAE, train_frames, val_frames, max_steps=None,
              seed=0, log_every=0):
    """Adam with step-wise exponential lr decay and early stopping on the
    validation loss. Returns a history dict."""
    cfg = model.config
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_steps, cfg.lr_decay)
    x_train = frames_to_tensor(train_frames)
    x_val = frames_to_tensor(val_frames)
    rng = np.random.default_rng(seed)
    best_val = math.inf
    best_state = None
    bad_epochs = 0
    history = {"train": [], "val": []}
    step = 0
    for _epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(x_train))
        epoch_losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = x_train[order[i : i + cfg.batch_size]]
            loss = elbo_loss(model, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            epoch_losses.append(loss.item())
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        val = validation_loss(model, x_val, cfg.batch_size, seed=seed)
        history["train"].append(float(np.mean(epoch_losses)))
        history["val"].append(val)
        if log_every and _epoch % log_every == 0:
            print(f"vae epoch {_epoch}: train {history['train'][-1]:.2f} val {val:.2f}")
        if val < best_val - 1e-6:
            best_val = val
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
        if max_steps is not None and step >= max_steps:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


def validation_loss(model, x_val, batch_size, seed=0):
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(x_val), batch_size):
            batch = x_val[i : i + batch_size]
            noise = torch.randn(batch.shape[0], model.config.latent_dim, generator=gen)
            total += elbo_loss(model, batch, noise=noise).item() * batch.shape[0]
            n += batch.shape[0]
    return total / max(n, 1)


def save_vae(model: SpatialVAE, path: str):
    torch.save({"config": model.config.__dict__, "state": model.state_dict()}, path)


def load_vae(path: str) -> SpatialVAE:
    blob = torch.load(path, weights_only=False)
    model = SpatialVAE(VAEConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model
