"""Keypoint extraction: reconstruct fused predictability maps through a
bottleneck of K fixed-width Gaussian windows with learnable centers.

Centers live in normalized [-1, 1] coordinates (x rightward, y downward)
and are read out of K heatmaps with a spatial softmax expectation.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .vae import ENCODER_FILTERS, ENCODER_KERNELS, ENCODER_STRIDES, ConvEncoder

DEFAULT_SIGMA = 0.1


def coordinate_axes(h: int, w: int, dtype=torch.float32):
    """Normalized pixel-center coordinates: ys over height, xs over width."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype)
    return ys, xs


def heatmaps_to_centers(heatmaps: torch.Tensor) -> torch.Tensor:
    """(B, K, H, W) -> (B, K, 2) centers (x, y) in [-1, 1]^2 via the
    spatial-softmax expectation of normalized pixel coordinates."""
    b, k, h, w = heatmaps.shape
    probs = F.softmax(heatmaps.reshape(b, k, h * w), dim=-1).reshape(b, k, h, w)
    ys, xs = coordinate_axes(h, w, dtype=heatmaps.dtype)
    cx = (probs.sum(dim=2) * xs).sum(dim=-1)
    cy = (probs.sum(dim=3) * ys).sum(dim=-1)
    return torch.stack([cx, cy], dim=-1)


def gaussian_maps(centers: torch.Tensor, sigma: float, out_hw) -> torch.Tensor:
    """(B, K, 2) centers -> (B, K, H, W) unnormalized Gaussian windows
    exp(-dist2 / (2 sigma^2)) evaluated on the normalized pixel grid."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = (out_hw, out_hw) if isinstance(out_hw, int) else out_hw
    ys, xs = coordinate_axes(h, w, dtype=centers.dtype)
    cx = centers[..., 0][..., None, None]
    cy = centers[..., 1][..., None, None]
    d2 = (xs[None, None, None, :] - cx) ** 2 + (ys[None, None, :, None] - cy) ** 2
    return torch.exp(-d2 / (2.0 * sigma * sigma))


class _MapDecoder(nn.Module):
    """Transpose of the keypoint encoder: K Gaussian channels in, M error
    channels out, bilinear upsampling undoing each stride-2 layer."""

    def __init__(self, k, out_channels, filters, kernels, strides):
        super().__init__()
        rev_filters = list(filters[::-1])
        blocks, ups = [], []
        c_in = k
        for i, (kk, s) in enumerate(zip(kernels[::-1], strides[::-1])):
            c_out = rev_filters[i + 1] if i + 1 < len(rev_filters) else out_channels
            last = i == len(kernels) - 1
            conv = nn.Conv2d(c_in, c_out, kk, stride=1, padding="same")
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
        return h


def normalize_maps(maps: torch.Tensor) -> torch.Tensor:
    """Scale each map channel to unit maximum per frame. Raw predictability
    errors are tiny in magnitude, which starves the reconstruction gradient;
    unit-max scaling is idempotent, so it is safe to apply both when training
    and inside the model."""
    return maps / maps.amax(dim=(-2, -1), keepdim=True).clamp_min(1e-8)


def preprocess_maps(maps: torch.Tensor) -> torch.Tensor:
    """Unit-max scaling followed by square-root amplitude compression.

    Objects differ in raw predictability-error magnitude by several factors;
    under a plain MSE objective the reconstruction concentrates on the
    strongest blobs and quietly drops the weakest object. Compressing the
    amplitude range evens out how much each object contributes to the loss
    while leaving the (near-zero) background close to zero."""
    return normalize_maps(maps).sqrt()


def _spread_centers(k: int) -> torch.Tensor:
    """K well-separated points in [-1, 1]^2, row-major on the smallest
    square grid that fits them."""
    side = int(np.ceil(np.sqrt(k)))
    coords = torch.linspace(-0.6, 0.6, side) if side > 1 else torch.zeros(1)
    pts = torch.cartesian_prod(coords, coords)[:k]  # (k, 2) as (y, x)
    return torch.stack([pts[:, 1], pts[:, 0]], dim=-1)


def _heatmap_seed_bias(k: int, h: int, w: int, amplitude=4.0, width=0.25):
    """Fixed-shape initial heatmap logits: one broad bump per keypoint at
    spread-out locations, so the softmax centers start dispersed instead of
    all collapsing onto the image mean."""
    return amplitude * gaussian_maps(_spread_centers(k)[None], width, (h, w))[0]


@dataclass
class PointNetConfig:
    k: int = 10
    in_channels: int = 2  # number of fused predictability channels
    in_hw: int = 84
    sigma: float = DEFAULT_SIGMA
    filters: tuple = ENCODER_FILTERS
    kernels: tuple = ENCODER_KERNELS
    strides: tuple = ENCODER_STRIDES
    lr: float = 2e-4
    lr_decay: float = 0.85
    lr_decay_steps: int = 10_000
    batch_size: int = 32
    epochs: int = 100
    patience: int = 10


class KeypointPointNet(nn.Module):
    """Encoder to K heatmaps, Gaussian-window bottleneck, map decoder."""

    def __init__(self, config: PointNetConfig = None):
        super().__init__()
        self.config = config or PointNetConfig()
        cfg = self.config
        self.encoder = ConvEncoder(cfg.in_channels, cfg.filters, cfg.kernels,
                                   cfg.strides)
        self.regressor = nn.Conv2d(cfg.filters[-1], cfg.k, kernel_size=1)
        grid = cfg.in_hw // int(np.prod([s for s in cfg.strides if s == 2]))
        self.heatmap_bias = nn.Parameter(_heatmap_seed_bias(cfg.k, grid, grid))
        self.decoder = _MapDecoder(cfg.k, cfg.in_channels, cfg.filters,
                                   cfg.kernels, cfg.strides)

    def heatmaps(self, maps: torch.Tensor) -> torch.Tensor:
        feats = self.encoder(preprocess_maps(maps))
        return self.regressor(feats[-1]) + self.heatmap_bias

    def keypoints(self, maps: torch.Tensor) -> torch.Tensor:
        """(B, M, 84, 84) fused maps -> (B, K, 2) centers in [-1, 1]^2."""
        return heatmaps_to_centers(self.heatmaps(maps))

    def forward(self, maps: torch.Tensor):
        hm = self.heatmaps(maps)
        centers = heatmaps_to_centers(hm)
        masks = gaussian_maps(centers, self.config.sigma, hm.shape[-2:])
        recon = self.decoder(masks)
        return recon, centers, masks


def pointnet_loss(model: KeypointPointNet, maps: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error over all M*H*W entries, measured in
    the model's preprocessed map space; gradients flow into the model only
    (maps are constants)."""
    maps = maps.detach()
    recon, _, _ = model(maps)  # the model preprocesses its input itself
    loss = F.mse_loss(recon, preprocess_maps(maps))
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite PointNet loss")
    return loss


def keypoint_features(features: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mask-weighted spatial average of conv features per keypoint.

    features: (B, C, H, W); masks: (B, K, H, W) -> (B, K, C).
    """
    if features.shape[-2:] != masks.shape[-2:]:
        raise ValueError(
            f"feature grid {tuple(features.shape[-2:])} does not match mask grid "
            f"{tuple(masks.shape[-2:])}"
        )
    num = torch.einsum("bkhw,bchw->bkc", masks, features)
    den = masks.sum(dim=(-2, -1)).clamp_min(1e-12)
    return num / den[..., None]


def superpose_masked_features(features: torch.Tensor, masks: torch.Tensor):
    """Sum over keypoints of mask-weighted features: (B, C, H, W)."""
    if features.shape[-2:] != masks.shape[-2:]:
        raise ValueError("feature/mask spatial shapes differ")
    return masks.sum(dim=1, keepdim=True) * features


def render_masks(centers: torch.Tensor, sigma: float, out_hw) -> torch.Tensor:
    """Re-render keypoint masks exactly at a target resolution (used instead
    of resizing to avoid interpolation bias)."""
    return gaussian_maps(centers, sigma, out_hw)


def train_pointnet(model: KeypointPointNet, train_maps, val_maps, max_steps=None,
                   seed=0):
    cfg = model.config
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_steps, cfg.lr_decay)
    rng = np.random.default_rng(seed)
    best, best_state, bad = np.inf, None, 0
    history = {"train": [], "val": []}
    step = 0
    for _epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(train_maps.shape[0])
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = train_maps[torch.as_tensor(order[i : i + cfg.batch_size])]
            loss = pointnet_loss(model, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        val = heldout_loss(model, val_maps, cfg.batch_size)
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


def heldout_loss(model, maps, batch_size=32):
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, maps.shape[0], batch_size):
            batch = maps[i : i + batch_size]
            total += pointnet_loss(model, batch).item() * batch.shape[0]
            n += batch.shape[0]
    return total / max(n, 1)


def save_pointnet(model: KeypointPointNet, path: str):
    torch.save({"config": model.config.__dict__, "state": model.state_dict()}, path)


def load_pointnet(path: str) -> KeypointPointNet:
    blob = torch.load(path, weights_only=False)
    model = KeypointPointNet(PointNetConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model
