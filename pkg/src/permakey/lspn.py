"""Local spatial prediction: per-layer center-patch regression from the
8-neighborhood, and the resulting predictability (error) maps.

Feature maps are tiled into non-overlapping p x p patches; an MLP per
encoder layer predicts each interior patch from its 8 first-order
neighbors. The per-cell squared error, replicated outward at the grid
border and bilinearly resized to 84x84, forms one channel of the fused
predictability stack.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# clockwise from the top-left neighbor
NEIGHBOR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1),
                    (1, 1), (1, 0), (1, -1), (0, -1))


class PatchSizeError(ValueError):
    """Feature map too small for the requested patch size."""


class BorderCellError(IndexError):
    """Neighborhood requested for a non-interior grid cell."""


def extract_patch_grid(feature_map: torch.Tensor, p: int) -> torch.Tensor:
    """(H, W, C) or (B, H, W, C) -> (..., H//p, W//p, p*p*C) patch grid.

    Patches are non-overlapping, flattened row-major with channels last.
    """
    single = feature_map.dim() == 3
    a = feature_map.unsqueeze(0) if single else feature_map
    b, h, w, c = a.shape
    if h < 3 * p or w < 3 * p:
        raise PatchSizeError(f"feature map {h}x{w} smaller than 3p={3 * p}")
    gh, gw = h // p, w // p
    a = a[:, : gh * p, : gw * p, :]
    grid = (
        a.reshape(b, gh, p, gw, p, c)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(b, gh, gw, p * p * c)
    )
    return grid[0] if single else grid


def unpatch(grid: torch.Tensor, p: int, channels: int) -> torch.Tensor:
    """Inverse of extract_patch_grid (up to the crop to p*Gh x p*Gw)."""
    single = grid.dim() == 3
    g = grid.unsqueeze(0) if single else grid
    b, gh, gw, d = g.shape
    assert d == p * p * channels
    a = (
        g.reshape(b, gh, gw, p, p, channels)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(b, gh * p, gw * p, channels)
    )
    return a[0] if single else a


def neighborhood(grid: torch.Tensor, i: int, j: int) -> torch.Tensor:
    """Concatenated 8-neighbor patch vectors of interior cell (i, j)."""
    gh, gw = grid.shape[0], grid.shape[1]
    if not (1 <= i <= gh - 2 and 1 <= j <= gw - 2):
        raise BorderCellError(f"cell ({i}, {j}) has missing neighbors")
    return torch.cat([grid[i + dy, j + dx] for dy, dx in NEIGHBOR_OFFSETS])


def interior_neighborhoods(grid: torch.Tensor) -> torch.Tensor:
    """(B, Gh, Gw, D) -> (B, Gh-2, Gw-2, 8D), same neighbor order as
    `neighborhood` for every interior cell at once."""
    b, gh, gw, d = grid.shape
    parts = [
        grid[:, 1 + dy : gh - 1 + dy, 1 + dx : gw - 1 + dx, :]
        for dy, dx in NEIGHBOR_OFFSETS
    ]
    return torch.cat(parts, dim=-1)


class LSPN(nn.Module):
    """MLP regressing a center patch from its concatenated neighbors."""

    def __init__(self, channels: int, p: int = 2, hidden=(512, 256)):
        super().__init__()
        d = p * p * channels
        sizes = [8 * d] + list(hidden) + [d]
        layers = []
        for i in range(len(sizes) - 1):
            layers.append(nn.Linear(sizes[i], sizes[i + 1]))
            if i < len(sizes) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.channels = channels
        self.p = p

    def forward(self, x):
        return self.net(x)


def _grid_from_features(features: torch.Tensor, p: int) -> torch.Tensor:
    """(B, C, H, W) encoder activations -> detached (B, Gh, Gw, D) grid."""
    return extract_patch_grid(features.detach().permute(0, 2, 3, 1), p)


def lsp_loss(features: torch.Tensor, net: LSPN, n_cells: int = None,
             generator: torch.Generator = None) -> torch.Tensor:
    """Mean over batch and interior cells of the per-entry MSE between the
    predicted and actual center patch. Features are constants (detached).

    n_cells, if given, subsamples that many interior cells across the
    batch (training speed-up; the full loss is the n_cells=None case).
    """
    grid = _grid_from_features(features, net.p)
    ne = interior_neighborhoods(grid)
    centers = grid[:, 1:-1, 1:-1, :]
    d = centers.shape[-1]
    ne = ne.reshape(-1, 8 * d)
    centers = centers.reshape(-1, d)
    if n_cells is not None and n_cells < ne.shape[0]:
        idx = torch.randperm(ne.shape[0], generator=generator)[:n_cells]
        ne, centers = ne[idx], centers[idx]
    pred = net(ne)
    loss = F.mse_loss(pred, centers)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite LSP loss")
    return loss


def error_map(features: torch.Tensor, net: LSPN) -> torch.Tensor:
    """(B, C, H, W) -> (B, Gh, Gw) nonnegative per-cell squared error.

    Interior cells hold the mean squared prediction error over the
    p*p*C patch entries; border cells replicate the nearest interior value.
    """
    with torch.no_grad():
        grid = _grid_from_features(features, net.p)
        ne = interior_neighborhoods(grid)
        centers = grid[:, 1:-1, 1:-1, :]
        pred = net(ne.reshape(-1, ne.shape[-1])).reshape(centers.shape)
        err = (pred - centers).pow(2).mean(dim=-1)
        return F.pad(err.unsqueeze(1), (1, 1, 1, 1), mode="replicate").squeeze(1)


def fused_error_maps(per_layer_features, nets, out_hw: int = 84) -> torch.Tensor:
    """Per-layer error maps, bilinearly resized and channel-concatenated
    into the (B, M, out_hw, out_hw) predictability stack."""
    maps = []
    for features, net in zip(per_layer_features, nets):
        m = error_map(features, net).unsqueeze(1)
        m = F.interpolate(m, size=(out_hw, out_hw), mode="bilinear",
                          align_corners=False)
        maps.append(m)
    return torch.cat(maps, dim=1)


@dataclass
class LSPNTrainConfig:
    p: int = 2
    layers: tuple = (0, 1)
    lr: float = 2e-4
    lr_decay: float = 0.85
    lr_decay_steps: int = 10_000
    batch_size: int = 32
    epochs: int = 100
    patience: int = 10
    cells_per_step: int = 2048  # interior-cell subsample per update


def compute_feature_stacks(vae, frames: np.ndarray, layers, batch_size=32):
    """Frozen-VAE per-layer activations for a frame array. Returns a list
    of (N, C_l, H_l, W_l) tensors in layer order."""
    from .vae import frames_to_tensor

    vae.eval()
    x = frames_to_tensor(frames)
    outs = None
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            feats, _, _ = vae.encode(x[i : i + batch_size])
            picked = [feats[l] for l in layers]
            if outs is None:
                outs = [[] for _ in picked]
            for buf, f in zip(outs, picked):
                buf.append(f)
    return [torch.cat(buf) for buf in outs]


def train_lspn(net: LSPN, train_features: torch.Tensor, val_features: torch.Tensor,
               cfg: LSPNTrainConfig, max_steps=None, seed=0):
    """Train one per-layer prediction network; early stops on validation."""
    torch.manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_steps, cfg.lr_decay)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    best, best_state, bad = np.inf, None, 0
    history = {"train": [], "val": []}
    step = 0
    for _epoch in range(cfg.epochs):
        net.train()
        order = rng.permutation(train_features.shape[0])
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = train_features[torch.as_tensor(order[i : i + cfg.batch_size])]
            loss = lsp_loss(batch, net, n_cells=cfg.cells_per_step, generator=gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        net.eval()
        with torch.no_grad():
            val = float(np.mean([
                lsp_loss(val_features[i : i + cfg.batch_size], net).item()
                for i in range(0, val_features.shape[0], cfg.batch_size)
            ]))
        history["train"].append(float(np.mean(losses)))
        history["val"].append(val)
        if val < best - 1e-9:
            best, bad = val, 0
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        else:
            bad += 1
            if bad >= cfg.patience:
                break
        if max_steps is not None and step >= max_steps:
            break
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return history


def save_lspns(nets, layers, p, path):
    torch.save({
        "layers": list(layers),
        "p": p,
        "channels": [n.channels for n in nets],
        "states": [n.state_dict() for n in nets],
    }, path)


def load_lspns(path):
    blob = torch.load(path, weights_only=False)
    nets = []
    for c, state in zip(blob["channels"], blob["states"]):
        net = LSPN(c, p=blob["p"])
        net.load_state_dict(state)
        net.eval()
        nets.append(net)
    return nets, blob["layers"], blob["p"]
