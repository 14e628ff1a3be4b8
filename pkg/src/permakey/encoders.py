"""Keypoint-to-state encoders for the agent: a CNN over superposed masked
features and a graph encoder (Encode-Process-Decode with one Interaction
Network message-passing step over a fully connected keypoint graph)."""

from dataclasses import dataclass

import torch
import torch.nn as nn

CNN_KERNELS = (3, 3, 3, 3)
CNN_FILTERS = (128, 128, 128, 128)
CNN_STRIDES = (1, 1, 2, 1)


class CNNKeypointEncoder(nn.Module):
    """Conv-BatchNorm-ReLU stack over the superposed masked feature map,
    flattened into a 128-unit ReLU dense layer."""

    def __init__(self, in_channels, in_hw, filters=CNN_FILTERS,
                 kernels=CNN_KERNELS, strides=CNN_STRIDES, out_dim=128):
        super().__init__()
        blocks = []
        c_in = in_channels
        hw = in_hw
        for k, f, s in zip(kernels, filters, strides):
            if s == 1:
                conv = nn.Conv2d(c_in, f, k, stride=1, padding="same")
            else:
                conv = nn.Conv2d(c_in, f, k, stride=s, padding=(k - 1) // 2)
                hw = (hw + 2 * ((k - 1) // 2) - k) // s + 1
            blocks.append(nn.Sequential(conv, nn.BatchNorm2d(f), nn.ReLU()))
            c_in = f
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Sequential(nn.Linear(c_in * hw * hw, out_dim), nn.ReLU())
        self.in_channels = in_channels
        self.in_hw = in_hw
        self.out_dim = out_dim

    def forward(self, x):
        if x.shape[1] != self.in_channels or x.shape[-1] != self.in_hw:
            raise ValueError(f"expected (B, {self.in_channels}, {self.in_hw}, "
                             f"{self.in_hw}), got {tuple(x.shape)}")
        h = x
        for block in self.blocks:
            h = block(h)
        return self.head(h.flatten(1))


def mlp(in_dim, hidden, out_dim, out_relu=True):
    layers = []
    d = in_dim
    for h in hidden:
        layers += [nn.Linear(d, h), nn.ReLU()]
        d = h
    layers.append(nn.Linear(d, out_dim))
    if out_relu:
        layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class PositionalEmbedding(nn.Module):
    """2-layer 64-unit MLP with linear output over keypoint centers."""

    def __init__(self, out_dim=64):
        super().__init__()
        self.net = mlp(2, (64,), out_dim, out_relu=False)
        self.out_dim = out_dim

    def forward(self, centers):
        return self.net(centers)


@dataclass
class GraphState:
    """Fully connected directed keypoint graph; no self-edges (the diagonal
    of `edges` is ignored). edges[i, j] is the edge from node i to node j."""

    nodes: torch.Tensor  # (B, K, Dn)
    edges: torch.Tensor  # (B, K, K, De)

    @classmethod
    def fully_connected(cls, nodes, edge_dim):
        b, k, _ = nodes.shape
        edges = nodes.new_zeros(b, k, k, edge_dim)
        return cls(nodes, edges)


class InteractionStep(nn.Module):
    """One message-passing step: update every directed edge from its
    endpoint pair, sum incoming edges per node, then update nodes."""

    def __init__(self, node_dim, edge_dim, hidden=(64, 64)):
        super().__init__()
        self.f_edge = mlp(2 * node_dim + edge_dim, hidden[:-1], hidden[-1])
        self.f_node = mlp(node_dim + hidden[-1], hidden[:-1], hidden[-1])
        self.edge_out_dim = hidden[-1]
        self.node_out_dim = hidden[-1]

    def forward(self, g: GraphState) -> GraphState:
        b, k, dn = g.nodes.shape
        v_i = g.nodes[:, :, None, :].expand(b, k, k, dn)  # sender i
        v_j = g.nodes[:, None, :, :].expand(b, k, k, dn)  # receiver j
        e_new = self.f_edge(torch.cat([v_i, v_j, g.edges], dim=-1))
        if k > 1:
            off_diag = 1.0 - torch.eye(k, dtype=e_new.dtype)[None, :, :, None]
            e_new = e_new * off_diag
            incoming = e_new.sum(dim=1)  # sum over senders i of e'_{i -> j}
        else:
            e_new = e_new * 0.0
            incoming = e_new.new_zeros(b, k, self.edge_out_dim)
        v_new = self.f_node(torch.cat([g.nodes, incoming], dim=-1))
        return GraphState(v_new, e_new)


class GNNKeypointEncoder(nn.Module):
    """Encode-Process-Decode over keypoint nodes; decoded node values are
    concatenated in keypoint-index order and fed through a 2x128 ReLU MLP."""

    def __init__(self, k, feature_dim, pos_dim=64, latent=64, out_dim=128):
        super().__init__()
        self.k = k
        self.positional = PositionalEmbedding(pos_dim)
        node_in = feature_dim + pos_dim
        self.encode_node = mlp(node_in, (64,), latent)
        self.encode_edge = mlp(latent, (64,), latent)
        self.process = InteractionStep(latent, latent, hidden=(64, latent))
        self.decode_node = mlp(latent, (64,), latent)
        self.head = mlp(k * latent, (128,), out_dim)
        self.out_dim = out_dim

    def forward(self, keypoint_feats, centers):
        """keypoint_feats: (B, K, C) averaged features; centers: (B, K, 2)."""
        if keypoint_feats.shape[1] != self.k:
            raise ValueError(f"expected K={self.k} keypoints, got "
                             f"{keypoint_feats.shape[1]}")
        pos = self.positional(centers)
        nodes = torch.cat([keypoint_feats, pos], dim=-1)
        g = GraphState.fully_connected(self.encode_node(nodes),
                                       self.process.f_edge[-2].out_features)
        g = GraphState(g.nodes, self.encode_edge(g.edges))
        g = self.process(g)
        decoded = self.decode_node(g.nodes)
        return self.head(decoded.flatten(1))
