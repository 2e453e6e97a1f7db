"""Multimodal hand-region conditioner.

A small attention UNet over token sequences from four inputs: gesture
label, hand-region depth crop, mesh vertices, and the normalized hand
bounding box. It emits one fusion map per scale (down / mid / up) for
injection into the denoiser, and decodes the up-block state into a
reconstruction of the hand crop.

Wiring: the three modality token streams pass through self-attention
layers 1-3, are cross-attended pairwise (bbox tokens appended to every
key/value sequence) and MLP-merged into the down state. The mid block
pools the down state, self-attends (layer 4) and cross-attends into the
bbox tokens. The up block runs self-attention over the upsampled mid
state (layer 5) and over two skip streams from the down block (layers 6
and 7), cross-attends pairwise with bbox again, and MLP-merges into the
up state. The pairing permutation is configurable; the default is cyclic.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rng
from .data import GESTURES
from .errors import ValidationError
from .fusion import FusionFeatureSet
from .layers import CrossAttentionLayer, SelfAttentionLayer, MultiheadAttention, bilinear_resize, resample_tokens
from .mesh import KEYPOINT_COUNT, build_adjacency, canonical_hand


class DepthPatchEncoder(nn.Module):
    """Convolutional patch embedding with additive positional embeddings.

    Instantiated with in_channels=1 for single-channel depth crops; a
    3-channel twin covers multi-channel rasters.
    """

    def __init__(self, width, crop_size, patch=4, in_channels=1):
        super().__init__()
        if crop_size % patch:
            raise ValidationError("crop size must be divisible by the patch size")
        self.patch = patch
        self.in_channels = in_channels
        self.tokens_per_side = crop_size // patch
        self.proj = nn.Conv2d(in_channels, width, patch, stride=patch)
        self.pos_emb = nn.Parameter(torch.randn(self.tokens_per_side**2, width) * 0.02)

    def forward(self, depth):
        if depth.ndim != 4 or depth.shape[1] != self.in_channels:
            raise ValidationError(
                f"expected (B, {self.in_channels}, h, w) raster, got {tuple(depth.shape)}"
            )
        h, w = depth.shape[-2:]
        if h % self.patch or w % self.patch:
            raise ValidationError(f"raster dims ({h}, {w}) not divisible by patch {self.patch}")
        if depth.min() < 0 or depth.max() > 1:
            raise ValidationError("depth values must lie in [0, 1]")
        if (h // self.patch) * (w // self.patch) != self.pos_emb.shape[0]:
            raise ValidationError(
                f"raster ({h}, {w}) yields {(h // self.patch) * (w // self.patch)} tokens, "
                f"encoder is built for {self.pos_emb.shape[0]}"
            )
        tokens = self.proj(depth).flatten(2).transpose(1, 2)
        return tokens + self.pos_emb


class GraphConv(nn.Module):
    """One propagation step H' = A_hat H W + b (activation applied by the caller)."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.lin = nn.Linear(in_dim, out_dim)

    def forward(self, h, adj):
        if adj.is_sparse:
            prop = torch.stack([torch.sparse.mm(adj, h[b]) for b in range(h.shape[0])])
        else:
            prop = adj @ h
        return self.lin(prop)


def group_pool(tokens, groups, n_groups):
    """Mean-pool per-vertex tokens into per-group tokens; (B, V, d) -> (B, G, d)."""
    onehot = F.one_hot(groups, n_groups).to(tokens.dtype)
    counts = onehot.sum(dim=0).clamp(min=1.0)
    pool = (onehot / counts).T
    return torch.einsum("gv,bvd->bgd", pool, tokens)


class MeshGraphEncoder(nn.Module):
    """Three-layer graph convolution over vertex coordinates, group-pooled."""

    def __init__(self, width, n_groups=KEYPOINT_COUNT):
        super().__init__()
        self.n_groups = n_groups
        self.layers = nn.ModuleList(
            [GraphConv(3, width), GraphConv(width, width), GraphConv(width, width)]
        )

    def forward(self, vertices, adj, groups):
        if vertices.ndim != 3 or vertices.shape[-1] != 3:
            raise ValidationError(f"vertices must be (B, V, 3), got {tuple(vertices.shape)}")
        if adj.shape[-1] != vertices.shape[1]:
            raise ValidationError(
                f"adjacency is {tuple(adj.shape)} but mesh has {vertices.shape[1]} vertices"
            )
        h = vertices
        for i, layer in enumerate(self.layers):
            h = layer(h, adj)
            if i + 1 < len(self.layers):
                h = torch.relu(h)
        return group_pool(h, groups, self.n_groups)


class VertexMLPEncoder(nn.Module):
    """Flat per-vertex MLP used by the without-graph ablation; same pooling."""

    def __init__(self, width, n_groups=KEYPOINT_COUNT):
        super().__init__()
        self.n_groups = n_groups
        self.mlp = nn.Sequential(nn.Linear(3, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, vertices, adj, groups):
        if vertices.ndim != 3 or vertices.shape[-1] != 3:
            raise ValidationError(f"vertices must be (B, V, 3), got {tuple(vertices.shape)}")
        return group_pool(self.mlp(vertices), groups, self.n_groups)


class BBoxEncoder(nn.Module):
    """Four box scalars -> four tokens -> one self-attention pass -> layer norm."""

    def __init__(self, width, heads):
        super().__init__()
        self.coord_weight = nn.Parameter(torch.randn(4, width) * 0.5)
        self.coord_bias = nn.Parameter(torch.randn(4, width) * 0.02)
        self.attn = MultiheadAttention(width, heads)
        self.norm = nn.LayerNorm(width, elementwise_affine=False)

    def forward(self, boxes):
        if boxes.ndim != 2 or boxes.shape[1] != 4:
            raise ValidationError(f"expected (B, 4) box coordinates, got {tuple(boxes.shape)}")
        tokens = boxes[:, :, None] * self.coord_weight + self.coord_bias
        tokens = tokens + self.attn(tokens, tokens)
        return self.norm(tokens)


class MergeMLP(nn.Module):
    """Concatenate cross-attention outputs along width, two-layer MLP back to d."""

    def __init__(self, n_streams, width):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(n_streams * width, 2 * width), nn.SiLU(), nn.Linear(2 * width, width)
        )

    def forward(self, streams):
        return self.net(torch.cat(streams, dim=-1))


class HandDecoder(nn.Module):
    """Up-block grid -> RGB hand crop in [0, 1] (sigmoid squashed)."""

    def __init__(self, width, crop_size):
        super().__init__()
        self.crop_size = crop_size
        self.conv1 = nn.Conv2d(width, 64, 3, padding=1)
        self.conv2 = nn.Conv2d(64, 64, 3, padding=1)
        self.conv3 = nn.Conv2d(64, 32, 3, padding=1)
        self.conv4 = nn.Conv2d(32, 3, 3, padding=1)

    def forward(self, grid):
        h = F.silu(self.conv1(grid))
        h = F.silu(self.conv2(h))
        h = bilinear_resize(h, self.crop_size, self.crop_size)
        h = F.silu(self.conv3(h))
        return torch.sigmoid(self.conv4(h))


def _pairs_for(n_streams, pairing):
    if n_streams == 3:
        pairs = tuple(tuple(p) for p in pairing)
    else:
        pairs = ((0, 1), (1, 0))
    for q, kv in pairs:
        if not (0 <= q < n_streams and 0 <= kv < n_streams):
            raise ValidationError(f"pairing {pairs} out of range for {n_streams} streams")
    return pairs


class HandConditioner(nn.Module):
    """The hand-region conditioning module; see the module docstring for wiring."""

    def __init__(self, cfg, text_encoder, seed=0):
        super().__init__()
        self.cfg = cfg
        if text_encoder.dim != cfg.cond_width:
            raise ValidationError(
                f"token width mismatch: text encoder {text_encoder.dim} vs "
                f"conditioner width {cfg.cond_width}"
            )
        self.text_encoder = text_encoder
        self.use_mesh = cfg.ablation != "without_3dmesh"
        self.n_down_streams = 3 if self.use_mesh else 2
        d, heads = cfg.cond_width, cfg.cond_heads
        self.down_tokens = cfg.down_grid**2
        self.mid_tokens = cfg.mid_grid**2
        with torch.random.fork_rng():
            torch.manual_seed(int(rng.stream(seed, "init", "conditioner").integers(2**62)))
            self.depth_encoder = DepthPatchEncoder(d, cfg.hand_crop, patch=cfg.depth_patch)
            if self.use_mesh:
                if cfg.ablation == "without_graph":
                    self.mesh_encoder = VertexMLPEncoder(d)
                else:
                    self.mesh_encoder = MeshGraphEncoder(d)
            self.bbox_encoder = BBoxEncoder(d, heads)
            self.sa_down = nn.ModuleList(
                [SelfAttentionLayer(d, heads) for _ in range(self.n_down_streams)]
            )
            n_pairs = len(_pairs_for(self.n_down_streams, cfg.cross_pairing))
            self.ca_down = nn.ModuleList([CrossAttentionLayer(d, heads) for _ in range(n_pairs)])
            self.merge_down = MergeMLP(n_pairs, d)
            self.sa_mid = SelfAttentionLayer(d, heads)
            self.ca_mid = CrossAttentionLayer(d, heads)
            self.sa_up = nn.ModuleList([SelfAttentionLayer(d, heads) for _ in range(3)])
            self.ca_up = nn.ModuleList([CrossAttentionLayer(d, heads) for _ in range(3)])
            self.merge_up = MergeMLP(3, d)
            self.decoder = HandDecoder(d, cfg.hand_crop)
        hand = canonical_hand()
        adj = torch.from_numpy(build_adjacency(hand.mesh, "symmetric"))
        self.register_buffer("mesh_adjacency", adj.to_sparse_coo(), persistent=False)
        self.register_buffer(
            "mesh_groups", torch.from_numpy(hand.groups), persistent=False
        )
        self.to(cfg.torch_dtype)
        self.forward_calls = 0

    # ---- per-modality encoders (single-sample token sequences) ----

    def encode_text(self, label):
        """Gesture-label tokens; the label must come from the 18-class vocabulary."""
        if label not in GESTURES:
            raise ValidationError(f"unknown gesture label {label!r}; expected one of {GESTURES}")
        return self.text_encoder.encode(label, dtype=self.cfg.torch_dtype)

    def encode_caption(self, text):
        return self.text_encoder.encode(text, dtype=self.cfg.torch_dtype)

    def encode_depth(self, depth):
        """(1, h, w) depth crop -> ((h/p)*(w/p), d) tokens."""
        return self.depth_encoder(depth.unsqueeze(0))[0]

    def encode_mesh(self, vertices, adjacency=None, groups=None):
        """(V, 3) vertices -> (21, d) group-pooled tokens."""
        if not self.use_mesh:
            raise ValidationError("mesh encoder is disabled in the without_3dmesh ablation")
        adj = self.mesh_adjacency if adjacency is None else adjacency
        grp = self.mesh_groups if groups is None else groups
        return self.mesh_encoder(vertices.unsqueeze(0), adj, grp)[0]

    def encode_bbox(self, bbox):
        """NormalizedBBox -> (4, d) tokens with unit layer-norm statistics."""
        coords = torch.tensor([bbox.as_tuple()], dtype=self.cfg.torch_dtype)
        return self.bbox_encoder(coords)[0]

    # ---- full forward ----

    def _tokens_to_grid(self, tokens, side):
        b, length, d = tokens.shape
        return tokens.transpose(1, 2).reshape(b, d, side, side)

    def _grid_to_tokens(self, grid):
        b, d, h, w = grid.shape
        return grid.reshape(b, d, h * w).transpose(1, 2)

    def forward(self, labels, depth, vertices, bboxes):
        """Batched forward.

        labels: list of B gesture labels; depth: (B, 1, crop, crop);
        vertices: (B, V, 3) or None in the without_3dmesh ablation;
        bboxes: list of B NormalizedBBox.
        Returns (list of per-sample FusionFeatureSet, (B, 3, crop, crop) recon).
        """
        self.forward_calls += 1
        batch = len(labels)
        dt = self.cfg.torch_dtype
        f_t = torch.stack(
            [resample_tokens(self.encode_text(lab), self.down_tokens) for lab in labels]
        )
        f_d = self.depth_encoder(depth.to(dt))
        if f_d.shape[1] != self.down_tokens:
            f_d = resample_tokens(f_d, self.down_tokens)
        streams = [f_t, f_d]
        if self.use_mesh:
            if vertices is None:
                raise ValidationError("mesh vertices are required outside the without_3dmesh ablation")
            f_v = self.mesh_encoder(vertices.to(dt), self.mesh_adjacency, self.mesh_groups)
            streams.append(resample_tokens(f_v, self.down_tokens))
        coords = torch.tensor([b.as_tuple() for b in bboxes], dtype=dt)
        f_bb = self.bbox_encoder(coords)

        sa_out = [sa(s) for sa, s in zip(self.sa_down, streams)]
        pairs = _pairs_for(self.n_down_streams, self.cfg.cross_pairing)
        ca_out = [
            ca(sa_out[q], torch.cat([sa_out[kv], f_bb], dim=1))
            for ca, (q, kv) in zip(self.ca_down, pairs)
        ]
        d_down = self.merge_down(ca_out)

        mid_grid = F.avg_pool2d(
            self._tokens_to_grid(d_down, self.cfg.down_grid),
            self.cfg.down_grid // self.cfg.mid_grid,
        )
        sa4 = self.sa_mid(self._grid_to_tokens(mid_grid))
        d_mid = self.ca_mid(sa4, f_bb)

        up_in = bilinear_resize(
            self._tokens_to_grid(d_mid, self.cfg.mid_grid), self.cfg.down_grid, self.cfg.down_grid
        )
        ustreams = [
            self.sa_up[0](self._grid_to_tokens(up_in)),
            self.sa_up[1](ca_out[0]),
            self.sa_up[2](ca_out[1]),
        ]
        up_pairs = _pairs_for(3, self.cfg.cross_pairing)
        ca_up_out = [
            ca(ustreams[q], torch.cat([ustreams[kv], f_bb], dim=1))
            for ca, (q, kv) in zip(self.ca_up, up_pairs)
        ]
        d_up = self.merge_up(ca_up_out)

        down_maps = self._tokens_to_grid(d_down, self.cfg.down_grid)
        mid_maps = self._tokens_to_grid(d_mid, self.cfg.mid_grid)
        up_maps = self._tokens_to_grid(d_up, self.cfg.down_grid)
        recon = self.decoder(up_maps)
        fusion_sets = [
            FusionFeatureSet(
                down=down_maps[b], mid=mid_maps[b], up=up_maps[b], bbox=bboxes[b]
            )
            for b in range(batch)
        ]
        return fusion_sets, recon

    def forward_single(self, label, depth, mesh, bbox):
        """Single-sample convenience wrapper; mesh is a HandMesh or None."""
        vertices = None
        if self.use_mesh:
            if mesh is None:
                raise ValidationError("mesh input is required outside the without_3dmesh ablation")
            vertices = torch.from_numpy(mesh.vertices).to(self.cfg.torch_dtype).unsqueeze(0)
        sets, recon = self.forward(
            [label], depth.unsqueeze(0).to(self.cfg.torch_dtype), vertices, [bbox]
        )
        return sets[0], recon[0]
