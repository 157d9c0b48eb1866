"""Flow-predicting U-shaped window transformer.

The network turns a distorted image into a correction flow map plus a
per-component 3-class segmentation, through a hierarchy of paired window
attention blocks. Each block computes queries from the token stream and
keys/values from a densely-connected dilated convolution branch, so one
attention step mixes long-range window context with local multi-scale
structure. Skip connections are fused with a token-axis convolution
instead of plain concatenation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ModelConfig",
    "MSUnet",
    "init_weights",
    "window_partition",
    "window_reverse",
    "msa",
    "DenseDilatedConv",
    "WindowBlock",
    "SkipFusion",
    "PatchEmbed",
    "PatchMerging",
    "PatchExpanding",
    "FinalExpand",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``stage_depths[s]`` is the number of WP+SWP block pairs in encoder stage
    ``s`` (the decoder mirrors it); channels double and the token grid halves
    after every encoder stage. ``head_count`` is the head number at the first
    stage and doubles with the channels, keeping the per-head width fixed.
    """

    input_h: int = 48
    input_w: int = 64
    in_channels: int = 3
    patch_size: int = 4
    base_channels: int = 32
    stage_depths: tuple[int, ...] = (1, 1)
    bottleneck_pairs: int = 1
    head_count: int = 4
    window_h: int = 3
    window_w: int = 4
    mlp_ratio: float = 4.0
    dcm_growth: int = 8
    flow_head_gain: float = 8.0
    seg_classes: int = field(default=3, init=False)
    flow_channels: int = field(default=2, init=False)

    def __post_init__(self):
        if self.input_h % self.patch_size or self.input_w % self.patch_size:
            raise ValueError(
                f"input {self.input_h}x{self.input_w} not divisible by patch size {self.patch_size}"
            )
        if self.base_channels % self.head_count:
            raise ValueError(
                f"base channels {self.base_channels} not divisible by head count {self.head_count}"
            )
        if self.dcm_growth < 1 or self.bottleneck_pairs < 1 or min(self.stage_depths, default=1) < 1:
            raise ValueError("depths and dcm growth must be positive")
        gh, gw = self.grid_size(0)
        for s in range(len(self.stage_depths) + 1):
            if gh % self.window_h or gw % self.window_w:
                raise ValueError(
                    f"stage {s} token grid {gh}x{gw} not divisible by window "
                    f"{self.window_h}x{self.window_w}"
                )
            if s < len(self.stage_depths) and (gh % 2 or gw % 2):
                raise ValueError(f"stage {s} grid {gh}x{gw} must be even to merge")
            gh, gw = gh // 2, gw // 2

    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    def grid_size(self, stage: int) -> tuple[int, int]:
        return (
            self.input_h // self.patch_size // (1 << stage),
            self.input_w // self.patch_size // (1 << stage),
        )

    def channels(self, stage: int) -> int:
        return self.base_channels << stage

    def heads(self, stage: int) -> int:
        return self.head_count << stage

    def growth(self, stage: int) -> int:
        return self.dcm_growth << stage

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small configuration trainable on one CPU core (64x48 input)."""
        return cls(**overrides)

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """Full-size configuration for 512x384 input."""
        return cls(
            input_h=384,
            input_w=512,
            base_channels=96,
            stage_depths=(1, 1, 1),
            bottleneck_pairs=1,
            head_count=3,
            window_h=6,
            window_w=8,
            dcm_growth=24,
        )


def window_partition(
    x: torch.Tensor, window: tuple[int, int], shift: tuple[int, int] = (0, 0)
) -> torch.Tensor:
    """Split a (B, H, W, C) grid into (B*nw, wh*ww, C) windows.

    A nonzero shift cyclically rolls the grid by (-sy, -sx) first. Windows
    are enumerated row-major over the window grid, tokens row-major inside
    each window.
    """
    b, h, w, c = x.shape
    wh, ww = window
    if h % wh or w % ww:
        raise ValueError(f"grid {h}x{w} not divisible by window {wh}x{ww}")
    if shift != (0, 0):
        x = torch.roll(x, shifts=(-shift[0], -shift[1]), dims=(1, 2))
    x = x.view(b, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, c)


def window_reverse(
    windows: torch.Tensor,
    window: tuple[int, int],
    grid: tuple[int, int],
    shift: tuple[int, int] = (0, 0),
) -> torch.Tensor:
    """Invert :func:`window_partition` (exactly, for any shift)."""
    wh, ww = window
    h, w = grid
    c = windows.shape[-1]
    x = windows.view(-1, h // wh, w // ww, wh, ww, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, h, w, c)
    if shift != (0, 0):
        x = torch.roll(x, shifts=(shift[0], shift[1]), dims=(1, 2))
    return x


def msa(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Windowed multi-head attention core: Softmax(Q K^T / sqrt(d) + B) V.

    q, k, v: (B_, heads, N, d); bias: (heads, N, N). Returns (B_, N, heads*d)
    with the heads concatenated (the caller owns any output projection).
    """
    if q.shape != k.shape or k.shape != v.shape:
        raise ValueError(f"q/k/v shapes differ: {q.shape} {k.shape} {v.shape}")
    d = q.shape[-1]
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d) + bias, dim=-1)
    out = attn @ v
    b_, heads, n, _ = out.shape
    return out.transpose(1, 2).reshape(b_, n, heads * d)


class RelativePositionBias(nn.Module):
    """Learnable attention bias indexed by in-window relative position."""

    def __init__(self, window: tuple[int, int], heads: int):
        super().__init__()
        wh, ww = window
        self.table = nn.Parameter(torch.zeros((2 * wh - 1) * (2 * ww - 1), heads))
        coords = torch.stack(
            torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")
        ).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :]
        index = (rel[0] + wh - 1) * (2 * ww - 1) + (rel[1] + ww - 1)
        self.register_buffer("index", index, persistent=False)

    def forward(self) -> torch.Tensor:
        n = self.index.shape[0]
        return self.table[self.index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)


class DenseDilatedConv(nn.Module):
    """Local multi-scale branch: 1x1 reduce, three densely concatenated
    depthwise-separable 3x3 convolutions with dilations 1/2/3, 1x1 expand.

    Operates on (B, C, H, W); every separable layer sees the concatenation of
    all preceding outputs and emits ``growth`` channels, so the expand layer
    receives 4*growth.
    """

    def __init__(self, dim: int, growth: int):
        super().__init__()
        self.reduce = nn.Conv2d(dim, growth, 1)
        self.depthwise = nn.ModuleList()
        self.pointwise = nn.ModuleList()
        for r in (1, 2, 3):
            ch = r * growth
            self.depthwise.append(
                nn.Conv2d(ch, ch, 3, padding=r, dilation=r, groups=ch)
            )
            self.pointwise.append(nn.Conv2d(ch, growth, 1))
        self.expand = nn.Conv2d(4 * growth, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [self.reduce(x)]
        for dw, pw in zip(self.depthwise, self.pointwise):
            feats.append(pw(dw(torch.cat(feats, dim=1))))
        return self.expand(torch.cat(feats, dim=1))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class WindowBlock(nn.Module):
    """One attention block: queries from the normalized tokens, keys/values
    from the dense-dilated branch, residual MLP after. ``shift`` selects
    plain vs shifted window partitioning (no attention mask: the cyclic seam
    is left unmasked by design)."""

    def __init__(
        self,
        dim: int,
        heads: int,
        window: tuple[int, int],
        shift: tuple[int, int],
        mlp_ratio: float,
        growth: int,
    ):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim, eps=1e-5)
        self.dcm = DenseDilatedConv(dim, growth)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.rel_bias = RelativePositionBias(window, heads)
        self.attn_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, eps=1e-5)
        self.mlp = Mlp(dim, mlp_ratio)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b_, n, c = x.shape
        return x.view(b_, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        t = self.norm1(x)
        q = self.q_proj(t)
        m = self.dcm(t.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        k = self.k_proj(m)
        v = self.v_proj(m)
        qw = self._split_heads(window_partition(q, self.window, self.shift))
        kw = self._split_heads(window_partition(k, self.window, self.shift))
        vw = self._split_heads(window_partition(v, self.window, self.shift))
        attn = self.attn_out(msa(qw, kw, vw, self.rel_bias()))
        y = x + window_reverse(attn, self.window, (h, w), self.shift)
        return y + self.mlp(self.norm2(y))


def _block_pair(dim, heads, window, mlp_ratio, growth) -> nn.ModuleList:
    shift = (window[0] // 2, window[1] // 2)
    return nn.ModuleList(
        [
            WindowBlock(dim, heads, window, (0, 0), mlp_ratio, growth),
            WindowBlock(dim, heads, window, shift, mlp_ratio, growth),
        ]
    )


class PatchEmbed(nn.Module):
    """Non-overlapping patches linearly projected to the base width."""

    def __init__(self, in_channels: int, dim: int, patch: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch, stride=patch)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.proj(image).permute(0, 2, 3, 1)


class PatchMerging(nn.Module):
    """Concatenate 2x2 neighbours (4C) and reduce to 2C, halving the grid."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduction = nn.Linear(4 * dim, 2 * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"grid {h}x{w} must be even to merge")
        quads = [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]]
        return self.reduction(torch.cat(quads, dim=-1))


class PatchExpanding(nn.Module):
    """Expand C to 2C and redistribute over a doubled grid at C/2."""

    def __init__(self, dim: int):
        super().__init__()
        self.expansion = nn.Linear(dim, 2 * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        t = self.expansion(x).view(b, h, w, 2, 2, c // 2)
        return t.permute(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, c // 2)


class FinalExpand(nn.Module):
    """Restore full pixel resolution from the last token grid, keeping C."""

    def __init__(self, dim: int, patch: int):
        super().__init__()
        self.patch = patch
        self.expansion = nn.Linear(dim, patch * patch * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        p = self.patch
        t = self.expansion(x).view(b, h, w, p, p, c)
        return t.permute(0, 1, 3, 2, 4, 5).reshape(b, p * h, p * w, c)


class SkipFusion(nn.Module):
    """Fuse encoder/decoder features of equal shape with a token-axis conv.

    Both inputs are permuted channel-major, concatenated to 2C, passed
    through a kernel-1 1-D convolution back to C, and permuted back.
    Encoder features occupy the first C input channels.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.fuse = nn.Conv1d(2 * dim, dim, kernel_size=1)

    def forward(self, x_enc: torch.Tensor, x_dec: torch.Tensor) -> torch.Tensor:
        if x_enc.shape != x_dec.shape:
            raise ValueError(f"skip shapes differ: {x_enc.shape} vs {x_dec.shape}")
        merged = torch.cat([x_enc.transpose(1, 2), x_dec.transpose(1, 2)], dim=1)
        return self.fuse(merged).transpose(1, 2)


class MSUnet(nn.Module):
    """Encoder / bottleneck / decoder of paired window blocks with fused skips,
    ending in flow and segmentation heads at full resolution."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        win = (c.window_h, c.window_w)
        self.patch_embed = PatchEmbed(c.in_channels, c.base_channels, c.patch_size)

        self.enc_stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s, pairs in enumerate(c.stage_depths):
            blocks = nn.ModuleList(
                _block_pair(c.channels(s), c.heads(s), win, c.mlp_ratio, c.growth(s))
                for _ in range(pairs)
            )
            self.enc_stages.append(blocks)
            self.merges.append(PatchMerging(c.channels(s)))

        deep = c.num_stages
        self.bottleneck = nn.ModuleList(
            _block_pair(c.channels(deep), c.heads(deep), win, c.mlp_ratio, c.growth(deep))
            for _ in range(c.bottleneck_pairs)
        )

        self.expands = nn.ModuleList()
        self.skips = nn.ModuleList()
        self.dec_stages = nn.ModuleList()
        for s in reversed(range(c.num_stages)):
            self.expands.append(PatchExpanding(c.channels(s + 1)))
            self.skips.append(SkipFusion(c.channels(s)))
            blocks = nn.ModuleList(
                _block_pair(c.channels(s), c.heads(s), win, c.mlp_ratio, c.growth(s))
                for _ in range(c.stage_depths[s])
            )
            self.dec_stages.append(blocks)

        self.final_expand = FinalExpand(c.base_channels, c.patch_size)
        # normalized features + a fixed gain let the flow head reach
        # pixel-scale offsets at the small training rate
        self.final_norm = nn.LayerNorm(c.base_channels, eps=1e-5)
        self.flow_head = nn.Conv2d(c.base_channels, c.flow_channels, 1)
        self.seg_head = nn.Conv2d(c.base_channels, c.flow_channels * c.seg_classes, 1)

    @staticmethod
    def _run_pairs(blocks: nn.ModuleList, x: torch.Tensor) -> torch.Tensor:
        for pair in blocks:
            for block in pair:
                x = block(x)
        return x

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Predict (flow, seg_logits) for one CxHxW image or a BxCxHxW batch.

        Flow is (B,)2xHxW in pixels; seg logits are (B,)2x3xHxW, one 3-way
        classifier per flow component.
        """
        single = image.ndim == 3
        if single:
            image = image.unsqueeze(0)
        cfg = self.config
        if image.shape[1:] != (cfg.in_channels, cfg.input_h, cfg.input_w):
            raise ValueError(
                f"expected input {cfg.in_channels}x{cfg.input_h}x{cfg.input_w}, "
                f"got {tuple(image.shape[1:])}"
            )
        x = self.patch_embed(image)
        skips = []
        for blocks, merge in zip(self.enc_stages, self.merges):
            x = self._run_pairs(blocks, x)
            skips.append(x)
            x = merge(x)
        x = self._run_pairs(self.bottleneck, x)
        for expand, skip_fuse, blocks, enc in zip(
            self.expands, self.skips, self.dec_stages, reversed(skips)
        ):
            x = expand(x)
            b, h, w, c = x.shape
            fused = skip_fuse(enc.reshape(b, h * w, c), x.reshape(b, h * w, c))
            x = self._run_pairs(blocks, fused.view(b, h, w, c))
        x = self.final_norm(self.final_expand(x))
        feats = x.permute(0, 3, 1, 2)
        flow = self.flow_head(feats) * cfg.flow_head_gain
        b, _, h, w = flow.shape
        seg = self.seg_head(feats).view(b, cfg.flow_channels, cfg.seg_classes, h, w)
        if single:
            return flow.squeeze(0), seg.squeeze(0)
        return flow, seg


def _trunc_normal_(tensor: torch.Tensor, std: float, gen: torch.Generator) -> None:
    # inverse-CDF sampling truncated at +/- 2 std, reproducible via `gen`
    lo = (1.0 + math.erf(-2.0 / math.sqrt(2.0))) / 2.0
    hi = (1.0 + math.erf(2.0 / math.sqrt(2.0))) / 2.0
    with torch.no_grad():
        tensor.uniform_(2 * lo - 1, 2 * hi - 1, generator=gen)
        tensor.erfinv_()
        tensor.mul_(std * math.sqrt(2.0))
        tensor.clamp_(-2 * std, 2 * std)


def init_weights(config: ModelConfig, seed: int) -> MSUnet:
    """Build the network with deterministic initialization.

    Linear/conv weights: truncated normal (std 0.02); biases and relative
    position bias tables: zero; layernorm: scale 1, shift 0. The same seed
    always yields bitwise-identical weights.
    """
    model = MSUnet(config)
    gen = torch.Generator().manual_seed(seed)
    for name, param in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if "rel_bias.table" in name:
                param.zero_()
            elif name.endswith("bias"):
                param.zero_()
            elif param.ndim == 1:  # layernorm scale
                param.fill_(1.0)
            else:
                _trunc_normal_(param, 0.02, gen)
    return model
