"""Architectural building blocks of the MobileUtr encoder/decoder."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigurationError
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Linear, Module
from .tensor import Tensor


def adaptive_kernel(mean_diameter: float, downsample_layers: int,
                    max_extent: Optional[int] = None) -> int:
    """LocalAgg kernel size from the mean lesion diameter.

    ``round(D / 2**(n+1))``, bumped to the next odd number and clamped to at
    least 3. With ``max_extent`` the result is also capped to the largest odd
    value not exceeding the feature-map extent.
    """
    if not mean_diameter > 0:
        raise ConfigurationError(f"mean_diameter must be positive, got {mean_diameter}")
    if downsample_layers < 1:
        raise ConfigurationError(f"downsample_layers must be >= 1, got {downsample_layers}")
    k = int(round(mean_diameter / 2 ** (downsample_layers + 1)))
    if k % 2 == 0:
        k += 1
    k = max(k, 3)
    if max_extent is not None and k > max_extent:
        k = max(3, max_extent if max_extent % 2 else max_extent - 1)
    return k


class ConvBNAct(Module):
    """conv -> BN -> activation (the stem, channel expansions and decoder up-convs)."""

    def __init__(self, cin, cout, kernel=3, act="gelu", rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return ops.gelu(y) if self.act == "gelu" else ops.relu(y)


class ConvUtrBlock(Module):
    """Transformer-shaped CNN block.

    y   = BN(GELU(DWConv(x))) + x
    z   = BN(GELU(PW(y)))            # C -> 4C
    out = BN(GELU(PW(z))) + y        # 4C -> C
    """

    def __init__(self, channels: int, kernel: int = 3, rng=None, dtype=np.float32):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigurationError(f"ConvUtr kernel must be odd, got {kernel}")
        self.channels, self.kernel = channels, kernel
        hidden = 4 * channels
        self.dw = Conv2d(channels, channels, kernel, groups=channels, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(channels, dtype=dtype)
        self.pw1 = Conv2d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(hidden, dtype=dtype)
        self.pw2 = Conv2d(hidden, channels, 1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ConfigurationError(f"ConvUtr expects {self.channels} channels, got {x.shape[1]}")
        y = self.bn1(ops.gelu(self.dw(x))) + x
        z = self.bn2(ops.gelu(self.pw1(y)))
        return self.bn3(ops.gelu(self.pw2(z))) + y


class MultiHeadSelfAttention(Module):
    """Scaled dot-product MHSA over tokens shaped (N, T, C)."""

    def __init__(self, dim: int, heads: int, rng=None, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"embedding dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng=rng, dtype=dtype)
        self.k = Linear(dim, dim, rng=rng, dtype=dtype)
        self.v = Linear(dim, dim, rng=rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng=rng, dtype=dtype)
        self.last_attention: Optional[np.ndarray] = None

    def _split(self, t: Tensor, n: int, tokens: int) -> Tensor:
        return t.reshape(n, tokens, self.heads, self.dim // self.heads).permute(0, 2, 1, 3)

    def forward(self, x: Tensor) -> Tensor:
        n, tokens, _ = x.shape
        d = self.dim // self.heads
        q = self._split(self.q(x), n, tokens)
        k = self._split(self.k(x), n, tokens)
        v = self._split(self.v(x), n, tokens)
        scores = ops.matmul(q, k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
        attn = ops.softmax(scores, axis=-1)
        self.last_attention = attn.data
        out = ops.matmul(attn, v).permute(0, 2, 1, 3).reshape(n, tokens, self.dim)
        return self.proj(out)


class FeedForward(Module):
    def __init__(self, dim: int, rng=None, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(dim, 4 * dim, rng=rng, dtype=dtype)
        self.fc2 = Linear(4 * dim, dim, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


def _to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).permute(0, 2, 1)


def _to_map(t: Tensor, h: int, w: int) -> Tensor:
    n, _, c = t.shape
    return t.permute(0, 2, 1).reshape(n, c, h, w)


class TransformerBlock(Module):
    """Pre-norm Transformer block applied to every spatial position of a map."""

    def __init__(self, dim: int, heads: int = 4, rng=None, dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        _, c, h, w = x.shape
        if c != self.attn.dim:
            raise ConfigurationError(f"Transformer block expects {self.attn.dim} channels, got {c}")
        t = _to_tokens(x)
        t = t + self.attn(self.norm1(t))
        t = t + self.ffn(self.norm2(t))
        return _to_map(t, h, w)


class LGLBlock(Module):
    """Local aggregation -> global sparse attention -> local propagation.

    ``local_kernel`` is the LocalAgg depthwise kernel; ``stride`` selects the
    sparse token grid and is also the kernel/stride of the propagating
    transposed conv.
    """

    def __init__(self, dim: int, local_kernel: int = 9, stride: int = 2, heads: int = 4,
                 rng=None, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"LGL dim {dim} not divisible by {heads} heads")
        self.dim, self.stride = dim, stride
        self.norm1 = LayerNorm(dim, axis=1, dtype=dtype)
        self.agg_dw = Conv2d(dim, dim, local_kernel, groups=dim, rng=rng, dtype=dtype)
        self.agg_pw = Conv2d(dim, dim, 1, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, axis=1, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng=rng, dtype=dtype)
        self.propagate = ConvTranspose2d(dim, dim, stride, rng=rng, dtype=dtype)
        self.norm3 = LayerNorm(dim, axis=1, dtype=dtype)
        self.ffn_in = Conv2d(dim, 4 * dim, 1, rng=rng, dtype=dtype)
        self.ffn_out = Conv2d(4 * dim, dim, 1, rng=rng, dtype=dtype)

    def local_aggregation(self, x: Tensor) -> Tensor:
        return x + self.agg_pw(self.agg_dw(self.norm1(x)))

    def global_sparse_attention(self, x: Tensor) -> Tensor:
        """Dense MHSA over the stride-r token grid; returns the sparse map."""
        s = ops.subsample(self.norm2(x), self.stride)
        _, _, h, w = s.shape
        return _to_map(self.attn(_to_tokens(s)), h, w)

    def forward(self, x: Tensor) -> Tensor:
        _, c, h, w = x.shape
        if c != self.dim:
            raise ConfigurationError(f"LGL block expects {self.dim} channels, got {c}")
        if h % self.stride or w % self.stride:
            raise ConfigurationError(f"sparse stride {self.stride} does not divide {h}x{w}")
        x1 = self.local_aggregation(x)
        x3 = x1 + self.propagate(self.global_sparse_attention(x1))
        return x3 + self.ffn_out(ops.gelu(self.ffn_in(self.norm3(x3))))


class SkipFusion(Module):
    """Max-pool the encoder skip, concatenate, then two 3x3 conv -> ReLU -> BN."""

    def __init__(self, dec_channels: int, enc_channels: int, out_channels: int, rng=None,
                 dtype=np.float32):
        super().__init__()
        self.dec_channels, self.enc_channels = dec_channels, enc_channels
        self.conv1 = Conv2d(dec_channels + enc_channels, out_channels, 3, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_channels, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, dec: Tensor, enc: Tensor) -> Tensor:
        if enc.shape[2] != 2 * dec.shape[2] or enc.shape[3] != 2 * dec.shape[3]:
            raise ConfigurationError(
                f"skip feature {enc.shape[2:]} must be exactly 2x the decoder feature {dec.shape[2:]}")
        x = ops.concat([dec, ops.maxpool2d(enc)], axis=1)
        x = self.bn1(ops.relu(self.conv1(x)))
        return self.bn2(ops.relu(self.conv2(x)))


class DecoderStage(Module):
    """Bilinear 2x upsample -> 3x3 conv -> BN -> ReLU, then optional skip fusion."""

    def __init__(self, cin: int, cout: int, skip_channels: Optional[int] = None, rng=None,
                 dtype=np.float32):
        super().__init__()
        self.up = ConvBNAct(cin, cout, 3, act="relu", rng=rng, dtype=dtype)
        self.fuse = SkipFusion(cout, skip_channels, cout, rng=rng, dtype=dtype) if skip_channels else None

    def forward(self, x: Tensor, skip: Optional[Tensor] = None) -> Tensor:
        x = self.up(ops.bilinear_upsample2x(x))
        if self.fuse is not None:
            if skip is None:
                raise ConfigurationError("decoder stage built with a skip fusion needs a skip tensor")
            x = self.fuse(x, skip)
        return x
