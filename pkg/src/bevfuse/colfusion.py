"""Cross-modality shared-attention fusion and the BEV decoder.

The fusion computes one attention matrix per modality (from that modality's
query/key projections) and applies each matrix to BOTH modalities' value
paths, yielding four refined token sets from exactly two attention matrices.
The merge projection after the heads is zero-initialized, so every block
starts as an identity over its residual input.

Tokens carry the same channel count as the BEV features: a patch embedding
maps each non-overlapping p x p patch (p*p*C values) down to C channels.
At p = 1 with identity-initialized embeddings tokenize/detokenize is an
exact round trip; for p > 1 the default init is patch-mean / broadcast, so
an untrained codec acts as a p x p box filter.
"""

from __future__ import annotations

import numpy as np

from . import ndops
from .ndops import Parameter, Tensor, functional as F

__all__ = [
    "TokenCodec",
    "AttentionBlock",
    "cross_modal_attend",
    "FusionWeights",
    "BevFpd",
    "unify",
    "SegmentationHead",
]


class TokenCodec(ndops.Module):
    """Linear patch embedding and its un-embedding."""

    def __init__(self, channels: int, patch: int):
        super().__init__()
        self.channels = channels
        self.patch = patch
        p, c = patch, channels
        embed = np.zeros((p * p * c, c), ndops.default_dtype())
        unembed = np.zeros((c, p * p * c), ndops.default_dtype())
        for ch in range(c):
            for pi in range(p):
                for pj in range(p):
                    k = ch * p * p + pi * p + pj
                    embed[k, ch] = 1.0 / (p * p)
                    unembed[ch, k] = 1.0
        self.embed = Parameter(embed)
        self.unembed = Parameter(unembed)

    def tokenize(self, z: Tensor) -> Tensor:
        """(B, C, H, W) -> (B, T, C) with T = (H/p)(W/p)."""
        B, C, H, W = z.shape
        p = self.patch
        if H % p or W % p:
            raise ValueError(f"patch size {p} does not divide spatial dims {H}x{W}")
        hp, wp = H // p, W // p
        x = F.reshape(z, (B, C, hp, p, wp, p))
        x = F.transpose(x, (0, 2, 4, 1, 3, 5))
        x = F.reshape(x, (B, hp * wp, C * p * p))
        return F.matmul(x, self.embed)

    def detokenize(self, tokens: Tensor, hw: tuple[int, int]) -> Tensor:
        """(B, T, C) -> (B, C, H, W)."""
        H, W = hw
        p = self.patch
        hp, wp = H // p, W // p
        B = tokens.shape[0]
        x = F.matmul(tokens, self.unembed)
        x = F.reshape(x, (B, hp, wp, self.channels, p, p))
        x = F.transpose(x, (0, 3, 1, 4, 2, 5))
        return F.reshape(x, (B, self.channels, H, W))


class AttentionBlock(ndops.Module):
    """Per-modality Q/K and V projections with shared attention application.

    ``attn_softmax=False`` reproduces the literal scaled-dot-product form
    without row normalization.
    """

    def __init__(self, rng, channels: int, heads: int, attn_softmax: bool = True):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by head count {heads}")
        self.channels = channels
        self.heads = heads
        self.attn_softmax = attn_softmax
        self.scale = 1.0 / np.sqrt(channels // heads)
        for mod in ("i", "p"):
            setattr(self, f"q_{mod}", ndops.Linear(rng, channels, channels, bias=False))
            setattr(self, f"k_{mod}", ndops.Linear(rng, channels, channels, bias=False))
            setattr(self, f"v_{mod}", ndops.Linear(rng, channels, channels, bias=False))
            setattr(self, f"merge_{mod}", ndops.Linear(rng, channels, channels, zero_init=True))
        # forward-pass instrumentation for the shared-attention property
        self.attn_computed = 0
        self.attn_used: dict[str, int] = {}

    def _split_heads(self, t: Tensor) -> Tensor:
        B, T, C = t.shape
        h = self.heads
        return F.transpose(F.reshape(t, (B, T, h, C // h)), (0, 2, 1, 3))

    def _merge_heads(self, t: Tensor) -> Tensor:
        B, h, T, d = t.shape
        return F.reshape(F.transpose(t, (0, 2, 1, 3)), (B, T, h * d))

    def attention_matrix(self, tokens: Tensor, mod: str) -> Tensor:
        """Row-normalized (B, heads, T, T) attention from modality ``mod``."""
        q = self._split_heads(getattr(self, f"q_{mod}")(tokens))
        k = self._split_heads(getattr(self, f"k_{mod}")(tokens))
        logits = F.scale(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), self.scale)
        self.attn_computed += 1
        if self.attn_softmax:
            return F.softmax(logits, axis=-1)
        return logits

    def apply_attention(self, attn: Tensor, value_tokens: Tensor, value_mod: str) -> Tensor:
        """A_a . V_b, heads merged, zero-init projection, residual from b."""
        v = self._split_heads(getattr(self, f"v_{value_mod}")(value_tokens))
        mixed = self._merge_heads(F.matmul(attn, v))
        return F.add(getattr(self, f"merge_{value_mod}")(mixed), value_tokens)

    def fuse(self, tok_i: Tensor, tok_p: Tensor):
        """All four refined token sets from exactly two attention matrices.

        Returns ((z_ii, z_ip, z_pi, z_pp), attn) where z_xy uses modality x's
        values/residual and modality y's attention.
        """
        if tok_i.shape != tok_p.shape:
            raise ValueError(
                f"modality token shapes differ: {tok_i.shape} vs {tok_p.shape}"
            )
        self.attn_computed = 0
        a_i = self.attention_matrix(tok_i, "i")
        a_p = self.attention_matrix(tok_p, "p")
        z_ii = self.apply_attention(a_i, tok_i, "i")
        z_ip = self.apply_attention(a_p, tok_i, "i")
        z_pi = self.apply_attention(a_i, tok_p, "p")
        z_pp = self.apply_attention(a_p, tok_p, "p")
        self.attn_used = {"z_ii": id(a_i), "z_ip": id(a_p), "z_pi": id(a_i), "z_pp": id(a_p)}
        return (z_ii, z_ip, z_pi, z_pp), {"i": a_i, "p": a_p}


def cross_modal_attend(z_a_tokens: Tensor, z_b_tokens: Tensor, block: AttentionBlock,
                       a_mod: str, b_mod: str) -> Tensor:
    """Single refined feature: attention from modality a, values/residual from b."""
    attn = block.attention_matrix(z_a_tokens, a_mod)
    return block.apply_attention(attn, z_b_tokens, b_mod)


class FusionWeights(ndops.Module):
    """Four 1x1 convs, one per refined feature, applied before summation."""

    def __init__(self, rng, channels: int):
        super().__init__()
        for name in ("w_ii", "w_ip", "w_pi", "w_pp"):
            setattr(self, name, ndops.Conv2d(rng, channels, channels, 1))

    def forward(self, z_ii, z_ip, z_pi, z_pp) -> Tensor:
        s = F.add(self.w_ii(z_ii), self.w_ip(z_ip))
        s = F.add(s, self.w_pi(z_pi))
        return F.add(s, self.w_pp(z_pp))


class BevFpd(ndops.Module):
    """Three-level downsample/upsample pyramid with lateral connections."""

    def __init__(self, rng, channels: int, out_channels: int):
        super().__init__()
        c = channels
        self.enc1 = ndops.Conv2d(rng, c, c, 3, padding=1)
        self.bn1 = ndops.BatchNorm2d(c)
        self.enc2 = ndops.Conv2d(rng, c, c, 3, padding=1)
        self.bn2 = ndops.BatchNorm2d(c)
        self.enc3 = ndops.Conv2d(rng, c, c, 3, padding=1)
        self.bn3 = ndops.BatchNorm2d(c)
        self.lat1 = ndops.Conv2d(rng, c, c, 1)
        self.lat2 = ndops.Conv2d(rng, c, c, 1)
        self.lat3 = ndops.Conv2d(rng, c, c, 1)
        self.smooth = ndops.Conv2d(rng, c, out_channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        d1 = F.relu(self.bn1(self.enc1(x)))
        d2 = F.relu(self.bn2(self.enc2(F.max_pool2x2(d1))))
        d3 = F.relu(self.bn3(self.enc3(F.max_pool2x2(d2))))
        m2 = F.add(self.lat2(d2), F.upsample2x(self.lat3(d3)))
        m1 = F.add(self.lat1(d1), F.upsample2x(m2))
        return self.smooth(m1)


def unify(z_ii, z_ip, z_pi, z_pp, weights: FusionWeights, g_varphi: BevFpd) -> Tensor:
    """Weighted sum of the four refined features, decoded by the pyramid."""
    return g_varphi(weights(z_ii, z_ip, z_pi, z_pp))


class SegmentationHead(ndops.Module):
    """Two-conv head emitting per-cell, per-class logits."""

    def __init__(self, rng, channels: int, n_classes: int):
        super().__init__()
        self.conv = ndops.Conv2d(rng, channels, channels, 3, padding=1)
        self.bn = ndops.BatchNorm2d(channels)
        self.cls = ndops.Conv2d(rng, channels, n_classes, 1)

    def forward(self, z: Tensor) -> Tensor:
        return self.cls(F.relu(self.bn(self.conv(z))))
