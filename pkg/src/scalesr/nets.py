"""U-Nets for the deterministic mean and the residual diffusion head.

The deterministic net runs its encoder on each context frame separately
(paired with topography), mixes frames with temporal attention at every
pixel and fuses the time axis into each skip connection. The diffusion net
is a plain 2-D U-Net with a learned step-embedding table and per-pixel
cross-attention onto the bicubic LR context.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

KINDS = ("det", "dif")
PAD_MODES = ("zeros", "circular")


@dataclass(frozen=True)
class UNetConfig:
    kind: str = "det"
    context_len: int = 4            # L
    out_frames: int = 1             # T
    base_channels: int = 16
    channel_mults: tuple = (1, 2, 2, 4)
    window_sizes: tuple = (3, 3, 1, 1, 1)
    heads: int = 4
    attention: bool = True
    pad_mode: str = "zeros"
    steps: int = 1000               # J, size of the step-embedding table
    emb_dim: int = 128
    zero_init_out: bool = True
    skip_bicubic: bool = False      # det only: add the last bicubic context frame to the output

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        object.__setattr__(self, "window_sizes", tuple(self.window_sizes))
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.pad_mode not in PAD_MODES:
            raise ValueError(f"pad_mode must be one of {PAD_MODES}")
        if len(self.window_sizes) != self.stages + 1:
            raise ValueError("need one window radius per stage plus the bottleneck")
        if min(self.window_sizes) < 0:
            raise ValueError("window radii must be >= 0")
        if self.context_len < 1 or self.out_frames < 1 or self.base_channels < 1:
            raise ValueError("context_len, out_frames and base_channels must be positive")
        for c in self.channels:
            if c % self.heads:
                raise ValueError(f"heads={self.heads} must divide every width, got {c}")

    @property
    def stages(self):
        return len(self.channel_mults)

    @property
    def channels(self):
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def in_channels(self):
        if self.kind == "det":
            return self.context_len + 1
        return 2 * self.out_frames + 1

    def to_dict(self):
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["window_sizes"] = list(self.window_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def groups_for(c):
    return math.gcd(8, c)


def _conv3(cin, cout, pad_mode, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode=pad_mode)


# ----------------------------------------------------------------- attention


def _split_heads(x, heads):
    # (M, S, C) -> (M, heads, S, d)
    m, s, c = x.shape
    return x.reshape(m, s, heads, c // heads).transpose(1, 2)


def dot_attention(q, k, v, heads, return_weights=False):
    """Scaled dot-product attention on token batches ``(M, S, C)``."""
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
    w = logits.softmax(dim=-1)
    out = (w @ vh).transpose(1, 2).reshape(q.shape[0], q.shape[1], -1)
    return (out, w) if return_weights else out


def windowed_attention(q, k, v, radius, heads, pad_mode="replicate"):
    """Each pixel of ``q`` attends to the ``(2r+1)**2`` neighbourhood of ``k``/``v``.

    Inputs are ``(N, C, H, W)``; borders are padded with ``pad_mode``.
    """
    n, c, h, w = q.shape
    d = c // heads
    size = 2 * radius + 1
    if radius:
        pad = (radius,) * 4
        k = F.pad(k, pad, mode=pad_mode)
        v = F.pad(v, pad, mode=pad_mode)
    kw = F.unfold(k, size).reshape(n, heads, d, size * size, h * w)
    vw = F.unfold(v, size).reshape(n, heads, d, size * size, h * w)
    qh = q.reshape(n, heads, d, 1, h * w)
    logits = (qh * kw).sum(dim=2) / math.sqrt(d)
    weights = logits.softmax(dim=2)
    out = (weights.unsqueeze(2) * vw).sum(dim=3)
    return out.reshape(n, c, h, w)


class SpatialAttention(nn.Module):
    """Windowed multi-head self-attention inside each frame (no norm, no residual)."""

    def __init__(self, channels, heads, radius, pad_mode="replicate"):
        super().__init__()
        self.heads = heads
        self.radius = radius
        self.pad_mode = pad_mode
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=1)
        return self.proj(windowed_attention(q, k, v, self.radius, self.heads, self.pad_mode))


class TemporalAttention(nn.Module):
    """Self-attention across the time axis at every pixel of ``(B, L, C, H, W)``."""

    def __init__(self, channels, heads, length):
        super().__init__()
        self.heads = heads
        self.pos = nn.Parameter(torch.zeros(length, channels))
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, return_weights=False):
        b, l, c, h, w = x.shape
        tokens = x.permute(0, 3, 4, 1, 2).reshape(b * h * w, l, c) + self.pos
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        out, weights = dot_attention(q, k, v, self.heads, return_weights=True)
        out = self.proj(out).reshape(b, h, w, l, c).permute(0, 3, 4, 1, 2)
        return (out, weights) if return_weights else out


class CrossAttention(nn.Module):
    """Per-pixel attention from features onto the ``L`` bicubic context values."""

    def __init__(self, channels, heads, length):
        super().__init__()
        self.heads = heads
        self.embed = nn.Linear(1, channels)
        self.pos = nn.Parameter(torch.zeros(length, channels))
        self.q = nn.Linear(channels, channels)
        self.kv = nn.Linear(channels, 2 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, context):
        # x: (B, C, H, W); context: (B, L, H, W) at the same resolution
        b, c, h, w = x.shape
        l = context.shape[1]
        q = self.q(x.permute(0, 2, 3, 1).reshape(b * h * w, 1, c))
        ctx = self.embed(context.permute(0, 2, 3, 1).reshape(b * h * w, l, 1)) + self.pos
        k, v = self.kv(ctx).chunk(2, dim=-1)
        out = self.proj(dot_attention(q, k, v, self.heads))
        return out.reshape(b, h, w, c).permute(0, 3, 1, 2)


# ----------------------------------------------------------------- blocks


class ResBlock(nn.Module):
    def __init__(self, cin, cout, pad_mode, emb_dim=None):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups_for(cin), cin)
        self.conv1 = _conv3(cin, cout, pad_mode)
        self.emb = nn.Linear(emb_dim, cout) if emb_dim else None
        self.norm2 = nn.GroupNorm(groups_for(cout), cout)
        self.conv2 = _conv3(cout, cout, pad_mode)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class NormAttention(nn.Module):
    """Pre-norm residual wrapper ``x + attn(norm(x))`` for 2-D feature maps."""

    def __init__(self, channels, attn):
        super().__init__()
        self.norm = nn.GroupNorm(groups_for(channels), channels)
        self.attn = attn

    def forward(self, x, *args):
        return x + self.attn(self.norm(x), *args)


class Upsample(nn.Module):
    def __init__(self, cin, cout, pad_mode):
        super().__init__()
        self.conv = _conv3(cin, cout, pad_mode)

    def forward(self, x, size):
        return self.conv(F.interpolate(x, size=size, mode="nearest"))


def _window_pad(cfg):
    return "circular" if cfg.pad_mode == "circular" else "replicate"


def _output_head(c0, t, pad_mode, zero_init):
    head = nn.Sequential(nn.GroupNorm(groups_for(c0), c0), nn.SiLU(), _conv3(c0, t, pad_mode))
    if zero_init:
        nn.init.zeros_(head[-1].weight)
        nn.init.zeros_(head[-1].bias)
    return head


# ----------------------------------------------------------------- networks


class DetUNet(nn.Module):
    """Mean predictor: ``(B, L+1, H, W)`` -> ``(B, T, H, W)``.

    The last input channel is topography; the first ``L`` are the bicubic
    context frames, oldest first.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        if cfg.kind != "det":
            raise ValueError("DetUNet needs a 'det' config")
        self.cfg = cfg
        pm, L = cfg.pad_mode, cfg.context_len
        ch = cfg.channels
        self.stem = _conv3(2, ch[0], pm)
        self.enc = nn.ModuleList()
        self.spatial = nn.ModuleList()
        self.temporal = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = ch[0]
        widths = list(ch) + [ch[-1]]
        for s, c in enumerate(widths):
            self.enc.append(ResBlock(prev, c, pm))
            if cfg.attention:
                self.spatial.append(NormAttention(
                    c, SpatialAttention(c, cfg.heads, cfg.window_sizes[s], _window_pad(cfg))))
                self.temporal.append(nn.ModuleDict({
                    "norm": nn.GroupNorm(groups_for(c), c),
                    "attn": TemporalAttention(c, cfg.heads, L)}))
            self.fuse.append(nn.Conv2d(L * c, c, 1))
            if s < cfg.stages:
                self.down.append(_conv3(c, c, pm, stride=2))
            prev = c
        self.mid = ResBlock(ch[-1], ch[-1], pm)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for s in reversed(range(cfg.stages)):
            cin = ch[-1] if s == cfg.stages - 1 else ch[s + 1]
            self.up.append(Upsample(cin, ch[s], pm))
            self.dec.append(ResBlock(2 * ch[s], ch[s], pm))
        self.head = _output_head(ch[0], cfg.out_frames, pm, cfg.zero_init_out)

    def _temporal(self, s, h, b):
        blk = self.temporal[s]
        n, c, y, x = h.shape
        seq = blk["norm"](h).reshape(b, n // b, c, y, x)
        return h + blk["attn"](seq).reshape(n, c, y, x)

    def forward(self, x):
        cfg = self.cfg
        b, cin, hh, ww = x.shape
        if cin != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {cin}")
        L = cfg.context_len
        frames = x[:, :L].reshape(b * L, 1, hh, ww)
        topo = x[:, L:].repeat_interleave(L, dim=0)
        h = self.stem(torch.cat([frames, topo], dim=1))
        skips = []
        for s in range(cfg.stages + 1):
            h = self.enc[s](h)
            if cfg.attention:
                h = self.spatial[s](h)
                h = self._temporal(s, h, b)
            n, c, y, xx = h.shape
            fused = self.fuse[s](h.reshape(b, L * c, y, xx))
            if s < cfg.stages:
                skips.append(fused)
                h = self.down[s](h)
        h = self.mid(fused)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            h = up(h, skip.shape[-2:])
            h = dec(torch.cat([h, skip], dim=1))
        out = self.head(h)
        if cfg.skip_bicubic:
            out = out + x[:, L - 1:L]
        return out


class StepEmbedding(nn.Module):
    """Learned ``J x dim`` table indexed by step ``j`` (1-based), then an MLP."""

    def __init__(self, steps, dim):
        super().__init__()
        self.table = nn.Embedding(steps, dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, j):
        return self.mlp(self.table(j - 1))


class DifUNet(nn.Module):
    """Velocity predictor for the residual chain.

    Input channels are ``[r_j (T), BI(x_t) (1), D (T)]``; the bicubic context
    ``(B, L, H, W)`` feeds cross-attention at every encoder stage.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        if cfg.kind != "dif":
            raise ValueError("DifUNet needs a 'dif' config")
        self.cfg = cfg
        # residuals are divided by this before noising and multiplied back after sampling
        self.register_buffer("residual_scale", torch.ones(()))
        pm, ch, E = cfg.pad_mode, cfg.channels, cfg.emb_dim
        self.step = StepEmbedding(cfg.steps, E)
        self.stem = _conv3(cfg.in_channels, ch[0], pm)
        self.enc = nn.ModuleList()
        self.spatial = nn.ModuleList()
        self.cross = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = ch[0]
        widths = list(ch) + [ch[-1]]
        for s, c in enumerate(widths):
            self.enc.append(ResBlock(prev, c, pm, E))
            if cfg.attention:
                self.spatial.append(NormAttention(
                    c, SpatialAttention(c, cfg.heads, cfg.window_sizes[s], _window_pad(cfg))))
                self.cross.append(NormAttention(
                    c, CrossAttention(c, cfg.heads, cfg.context_len)))
            if s < cfg.stages:
                self.down.append(_conv3(c, c, pm, stride=2))
            prev = c
        self.mid = ResBlock(ch[-1], ch[-1], pm, E)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for s in reversed(range(cfg.stages)):
            cin = ch[-1] if s == cfg.stages - 1 else ch[s + 1]
            self.up.append(Upsample(cin, ch[s], pm))
            self.dec.append(ResBlock(2 * ch[s], ch[s], pm, E))
        self.head = _output_head(ch[0], cfg.out_frames, pm, cfg.zero_init_out)

    def forward(self, r_j, j, cond):
        cfg = self.cfg
        x = torch.cat([r_j, cond.bicubic_last, cond.det_mean], dim=1)
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        if r_j.shape != cond.det_mean.shape:
            raise ValueError("noised residual and deterministic mean shapes differ")
        emb = self.step(j.to(torch.long))
        h = self.stem(x)
        context = cond.context
        skips = []
        for s in range(cfg.stages + 1):
            h = self.enc[s](h, emb)
            if cfg.attention:
                h = self.spatial[s](h)
                ctx = F.adaptive_avg_pool2d(context, h.shape[-2:])
                h = self.cross[s](h, ctx)
            if s < cfg.stages:
                skips.append(h)
                h = self.down[s](h)
        h = self.mid(h, emb)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            h = up(h, skip.shape[-2:])
            h = dec(torch.cat([h, skip], dim=1), emb)
        return self.head(h)


def build(cfg: UNetConfig) -> nn.Module:
    return DetUNet(cfg) if cfg.kind == "det" else DifUNet(cfg)


# ----------------------------------------------------------------- parameter count


def count_parameters(cfg: UNetConfig) -> int:
    """Closed-form trainable parameter count for a config."""
    def conv(cin, cout, k=3):
        return k * k * cin * cout + cout

    def gn(c):
        return 2 * c

    def res(cin, cout, emb=0):
        n = gn(cin) + conv(cin, cout) + gn(cout) + conv(cout, cout)
        if emb:
            n += emb * cout + cout
        if cin != cout:
            n += conv(cin, cout, 1)
        return n

    def spatial(c):
        return gn(c) + conv(c, 3 * c, 1) + conv(c, c, 1)

    L, T, E = cfg.context_len, cfg.out_frames, cfg.emb_dim
    ch = cfg.channels
    widths = list(ch) + [ch[-1]]
    emb = E if cfg.kind == "dif" else 0
    total = conv(cfg.in_channels if cfg.kind == "dif" else 2, ch[0])
    prev = ch[0]
    for s, c in enumerate(widths):
        total += res(prev, c, emb)
        if cfg.attention:
            total += spatial(c)
            if cfg.kind == "det":
                total += gn(c) + L * c + (c * 3 * c + 3 * c) + (c * c + c)
            else:
                total += gn(c) + 2 * c + L * c + (c * c + c) + (c * 2 * c + 2 * c) + (c * c + c)
        if cfg.kind == "det":
            total += conv(L * c, c, 1)
        if s < cfg.stages:
            total += conv(c, c)
        prev = c
    total += res(ch[-1], ch[-1], emb)
    for s in reversed(range(cfg.stages)):
        cin = ch[-1] if s == cfg.stages - 1 else ch[s + 1]
        total += conv(cin, ch[s]) + res(2 * ch[s], ch[s], emb)
    total += gn(ch[0]) + conv(ch[0], T)
    if cfg.kind == "dif":
        total += cfg.steps * E + 2 * (E * E + E)
    return total


# ----------------------------------------------------------------- weight files

MAGIC = b"SCSRWGT\x00"
VERSION = 1


class WeightFileError(ValueError):
    """Unreadable or corrupt weight file."""


class ConfigMismatchError(WeightFileError):
    """Weight file was written for a different network configuration."""


def weights_to_bytes(model: nn.Module, cfg: UNetConfig) -> bytes:
    state = model.state_dict()
    manifest = [[name, list(t.shape)] for name, t in state.items()]
    payload = b"".join(
        t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        for t in state.values())
    header = json.dumps({
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "manifest": manifest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }, sort_keys=True).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(header)) + header + payload


def save_weights(path, model, cfg):
    data = weights_to_bytes(model, cfg)
    with open(path, "wb") as fh:
        fh.write(data)


def read_weights(data: bytes, expected: UNetConfig | None = None):
    """Parse a weight blob into ``(config, {name: float32 array})``."""
    buf = io.BytesIO(data)
    if buf.read(len(MAGIC)) != MAGIC:
        raise WeightFileError("bad magic, not a weight file")
    try:
        version, hlen = struct.unpack("<HI", buf.read(6))
        header = json.loads(buf.read(hlen))
    except (struct.error, ValueError) as exc:
        raise WeightFileError("corrupt header") from exc
    if version != VERSION:
        raise WeightFileError(f"unsupported version {version}")
    cfg = UNetConfig.from_dict(header["config"])
    if cfg.digest() != header["config_hash"]:
        raise ConfigMismatchError("stored config hash does not match stored config")
    if expected is not None and expected.digest() != header["config_hash"]:
        raise ConfigMismatchError("weights were saved for a different config")
    payload = buf.read()
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise WeightFileError("payload checksum mismatch")
    arrays, offset = {}, 0
    for name, shape in header["manifest"]:
        n = int(np.prod(shape, dtype=np.int64))
        chunk = payload[offset:offset + 4 * n]
        if len(chunk) != 4 * n:
            raise WeightFileError("truncated payload")
        arrays[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        offset += 4 * n
    if offset != len(payload):
        raise WeightFileError("trailing bytes after payload")
    return cfg, arrays


def load_weights(path, expected: UNetConfig | None = None) -> tuple[nn.Module, UNetConfig]:
    with open(path, "rb") as fh:
        cfg, arrays = read_weights(fh.read(), expected)
    model = build(cfg)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return model, cfg
