"""Deterministic toy 3D U-Net denoiser with named feature taps.

Spatial processing treats the frame axis as a batch; an optional temporal
attention layer mixes information across frames per spatial token. Weights
are drawn from counter-based streams keyed by (seed, parameter path), so a
config + seed pair always rebuilds bitwise-identical weights. Every spatial
self-attention and residual unit is addressable for capture or override.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import rng, rtd
from . import tensor as tv
from .tensor import Tensor, concat, conv2d, matmul, softmax, upsample2x

KINDS = ("residual_hidden", "query", "key", "value", "attention_map")
_KIND_SHORT = {"residual_hidden": "res", "query": "q", "key": "k", "value": "v",
               "attention_map": "map"}
_SHORT_KIND = {v: k for k, v in _KIND_SHORT.items()}


class AddressError(ValueError):
    """A tap address does not resolve on this backbone."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TapAddress:
    stage: str          # down | mid | up
    block_index: int
    kind: str           # see KINDS
    layer_index: int

    def __str__(self) -> str:
        return f"{self.stage}.{self.block_index}.{_KIND_SHORT[self.kind]}.{self.layer_index}"


def parse_tap(text: str) -> TapAddress:
    m = re.fullmatch(r"(down|mid|up)\.(\d+)\.(res|q|k|v|map)\.(\d+)", text.strip())
    if not m:
        raise AddressError(f"cannot parse tap address {text!r}")
    return TapAddress(m.group(1), int(m.group(2)), _SHORT_KIND[m.group(3)], int(m.group(4)))


@dataclass
class FeatureBundle:
    timestep: int
    taps: dict[TapAddress, Tensor] = field(default_factory=dict)


@dataclass
class BackboneConfig:
    latent_channels: int = 4
    base_width: int = 32
    num_down_blocks: int = 3
    attn_heads: int = 4
    frames: int = 4
    height: int = 16
    width: int = 16
    seed: int = 0
    temporal_enabled: bool = True
    cond_dim: int = 32
    cond_tokens: int = 4
    norm_groups: int = 8
    temporal_out_scale: float = 0.1

    def validate(self) -> None:
        div = 2 ** (self.num_down_blocks - 1)
        if self.height % div or self.width % div:
            raise ConfigError(
                f"height/width ({self.height}x{self.width}) must be divisible "
                f"by 2^(num_down_blocks-1) = {div}")
        if self.base_width % self.attn_heads:
            raise ConfigError("base_width must be divisible by attn_heads")
        if self.base_width % self.norm_groups:
            raise ConfigError("base_width must be divisible by norm_groups")

    def to_flat(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_flat(cls, text: str) -> "BackboneConfig":
        kwargs = {}
        casts = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            if key not in casts:
                raise ConfigError(f"unknown config key {key!r}")
            if casts[key] == "bool":
                kwargs[key] = val == "True"
            elif casts[key] == "float":
                kwargs[key] = float(val)
            else:
                kwargs[key] = int(val)
        return cls(**kwargs)


# Sentinel override: replace frames 2..f of a K/V site with its frame-1 value.
PROPAGATE_FIRST_FRAME = "propagate_first_frame"

OverrideValue = "Tensor | str | Callable[[Tensor], Tensor]"


class _Pass:
    """Per-forward bookkeeping: requested taps, overrides, captured values."""

    def __init__(self, taps, overrides, temporal: bool):
        self.taps = frozenset(taps or ())
        self.overrides = dict(overrides or {})
        self.temporal = temporal
        self.captured: dict[TapAddress, Tensor] = {}

    def visit(self, addr: TapAddress, live: Tensor) -> Tensor:
        value = live
        ov = self.overrides.get(addr)
        if ov is not None:
            if addr.kind == "attention_map":
                raise AddressError("attention_map taps are capture-only")
            if isinstance(ov, str) and ov == PROPAGATE_FIRST_FRAME:
                first = live[0:1]
                value = concat([first] * live.shape[0], axis=0)
            elif callable(ov):
                value = ov(live)
            else:
                value = ov
            if value.shape != live.shape:
                raise AddressError(
                    f"override at {addr} has shape {value.shape}, site needs {live.shape}")
        if addr in self.taps:
            self.captured[addr] = value
        return value


def _sinusoidal_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class Backbone:
    def __init__(self, cfg: BackboneConfig, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        w = cfg.base_width
        self.widths = [w * 2 ** i for i in range(cfg.num_down_blocks)]
        self.time_dim = 2 * w
        self._build()
        self.addresses = frozenset(self._enumerate_addresses())

    # -- parameter construction ---------------------------------------------

    def _param(self, path: str, shape, fan_in: int, scale: float = 1.0) -> Tensor:
        vals = rng.normal(self.cfg.seed, path, shape, scale=scale / math.sqrt(fan_in))
        t = Tensor(vals, dtype=self.dtype)
        self.params[path] = t
        return t

    def _const(self, path: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, dtype=self.dtype)
        self.params[path] = t
        return t

    def _add_conv(self, path: str, cin: int, cout: int, k: int = 3):
        self._param(f"{path}.weight", (cout, cin, k, k), cin * k * k)
        self._const(f"{path}.bias", np.zeros(cout))

    def _add_linear(self, path: str, cin: int, cout: int, scale: float = 1.0):
        self._param(f"{path}.weight", (cin, cout), cin, scale=scale)
        self._const(f"{path}.bias", np.zeros(cout))

    def _add_norm(self, path: str, ch: int):
        self._const(f"{path}.gamma", np.ones(ch))
        self._const(f"{path}.beta", np.zeros(ch))

    def _add_res(self, path: str, cin: int, cout: int):
        self._add_norm(f"{path}.norm1", cin)
        self._add_conv(f"{path}.conv1", cin, cout)
        self._add_linear(f"{path}.temb", self.time_dim, cout)
        self._add_norm(f"{path}.norm2", cout)
        self._add_conv(f"{path}.conv2", cout, cout)
        if cin != cout:
            self._add_conv(f"{path}.skip", cin, cout, k=1)

    def _add_attn(self, path: str, ch: int):
        cfg = self.cfg
        self._add_norm(f"{path}.norm_s", ch)
        for name in ("q", "k", "v", "o"):
            self._add_linear(f"{path}.spatial.{name}", ch, ch)
        self._add_norm(f"{path}.norm_x", ch)
        self._add_linear(f"{path}.cross.q", ch, ch)
        self._add_linear(f"{path}.cross.k", cfg.cond_dim, cfg.cond_tokens * ch)
        self._add_linear(f"{path}.cross.v", cfg.cond_dim, cfg.cond_tokens * ch)
        self._add_linear(f"{path}.cross.o", ch, ch)
        self._add_norm(f"{path}.norm_t", ch)
        for name in ("q", "k", "v"):
            self._add_linear(f"{path}.temporal.{name}", ch, ch)
        self._add_linear(f"{path}.temporal.o", ch, ch, scale=cfg.temporal_out_scale)

    def _build(self):
        cfg = self.cfg
        ws = self.widths
        self._add_linear("time.fc1", self.time_dim, self.time_dim)
        self._add_linear("time.fc2", self.time_dim, self.time_dim)
        self._add_conv("stem", cfg.latent_channels, ws[0])
        prev = ws[0]
        for i, ch in enumerate(ws):
            self._add_res(f"down.{i}.res.0", prev, ch)
            self._add_attn(f"down.{i}.attn.0", ch)
            prev = ch
        self._add_res("mid.res.0", prev, prev)
        self._add_attn("mid.attn.0", prev)
        self._add_res("mid.res.1", prev, prev)
        for i in range(cfg.num_down_blocks):
            skip = ws[cfg.num_down_blocks - 1 - i]
            ch = skip
            self._add_res(f"up.{i}.res.0", prev + skip, ch)
            self._add_attn(f"up.{i}.attn.0", ch)
            self._add_res(f"up.{i}.res.1", ch, ch)
            self._add_attn(f"up.{i}.attn.1", ch)
            prev = ch
        self._add_norm("out.norm", prev)
        self._add_conv("out.conv", prev, cfg.latent_channels)

    def _enumerate_addresses(self):
        n = self.cfg.num_down_blocks
        for i in range(n):
            yield TapAddress("down", i, "residual_hidden", 0)
            for kind in ("query", "key", "value", "attention_map"):
                yield TapAddress("down", i, kind, 0)
        for j in range(2):
            yield TapAddress("mid", 0, "residual_hidden", j)
        for kind in ("query", "key", "value", "attention_map"):
            yield TapAddress("mid", 0, kind, 0)
        for i in range(n):
            for j in range(2):
                yield TapAddress("up", i, "residual_hidden", j)
                for kind in ("query", "key", "value", "attention_map"):
                    yield TapAddress("up", i, kind, j)

    def spatial_attention_sites(self, kind: str) -> list[TapAddress]:
        return sorted(a for a in self.addresses if a.kind == kind)

    def grid_shape(self, addr: TapAddress) -> tuple[int, int]:
        """Spatial resolution at a tap site."""
        cfg = self.cfg
        n = cfg.num_down_blocks
        if addr.stage == "down":
            level = addr.block_index
        elif addr.stage == "mid":
            level = n - 1
        else:
            level = n - 1 - addr.block_index
        return cfg.height // 2 ** level, cfg.width // 2 ** level

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for path in sorted(self.params):
            h.update(path.encode())
            h.update(np.ascontiguousarray(self.params[path].data, dtype="<f4").tobytes())
        return h.hexdigest()

    # -- layers ---------------------------------------------------------------

    def _norm(self, path: str, x: Tensor) -> Tensor:
        """Group normalization over [B,C,H,W]."""
        B, C, H, W = x.shape
        g = min(self.cfg.norm_groups, C)
        xn = tv.normalize(x.reshape(B, g, C // g, H, W), axis=(2, 3, 4))
        xn = xn.reshape(B, C, H, W)
        gamma = self.params[f"{path}.gamma"].reshape(1, C, 1, 1)
        beta = self.params[f"{path}.beta"].reshape(1, C, 1, 1)
        return xn * gamma + beta

    def _ln(self, path: str, x: Tensor) -> Tensor:
        """Layer normalization over the channel axis of [B,T,C]."""
        C = x.shape[-1]
        xn = tv.normalize(x, axis=-1)
        return xn * self.params[f"{path}.gamma"].reshape(1, 1, C) \
            + self.params[f"{path}.beta"].reshape(1, 1, C)

    def _linear(self, path: str, x: Tensor) -> Tensor:
        w = self.params[f"{path}.weight"]
        b = self.params[f"{path}.bias"]
        return matmul(x, w) + b.reshape((1,) * (x.ndim - 1) + (b.shape[0],))

    def _conv(self, path: str, x: Tensor) -> Tensor:
        return conv2d(x, self.params[f"{path}.weight"], self.params[f"{path}.bias"])

    def _res(self, path: str, x: Tensor, temb: Tensor) -> Tensor:
        h = self._conv(f"{path}.conv1", tv.silu(self._norm(f"{path}.norm1", x)))
        tb = self._linear(f"{path}.temb", tv.silu(temb))
        h = h + tb.reshape(1, h.shape[1], 1, 1)
        h = self._conv(f"{path}.conv2", tv.silu(self._norm(f"{path}.norm2", h)))
        if f"{path}.skip.weight" in self.params:
            x = self._conv(f"{path}.skip", x)
        return h + x

    def _heads_split(self, x: Tensor) -> Tensor:
        B, T, C = x.shape
        h = self.cfg.attn_heads
        return x.reshape(B, T, h, C // h).transpose(0, 2, 1, 3)

    def _heads_merge(self, x: Tensor) -> Tensor:
        B, h, T, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, h * d)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor):
        d = q.shape[-1]
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
        amap = softmax(scores, axis=-1)
        return matmul(amap, v), amap

    def _spatial_attn(self, path: str, x: Tensor, stage: str, block: int,
                      layer: int, p: _Pass) -> Tensor:
        xn = self._ln(f"{path}.norm_s", x)
        q = self._linear(f"{path}.spatial.q", xn)
        k = self._linear(f"{path}.spatial.k", xn)
        v = self._linear(f"{path}.spatial.v", xn)
        q = p.visit(TapAddress(stage, block, "query", layer), q)
        k = p.visit(TapAddress(stage, block, "key", layer), k)
        v = p.visit(TapAddress(stage, block, "value", layer), v)
        out, amap = self._attend(self._heads_split(q), self._heads_split(k),
                                 self._heads_split(v))
        p.visit(TapAddress(stage, block, "attention_map", layer), amap)
        return x + self._linear(f"{path}.spatial.o", self._heads_merge(out))

    def _cross_attn(self, path: str, x: Tensor, cond: Tensor) -> Tensor:
        B, T, C = x.shape
        n = self.cfg.cond_tokens
        xn = self._ln(f"{path}.norm_x", x)
        q = self._linear(f"{path}.cross.q", xn)
        cond2 = cond.reshape(1, 1, self.cfg.cond_dim)
        k = self._linear(f"{path}.cross.k", cond2).reshape(1, n, C)
        v = self._linear(f"{path}.cross.v", cond2).reshape(1, n, C)
        k = concat([k] * B, axis=0)
        v = concat([v] * B, axis=0)
        out, _ = self._attend(self._heads_split(q), self._heads_split(k),
                              self._heads_split(v))
        return x + self._linear(f"{path}.cross.o", self._heads_merge(out))

    def _temporal_attn(self, path: str, x: Tensor) -> Tensor:
        xt = x.transpose(1, 0, 2)  # [T, f, C]
        xn = self._ln(f"{path}.norm_t", xt)
        q = self._linear(f"{path}.temporal.q", xn)
        k = self._linear(f"{path}.temporal.k", xn)
        v = self._linear(f"{path}.temporal.v", xn)
        out, _ = self._attend(self._heads_split(q), self._heads_split(k),
                              self._heads_split(v))
        out = self._linear(f"{path}.temporal.o", self._heads_merge(out))
        return (xt + out).transpose(1, 0, 2)

    def _attn_unit(self, path: str, x: Tensor, cond: Tensor, stage: str,
                   block: int, layer: int, p: _Pass) -> Tensor:
        B, C, H, W = x.shape
        tok = x.reshape(B, C, H * W).transpose(0, 2, 1)
        tok = self._spatial_attn(path, tok, stage, block, layer, p)
        tok = self._cross_attn(path, tok, cond)
        if p.temporal:
            tok = self._temporal_attn(path, tok)
        return tok.transpose(0, 2, 1).reshape(B, C, H, W)

    # -- forward --------------------------------------------------------------

    def forward(self, z: Tensor, t: int, cond: Tensor,
                taps=(), overrides: Mapping[TapAddress, object] | None = None,
                temporal: bool | None = None) -> tuple[Tensor, FeatureBundle]:
        cfg = self.cfg
        if z.ndim != 4 or z.shape[1:] != (cfg.latent_channels, cfg.height, cfg.width):
            raise ConfigError(f"latent shape {z.shape} does not match config")
        if cond.shape != (cfg.cond_dim,):
            raise ConfigError(f"cond shape {cond.shape} != ({cfg.cond_dim},)")
        for addr in list(taps) + list(overrides or {}):
            if addr not in self.addresses:
                raise AddressError(f"unresolvable tap address {addr}")
        use_temporal = cfg.temporal_enabled if temporal is None else temporal
        p = _Pass(taps, overrides, use_temporal)

        temb = Tensor(_sinusoidal_embedding(t, self.time_dim).reshape(1, -1),
                      dtype=self.dtype)
        temb = self._linear("time.fc2", tv.silu(self._linear("time.fc1", temb)))

        h = self._conv("stem", z)
        skips = []
        for i in range(cfg.num_down_blocks):
            h = self._res(f"down.{i}.res.0", h, temb)
            h = p.visit(TapAddress("down", i, "residual_hidden", 0), h)
            h = self._attn_unit(f"down.{i}.attn.0", h, cond, "down", i, 0, p)
            skips.append(h)
            if i < cfg.num_down_blocks - 1:
                h = tv.avg_pool2x(h)
        h = self._res("mid.res.0", h, temb)
        h = p.visit(TapAddress("mid", 0, "residual_hidden", 0), h)
        h = self._attn_unit("mid.attn.0", h, cond, "mid", 0, 0, p)
        h = self._res("mid.res.1", h, temb)
        h = p.visit(TapAddress("mid", 0, "residual_hidden", 1), h)
        for i in range(cfg.num_down_blocks):
            skip = skips[cfg.num_down_blocks - 1 - i]
            h = concat([h, skip], axis=1)
            for j in range(2):
                h = self._res(f"up.{i}.res.{j}", h, temb)
                h = p.visit(TapAddress("up", i, "residual_hidden", j), h)
                h = self._attn_unit(f"up.{i}.attn.{j}", h, cond, "up", i, j, p)
            if i < cfg.num_down_blocks - 1:
                h = upsample2x(h)
        eps = self._conv("out.conv", tv.silu(self._norm("out.norm", h)))
        return eps, FeatureBundle(timestep=t, taps=p.captured)

    # -- checkpointing ----------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = []
        for path in sorted(self.params):
            fname = path.replace(".", "_") + ".rtd"
            rtd.write(directory / fname, self.params[path].data)
            lines.append(f"{path}\t{fname}")
        (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
        (directory / "config.txt").write_text(self.cfg.to_flat())

    @classmethod
    def load(cls, directory, dtype=np.float32) -> "Backbone":
        directory = Path(directory)
        cfg = BackboneConfig.from_flat((directory / "config.txt").read_text())
        bb = cls(cfg, dtype=dtype)
        seen = set()
        for line in (directory / "manifest.txt").read_text().splitlines():
            if not line.strip():
                continue
            path, fname = line.split("\t")
            if path not in bb.params:
                raise ConfigError(f"checkpoint has unknown parameter {path!r}")
            bb.params[path] = Tensor(rtd.read(directory / fname), dtype=dtype)
            seen.add(path)
        missing = set(bb.params) - seen
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {sorted(missing)[:3]}...")
        return bb


def build_backbone(cfg: BackboneConfig, dtype=np.float32) -> Backbone:
    return Backbone(cfg, dtype=dtype)
