"""Analytic parameter and multiply-accumulate accounting.

Counts are derived from the config alone, independently of a built model,
and row names follow the module paths of :class:`mobileutr.model.MobileUtr`.
MACs are what the reports label "GFLOPs"; pass ``strict=True`` for 2*MAC.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigurationError
from .model import ModelConfig


@dataclass
class Row:
    name: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    config: ModelConfig
    input_size: int
    rows: list = field(default_factory=list)
    strict: bool = False

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_flops(self) -> int:
        return self.total_macs * (2 if self.strict else 1)

    @property
    def unit(self) -> str:
        return "FLOPs" if self.strict else "MACs (reported as GFLOPs)"

    def params_under(self, prefix: str) -> int:
        return sum(r.params for r in self.rows if r.name == prefix or r.name.startswith(prefix + "."))

    def macs_under(self, prefix: str) -> int:
        return sum(r.macs for r in self.rows if r.name == prefix or r.name.startswith(prefix + "."))

    def to_text(self, per_layer: bool = True) -> str:
        scale = 2 if self.strict else 1
        lines = []
        if per_layer:
            lines.append(f"{'layer':<44} {'params':>10} {'macs':>14}")
            for r in self.rows:
                lines.append(f"{r.name:<44} {r.params:>10d} {r.macs * scale:>14d}")
        lines.append(f"total_params = {self.total_params}")
        lines.append(f"params_M = {self.total_params / 1e6:.4f}")
        lines.append(f"total_{'flops' if self.strict else 'macs'} = {self.total_flops}")
        lines.append(f"GFLOPs = {self.total_flops / 1e9:.4f}")
        lines.append(f"input_size = {self.input_size}")
        lines.append(f"convention = {self.unit}")
        return "\n".join(lines) + "\n"


class _Counter:
    def __init__(self, batch: int = 1):
        self.rows: list[Row] = []
        self.batch = batch

    def conv(self, name, cin, cout, k, h, w, groups=1, bias=True):
        params = cout * (cin // groups) * k * k + (cout if bias else 0)
        self.rows.append(Row(name, params, self.batch * cout * h * w * (cin // groups) * k * k))

    def conv_transpose(self, name, cin, cout, k, h, w):
        self.rows.append(Row(name, cin * cout * k * k + cout, self.batch * cin * h * w * cout * k * k))

    def norm(self, name, c):
        self.rows.append(Row(name, 2 * c, 0))

    def linear(self, name, fin, fout, tokens):
        self.rows.append(Row(name, fin * fout + fout, self.batch * tokens * fin * fout))

    def conv_bn(self, name, cin, cout, k, h, w):
        self.conv(f"{name}.conv", cin, cout, k, h, w)
        self.norm(f"{name}.bn", cout)

    def attention(self, name, dim, tokens):
        for proj in ("q", "k", "v"):
            self.linear(f"{name}.{proj}", dim, dim, tokens)
        # QK^T and attn @ V, summed over heads
        self.rows.append(Row(f"{name}.matmul", 0, self.batch * 2 * tokens * tokens * dim))
        self.linear(f"{name}.proj", dim, dim, tokens)

    def convutr(self, name, c, k, h, w):
        self.conv(f"{name}.dw", c, c, k, h, w, groups=c)
        self.norm(f"{name}.bn1", c)
        self.conv(f"{name}.pw1", c, 4 * c, 1, h, w)
        self.norm(f"{name}.bn2", 4 * c)
        self.conv(f"{name}.pw2", 4 * c, c, 1, h, w)
        self.norm(f"{name}.bn3", c)

    def transformer(self, name, c, h, w):
        t = h * w
        self.norm(f"{name}.norm1", c)
        self.attention(f"{name}.attn", c, t)
        self.norm(f"{name}.norm2", c)
        self.linear(f"{name}.ffn.fc1", c, 4 * c, t)
        self.linear(f"{name}.ffn.fc2", 4 * c, c, t)

    def lgl(self, name, c, k, r, h, w):
        self.norm(f"{name}.norm1", c)
        self.conv(f"{name}.agg_dw", c, c, k, h, w, groups=c)
        self.conv(f"{name}.agg_pw", c, c, 1, h, w)
        self.norm(f"{name}.norm2", c)
        self.attention(f"{name}.attn", c, (h // r) * (w // r))
        self.conv_transpose(f"{name}.propagate", c, c, r, h // r, w // r)
        self.norm(f"{name}.norm3", c)
        self.conv(f"{name}.ffn_in", c, 4 * c, 1, h, w)
        self.conv(f"{name}.ffn_out", 4 * c, c, 1, h, w)


def profile(cfg: ModelConfig, input_size: Optional[int] = None, strict: bool = False,
            batch: int = 1) -> ComplexityReport:
    """Per-layer parameter and MAC counts for ``cfg`` at a square input."""
    cfg.validate()
    size = cfg.input_size if input_size is None else int(input_size)
    if size % 16 or size < 16:
        raise ConfigurationError(f"input_size: must be a positive multiple of 16, got {size}")
    c, d, k = cfg.channels, cfg.depths, cfg.kernels
    m = _Counter(batch)
    h = size
    m.conv_bn("encoder.stem", 3, c[0], 3, h, h)
    for s in range(3):
        if s:
            h //= 2
            m.conv_bn(f"encoder.expand{s + 1}", c[s - 1], c[s], 1, h, h)
        for i in range(d[s]):
            m.convutr(f"encoder.stage{s + 1}.{i}", c[s], k[s], h, h)
    h //= 2
    m.conv_bn("encoder.expand4", c[2], c[3], 1, h, h)
    for i in range(d[3]):
        if cfg.bottleneck == "attention":
            m.transformer(f"encoder.stage4.{i}", c[3], h, h)
        else:
            m.lgl(f"encoder.stage4.{i}", c[3], cfg.local_kernel(), cfg.sparse_stride, h, h)
    h //= 2
    m.conv_bn("encoder.expand5", c[3], c[4], 1, h, h)
    for i in range(d[4]):
        m.transformer(f"encoder.stage5.{i}", c[4], h, h)

    cin = c[4]
    for i, (cout, skip) in enumerate(zip(cfg.decoder_channels(), cfg.skip_channels())):
        h *= 2
        m.conv_bn(f"decoder.stages.{i}.up", cin, cout, 3, h, h)
        if skip:
            m.conv(f"decoder.stages.{i}.fuse.conv1", cout + skip, cout, 3, h, h)
            m.norm(f"decoder.stages.{i}.fuse.bn1", cout)
            m.conv(f"decoder.stages.{i}.fuse.conv2", cout, cout, 3, h, h)
            m.norm(f"decoder.stages.{i}.fuse.bn2", cout)
        cin = cout
    m.conv("head", c[0], cfg.num_classes, 1, h, h)
    return ComplexityReport(cfg, size, m.rows, strict)


def count_params(cfg: ModelConfig) -> ComplexityReport:
    return profile(cfg)


def count_flops(cfg: ModelConfig, input_size: Optional[int] = None, strict: bool = False) -> ComplexityReport:
    return profile(cfg, input_size, strict=strict)


def ablation_suite(cfg: ModelConfig, input_size: Optional[int] = None) -> list:
    """Reports over skip count 0..3 x {plain LGL, adaptive LGL, dense attention}."""
    out = []
    for bottleneck in ("lgl", "adaptive_lgl", "attention"):
        for s in range(4):
            variant = cfg.with_overrides(skips=s, bottleneck=bottleneck)
            out.append((f"{bottleneck} skip{s}", profile(variant, input_size)))
    return out


def ablation_text(suite: list) -> str:
    lines = [f"{'variant':<22} {'params_M':>9} {'GFLOPs':>8}"]
    for label, rep in suite:
        lines.append(f"{label:<22} {rep.total_params / 1e6:>9.4f} {rep.total_macs / 1e9:>8.4f}")
    return "\n".join(lines) + "\n"
