"""MobileUtr u-shaped network assembled from a :class:`ModelConfig`."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import ops
from .blocks import ConvBNAct, ConvUtrBlock, DecoderStage, LGLBlock, TransformerBlock, adaptive_kernel
from .errors import ConfigurationError, InputError
from .nn import Conv2d, Module, ModuleList
from .tensor import Tensor

BOTTLENECKS = ("adaptive_lgl", "lgl", "attention")
# LocalAgg kernel of the non-adaptive LGL bottleneck
PLAIN_LGL_KERNEL = 3


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (16, 32, 64, 64, 128)
    depths: tuple = (1, 1, 3, 3, 3)
    kernels: tuple = (3, 3, 7)
    lgl_kernel: Optional[int] = None
    mean_diameter: Optional[float] = 144.0
    downsample_layers: int = 3
    sparse_stride: int = 2
    heads: int = 4
    skips: int = 3
    num_classes: int = 1
    input_size: int = 256
    bottleneck: str = "adaptive_lgl"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))

    def validate(self) -> "ModelConfig":
        def bad(field_name, msg):
            raise ConfigurationError(f"{field_name}: {msg}")

        if len(self.channels) != 5 or min(self.channels) < 1:
            bad("channels", f"need five positive widths, got {self.channels}")
        if len(self.depths) != 5 or min(self.depths) < 1:
            bad("depths", f"need five positive block counts, got {self.depths}")
        if len(self.kernels) != 3 or any(k % 2 == 0 or k < 1 for k in self.kernels):
            bad("kernels", f"need three odd kernel sizes, got {self.kernels}")
        if self.input_size % 16 or self.input_size < 16:
            bad("input_size", f"must be a positive multiple of 16, got {self.input_size}")
        if not 0 <= self.skips <= 3:
            bad("skips", f"must be in 0..3, got {self.skips}")
        if self.num_classes < 1:
            bad("num_classes", f"must be >= 1, got {self.num_classes}")
        if self.bottleneck not in BOTTLENECKS:
            bad("bottleneck", f"must be one of {BOTTLENECKS}, got {self.bottleneck!r}")
        if self.lgl_kernel is None and self.mean_diameter is None:
            bad("lgl_kernel", "give lgl_kernel or mean_diameter")
        if self.lgl_kernel is not None and (self.lgl_kernel % 2 == 0 or self.lgl_kernel < 3):
            bad("lgl_kernel", f"must be odd and >= 3, got {self.lgl_kernel}")
        if self.sparse_stride < 1 or (self.input_size // 8) % self.sparse_stride:
            bad("sparse_stride", f"{self.sparse_stride} does not divide the /8 map of {self.input_size}")
        for c in (self.channels[3], self.channels[4]):
            if c % self.heads:
                bad("heads", f"{self.heads} heads do not divide width {c}")
        return self

    def local_kernel(self) -> int:
        """Resolved LocalAgg kernel for the stage-4 bottleneck."""
        if self.bottleneck == "lgl":
            return PLAIN_LGL_KERNEL
        if self.lgl_kernel is not None:
            return self.lgl_kernel
        return adaptive_kernel(self.mean_diameter, self.downsample_layers,
                               max_extent=self.input_size // 8)

    def decoder_channels(self) -> tuple:
        """Decoder stage widths: the encoder width at each stage's output resolution."""
        c = self.channels
        return (c[3], c[2], c[1], c[0])

    def skip_channels(self) -> tuple:
        """Skip feature width fused at each decoder stage (None where unused).

        Skips are enabled from the shallowest level downward as ``skips`` grows.
        """
        c = self.channels
        enabled = (self.skips >= 3, self.skips >= 2, self.skips >= 1, False)
        sources = (c[2], c[1], c[0], None)
        return tuple(s if on else None for s, on in zip(sources, enabled))

    def with_overrides(self, **kw) -> "ModelConfig":
        names = {f.name for f in fields(self)}
        unknown = set(kw) - names
        if unknown:
            raise ConfigurationError(f"unknown config field(s): {sorted(unknown)}")
        return replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{k} = {json.dumps(list(v) if isinstance(v, tuple) else v)}\n"
                       for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                kw[key] = json.loads(value)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"line {lineno}: bad value for {key}: {exc.msg}") from None
        return cls().with_overrides(**kw)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text())


MOBILEUTR = ModelConfig()
MOBILEUTR_L = ModelConfig(channels=(32, 64, 128, 128, 256), depths=(1, 1, 3, 3, 4))
TINY = ModelConfig(channels=(8, 16, 32, 32, 64), depths=(1, 1, 1, 1, 1), mean_diameter=36.0,
                   input_size=64)
PRESETS = {"mobileutr": MOBILEUTR, "mobileutr-l": MOBILEUTR_L, "tiny": TINY}


def get_config(name_or_path: Union[str, Path]) -> ModelConfig:
    key = str(name_or_path).lower()
    if key in PRESETS:
        return PRESETS[key]
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigurationError(f"config {name_or_path!r} is neither a preset {sorted(PRESETS)} nor a file")
    return ModelConfig.load(path)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c, d, k = cfg.channels, cfg.depths, cfg.kernels
        self.stem = ConvBNAct(3, c[0], 3, rng=rng, dtype=dtype)
        self.stage1 = ModuleList(ConvUtrBlock(c[0], k[0], rng=rng, dtype=dtype) for _ in range(d[0]))
        self.expand2 = ConvBNAct(c[0], c[1], 1, rng=rng, dtype=dtype)
        self.stage2 = ModuleList(ConvUtrBlock(c[1], k[1], rng=rng, dtype=dtype) for _ in range(d[1]))
        self.expand3 = ConvBNAct(c[1], c[2], 1, rng=rng, dtype=dtype)
        self.stage3 = ModuleList(ConvUtrBlock(c[2], k[2], rng=rng, dtype=dtype) for _ in range(d[2]))
        self.expand4 = ConvBNAct(c[2], c[3], 1, rng=rng, dtype=dtype)
        if cfg.bottleneck == "attention":
            self.stage4 = ModuleList(TransformerBlock(c[3], cfg.heads, rng=rng, dtype=dtype)
                                     for _ in range(d[3]))
        else:
            kk = cfg.local_kernel()
            self.stage4 = ModuleList(LGLBlock(c[3], kk, cfg.sparse_stride, cfg.heads, rng=rng, dtype=dtype)
                                     for _ in range(d[3]))
        self.expand5 = ConvBNAct(c[3], c[4], 1, rng=rng, dtype=dtype)
        self.stage5 = ModuleList(TransformerBlock(c[4], cfg.heads, rng=rng, dtype=dtype)
                                 for _ in range(d[4]))

    def forward(self, x: Tensor, trace: Optional[list] = None):
        def run(blocks, h, name):
            for b in blocks:
                h = b(h)
            if trace is not None:
                trace.append((name, h.shape))
            return h

        f1 = run(self.stage1, self.stem(x), "encoder.stage1")
        f2 = run(self.stage2, self.expand2(ops.maxpool2d(f1)), "encoder.stage2")
        f3 = run(self.stage3, self.expand3(ops.maxpool2d(f2)), "encoder.stage3")
        f4 = run(self.stage4, self.expand4(ops.maxpool2d(f3)), "encoder.stage4")
        f5 = run(self.stage5, self.expand5(ops.maxpool2d(f4)), "encoder.stage5")
        return f5, (f3, f2, f1)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        widths = cfg.decoder_channels()
        skips = cfg.skip_channels()
        cin = cfg.channels[4]
        self.stages = ModuleList()
        for cout, skip in zip(widths, skips):
            self.stages.append(DecoderStage(cin, cout, skip, rng=rng, dtype=dtype))
            cin = cout

    def forward(self, x: Tensor, skip_feats, trace: Optional[list] = None) -> Tensor:
        for i, stage in enumerate(self.stages):
            skip = skip_feats[i] if i < len(skip_feats) and stage.fuse is not None else None
            x = stage(x, skip)
            if trace is not None:
                trace.append((f"decoder.stages.{i}", x.shape))
        return x


class MobileUtr(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)
        self.head = Conv2d(cfg.channels[0], cfg.num_classes, 1, rng=rng, dtype=dtype)

    def forward(self, image: Tensor, trace: Optional[list] = None) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise InputError(f"expected an N,3,H,W image batch, got shape {image.shape}")
        h, w = image.shape[2:]
        if h % 16 or w % 16:
            raise InputError(f"image height and width must be divisible by 16, got {h}x{w}")
        deep, skips = self.encoder(image, trace)
        x = self.decoder(deep, skips, trace)
        return self.head(x)


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> MobileUtr:
    return MobileUtr(cfg, seed=seed, dtype=dtype)


def expected_trace(cfg: ModelConfig, n: int, h: int, w: int) -> list:
    """Analytic (name, shape) trace a built model must reproduce."""
    c = cfg.channels
    out = [(f"encoder.stage{i + 1}", (n, c[i], h >> i, w >> i)) for i in range(5)]
    for i, cd in enumerate(cfg.decoder_channels()):
        out.append((f"decoder.stages.{i}", (n, cd, h >> (3 - i), w >> (3 - i))))
    return out


def predict(model: MobileUtr, image: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode logits for an N,3,H,W numpy array."""
    was_training = model.training
    model.eval()
    try:
        outs = [model(Tensor(image[i:i + batch_size].astype(model.head.weight.dtype))).data
                for i in range(0, len(image), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(outs, axis=0)
