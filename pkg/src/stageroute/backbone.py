"""Mini encoder-decoder segmentation network with selectable stage routing.

Routing modes:
  skip-only  fixed skip concatenation only (the classic baseline)
  no-skip    no inter-stage pathways beyond the main chain
  replace    attention over the history pool instead of skips
  both       attention and skip concatenation together

Stage layout for S stages: encoder stage 1 runs at full resolution, stages
2..S each halve it (stage S doubles as the bottleneck), and S-1 decoder
stages upsample back. Decoder stages are indexed in production order, so
decoder stage j operates at resolution level S-j. Every stage appends its
output to the history pool; attention sites exist where (routing, position)
say so, including encoder stage 1 whose pool is empty (identity site).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .attention import (AttentionTrace, HistoryPool, StageAttentionUnit,
                        attend, build_unit, tag_key)
from .errors import ConfigError, ContractError, ShapeError
from .tensor import (Precision, Tensor, concat_channels, conv2d, max_pool2x2,
                     relu, upsample2x)


class Routing(Enum):
    SKIP_ONLY = "skip-only"
    NO_SKIP = "no-skip"
    REPLACE = "replace"
    BOTH = "both"


class Position(Enum):
    NONE = "none"
    ENCODER_ONLY = "encoder-only"
    DECODER_ONLY = "decoder-only"
    FULL = "full"


class InitScheme(Enum):
    ZERO = "zero"
    RANDOM_NORMAL = "random-normal"
    KAIMING_UNIFORM = "kaiming-uniform"
    XAVIER_UNIFORM = "xavier-uniform"


@dataclass
class BackboneConfig:
    stages: int = 3
    base_channels: int = 8
    in_channels: int = 1
    num_classes: int = 4
    routing: Routing = Routing.SKIP_ONLY
    position: Position = Position.FULL
    init_scheme: InitScheme = InitScheme.ZERO
    seed: int = 0
    both_concat_first: bool = False  # alternative dataflow for "both" mode

    def validate(self):
        if self.stages < 2:
            raise ConfigError(f"need at least 2 stages, got {self.stages}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be positive, got {self.base_channels}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("in_channels must be >= 1 and num_classes >= 2")


def stage_channels(cfg: BackboneConfig):
    """Channel width per resolution level, doubling each stage."""
    return [cfg.base_channels * (2 ** i) for i in range(cfg.stages)]


@dataclass
class SiteSpec:
    site_id: str
    kind: str           # "encoder" or "decoder"
    stage_index: int    # production order within its side
    target_channels: int
    sources: list       # (tag, channels) of every stage pooled before this site


def attention_sites(cfg: BackboneConfig):
    """Enumerate the attention sites implied by (routing, position).

    Pure function of the config; used for construction, closed-form
    parameter accounting, and tests.
    """
    if cfg.routing not in (Routing.REPLACE, Routing.BOTH):
        return []
    chans = stage_channels(cfg)
    want_enc = cfg.position in (Position.FULL, Position.ENCODER_ONLY)
    want_dec = cfg.position in (Position.FULL, Position.DECODER_ONLY)
    sites = []
    if want_enc:
        for i in range(1, cfg.stages + 1):
            target = cfg.in_channels if i == 1 else chans[i - 2]
            sources = [(("encoder", j), chans[j - 1]) for j in range(1, i)]
            sites.append(SiteSpec(f"enc{i}", "encoder", i, target, sources))
    if want_dec:
        for j in range(1, cfg.stages):
            level = cfg.stages - j
            target = chans[level]  # channels of Up(previous stage output)
            if cfg.routing is Routing.BOTH and cfg.both_concat_first:
                target += chans[level - 1]
            sources = [(("encoder", i), chans[i - 1]) for i in range(1, cfg.stages + 1)]
            sources += [(("decoder", k), chans[cfg.stages - k - 1]) for k in range(1, j)]
            sites.append(SiteSpec(f"dec{j}", "decoder", j, target, sources))
    return sites


def formula_overhead(cfg: BackboneConfig):
    """Closed-form attention parameter overhead: sum over sites of
    C (pseudo-query) + C (rms gain) + C*C_src per channel-mismatched source."""
    total = 0
    for site in attention_sites(cfg):
        c = site.target_channels
        total += 2 * c
        total += sum(c * c_src for _, c_src in site.sources if c_src != c)
    return total


class ConvLayer:
    def __init__(self, in_ch, out_ch, k, rng, dtype, bias=True, zero_init=False):
        if zero_init:
            w = np.zeros((out_ch, in_ch, k, k))
        else:
            bound = math.sqrt(6.0 / (in_ch * k * k))
            w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def apply(self, x):
        return conv2d(x, self.weight, bias=self.bias, padding="same")


class StageBlock:
    """Two 3x3 same-padding convolutions, each followed by a rectifier."""

    def __init__(self, in_ch, out_ch, rng, dtype):
        self.conv1 = ConvLayer(in_ch, out_ch, 3, rng, dtype)
        self.conv2 = ConvLayer(out_ch, out_ch, 3, rng, dtype)

    def apply(self, x):
        return relu(self.conv2.apply(relu(self.conv1.apply(x))))

    def parameters(self, prefix):
        return {f"{prefix}.conv1.weight": self.conv1.weight,
                f"{prefix}.conv1.bias": self.conv1.bias,
                f"{prefix}.conv2.weight": self.conv2.weight,
                f"{prefix}.conv2.bias": self.conv2.bias}


@dataclass
class ForwardArtifacts:
    logits: Tensor
    traces: list = field(default_factory=list)


class MiniUNet:
    """Configurable mini U-Net; see module docstring for the stage layout."""

    def __init__(self, cfg: BackboneConfig, precision=Precision.SINGLE):
        cfg.validate()
        self.cfg = cfg
        self.dtype = precision.dtype
        chans = stage_channels(cfg)
        s = cfg.stages
        has_skip = cfg.routing in (Routing.SKIP_ONLY, Routing.BOTH)

        # conv parameters draw from their own stream so that routing modes
        # with identical conv topology get bit-identical conv weights
        rng_convs = np.random.default_rng([cfg.seed, 1])
        self.enc_blocks = []
        for i in range(1, s + 1):
            in_ch = cfg.in_channels if i == 1 else chans[i - 2]
            self.enc_blocks.append(StageBlock(in_ch, chans[i - 1], rng_convs, self.dtype))
        self.dec_blocks = []
        for j in range(1, s):
            level = s - j
            in_ch = chans[level] + (chans[level - 1] if has_skip else 0)
            self.dec_blocks.append(StageBlock(in_ch, chans[level - 1], rng_convs, self.dtype))
        self.head = ConvLayer(chans[0], cfg.num_classes, 1, rng_convs, self.dtype)

        rng_units = np.random.default_rng([cfg.seed, 2])
        self.units: dict[str, StageAttentionUnit] = {}
        self._static_sites = set()  # empty-pool sites; identities on every pass
        for site in attention_sites(cfg):
            self.units[site.site_id] = build_unit(
                site.site_id, site.target_channels, (0, 0), site.sources,
                init_scheme=cfg.init_scheme.value, rng=rng_units,
                stage_index=site.stage_index, dtype=self.dtype)
            if not site.sources:
                self._static_sites.add(site.site_id)

    # ------------------------------------------------------------- forward

    def forward(self, images, bypass_attention=False, per_sample_trace=False):
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.data.ndim != 4 or x.data.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected input [B,{self.cfg.in_channels},H,W], got {x.data.shape}")
        h, w = x.data.shape[2], x.data.shape[3]
        factor = 2 ** (self.cfg.stages - 1)
        if h % factor or w % factor:
            raise ContractError(
                f"spatial size {h}x{w} not divisible by {factor} (stages={self.cfg.stages})")

        cfg = self.cfg
        has_skip = cfg.routing in (Routing.SKIP_ONLY, Routing.BOTH)
        concat_first = cfg.routing is Routing.BOTH and cfg.both_concat_first
        pool = HistoryPool()
        traces = []
        enc_outs = []

        def run_site(site_id, feat):
            unit = self.units.get(site_id)
            if unit is None or bypass_attention:
                return feat
            unit.target_hw = (feat.data.shape[2], feat.data.shape[3])
            feat, trace = attend(pool, feat, unit, per_sample_trace=per_sample_trace)
            traces.append(trace)
            return feat

        for i in range(1, cfg.stages + 1):
            if i > 1:
                x = max_pool2x2(x)
            x = run_site(f"enc{i}", x)
            x = self.enc_blocks[i - 1].apply(x)
            pool.append(x, ("encoder", i))
            enc_outs.append(x)

        for j in range(1, cfg.stages):
            level = cfg.stages - j
            x = upsample2x(x)
            if concat_first:
                x = concat_channels(x, enc_outs[level - 1])
                x = run_site(f"dec{j}", x)
            else:
                x = run_site(f"dec{j}", x)
                if has_skip:
                    x = concat_channels(x, enc_outs[level - 1])
            x = self.dec_blocks[j - 1].apply(x)
            pool.append(x, ("decoder", j))

        logits = self.head.apply(x)
        return ForwardArtifacts(logits=logits, traces=traces)

    # ---------------------------------------------------------- parameters

    def parameters(self):
        """Ordered name -> Tensor map of every learnable parameter."""
        params = {}
        for i, block in enumerate(self.enc_blocks, start=1):
            params.update(block.parameters(f"enc{i}"))
        for j, block in enumerate(self.dec_blocks, start=1):
            params.update(block.parameters(f"dec{j}"))
        params["head.weight"] = self.head.weight
        params["head.bias"] = self.head.bias
        for unit in self.units.values():
            params.update({f"units.{k}": v for k, v in unit.parameters().items()})
        return params

    def trainable_parameters(self):
        """Like parameters(), minus units whose pool is empty on every
        forward pass (encoder stage 1): those sites are identities, their
        parameters never receive gradients, and the optimizer rejects
        registered parameters without grads."""
        static = {f"units.{key}" for site_id in self._static_sites
                  for key in self.units[site_id].parameters()}
        return {name: p for name, p in self.parameters().items()
                if name not in static}

    def parameter_count(self):
        """(total parameter count, attention overhead), both measured."""
        total = sum(int(p.data.size) for p in self.parameters().values())
        overhead = sum(unit.overhead() for unit in self.units.values())
        return total, overhead

    def state(self):
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state(self, state):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ShapeError(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model {p.data.shape}")
            p.data = arr.astype(self.dtype, copy=True)


def build(cfg: BackboneConfig, precision=Precision.SINGLE) -> MiniUNet:
    return MiniUNet(cfg, precision=precision)
