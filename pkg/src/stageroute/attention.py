"""Cross-stage feature routing by pseudo-query attention over a history pool.

Every stage output produced during a forward pass is appended to an
ordered history pool. An attention site aligns each pooled feature to its
own resolution and channel width, computes one logit per entry per spatial
position by dotting a learned pseudo-query against the RMS-normalized
entry, and outputs the softmax-weighted sum of the aligned (unnormalized)
values. With a zero pseudo-query this is exact uniform averaging; the
query specializes during training.

Alignment rules:
  - source resolution above target: adaptive max pooling
  - below target: bilinear interpolation
  - equal: untouched
  - channel widths equal: identity (no parameters); otherwise a bias-free
    1x1 projection owned by the site, one per mismatched source stage
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (Tensor, adaptive_max_pool, attention_combine,
                     bilinear_resize, concat_channels, conv2d,
                     rms_query_logits, softmax_axis)

# stage tags are (side, index) pairs, e.g. ("encoder", 2); the pseudo-entry
# for the site's own input uses side "current"
CURRENT_SIDE = "current"


def tag_key(tag):
    return f"{tag[0]}{tag[1]}"


class HistoryPool:
    """Ordered, forward-pass-scoped record of stage outputs.

    Append-only; entry order equals production order. A pool belongs to
    exactly one forward pass.
    """

    def __init__(self):
        self.entries: list[Tensor] = []
        self.stage_tags: list[tuple] = []

    def __len__(self):
        return len(self.entries)

    def append(self, feature: Tensor, tag):
        tag = (str(tag[0]), int(tag[1]))
        if tag in self.stage_tags:
            raise ContractError(f"stage tag {tag} already appended this pass")
        feature.stage_tag = tag
        self.entries.append(feature)
        self.stage_tags.append(tag)

    def clear(self):
        self.entries.clear()
        self.stage_tags.clear()


def history_append(pool: HistoryPool, feature: Tensor, tag):
    pool.append(feature, tag)


@dataclass
class StageAttentionUnit:
    """Learned state of one attention site.

    ``projections`` maps source tag keys to bias-free 1x1 conv weights
    [C, C_src, 1, 1]; sources whose channel count already matches
    ``target_channels`` have no entry and pass through untouched.
    """

    site_id: str
    target_channels: int
    target_hw: tuple
    pseudo_query: Tensor
    rms_gain: Tensor
    projections: dict = field(default_factory=dict)
    rms_epsilon: float = 1e-6
    stage_index: int = 0

    def parameters(self):
        params = {f"{self.site_id}.pseudo_query": self.pseudo_query,
                  f"{self.site_id}.rms_gain": self.rms_gain}
        for key, w in self.projections.items():
            params[f"{self.site_id}.proj.{key}.weight"] = w
        return params

    def overhead(self):
        """Closed-form parameter overhead of this site."""
        c = self.target_channels
        return c + c + sum(w.data.shape[0] * w.data.shape[1]
                           for w in self.projections.values())


@dataclass
class AttentionTrace:
    """Per-position attention weights recorded at one site.

    ``weights`` is [K+1, H, W] (batch-averaged by default); the last entry
    along the first axis belongs to the site's own input feature.
    """

    site: str
    weights: np.ndarray
    source_tags: list

    def uniformity_score(self):
        """max - min of the per-entry mean weights; 0 at uniform attention."""
        means = self.weights.mean(axis=tuple(range(1, self.weights.ndim)))
        return float(means.max() - means.min())

    def rows(self):
        """(site, source_side, source_index, mean, min, max) per entry."""
        out = []
        axes = tuple(range(1, self.weights.ndim))
        for n, tag in enumerate(self.source_tags):
            w = self.weights[n]
            out.append((self.site, tag[0], tag[1],
                        float(w.mean()), float(w.min()), float(w.max())))
        return out


def align_feature(h: Tensor, unit: StageAttentionUnit) -> Tensor:
    """Bring a history feature to the unit's resolution and channel width.

    Returns ``h`` itself when both already match, so the resolution-matched
    pathway is a literal identity.
    """
    th, tw = unit.target_hw
    _, c_src, hh, ww = h.data.shape
    out = h
    if (hh, ww) != (th, tw):
        if hh >= th and ww >= tw:
            out = adaptive_max_pool(out, th, tw)
        else:
            out = bilinear_resize(out, th, tw)
    if c_src != unit.target_channels:
        key = tag_key(h.stage_tag) if h.stage_tag else None
        if key not in unit.projections:
            raise ContractError(
                f"site {unit.site_id}: no projection for source "
                f"{key or '<untagged>'} with {c_src} channels")
        out = conv2d(out, unit.projections[key], bias=None, padding="same")
    return out


def attend(pool: HistoryPool, x: Tensor, unit: StageAttentionUnit,
           per_sample_trace=False):
    """Aggregate the history pool and ``x`` by per-position attention.

    Stacks the aligned pool entries with ``x`` last, keys each entry by
    channel RMSNorm, scores entries with the pseudo-query, and returns the
    softmax-weighted sum of the aligned pre-normalization values together
    with an AttentionTrace. Weights are shared across channels at each
    position. An empty pool returns ``x`` unchanged.
    """
    b, c, hh, ww = x.data.shape
    if c != unit.target_channels or (hh, ww) != unit.target_hw:
        raise ContractError(
            f"site {unit.site_id}: input {x.data.shape} does not match unit "
            f"target [{unit.target_channels}, {unit.target_hw}]")

    values = [align_feature(h, unit) for h in pool.entries] + [x]
    tags = list(pool.stage_tags) + [(CURRENT_SIDE, unit.stage_index)]
    n_entries = len(values)

    if n_entries == 1:
        weights = np.ones((1, b, hh, ww), dtype=x.data.dtype) if per_sample_trace \
            else np.ones((1, hh, ww), dtype=x.data.dtype)
        return x, AttentionTrace(unit.site_id, weights, tags)

    logits = [rms_query_logits(v, unit.pseudo_query, unit.rms_gain, unit.rms_epsilon)
              for v in values]
    alpha = softmax_axis(concat_channels(*logits), axis=1)  # [B, K+1, H, W]
    out = attention_combine(alpha, values)

    w = alpha.data.transpose(1, 0, 2, 3)  # [K+1, B, H, W]
    weights = w.copy() if per_sample_trace else w.mean(axis=1)
    return out, AttentionTrace(unit.site_id, weights, tags)


def naive_attend_oracle(pool: HistoryPool, x: Tensor,
                        unit: StageAttentionUnit) -> np.ndarray:
    """Scalar-loop re-implementation of attend, for differential testing.

    Works on raw float64 buffers with explicit loops over batch, entry,
    position, and channel. Shares no code with the vectorized path.
    """
    xd = np.asarray(x.data, dtype=np.float64)
    b, c, th, tw = xd.shape
    eps = unit.rms_epsilon
    query = np.asarray(unit.pseudo_query.data, dtype=np.float64)
    gain = np.asarray(unit.rms_gain.data, dtype=np.float64)

    def resize_entry(src):
        _, cs, hs, ws = src.shape
        if (hs, ws) == (th, tw):
            return src
        if hs >= th and ws >= tw:
            out = np.zeros((b, cs, th, tw))
            for bi in range(b):
                for ci in range(cs):
                    for i in range(th):
                        for j in range(tw):
                            h0 = math.floor(i * hs / th)
                            h1 = math.ceil((i + 1) * hs / th)
                            w0 = math.floor(j * ws / tw)
                            w1 = math.ceil((j + 1) * ws / tw)
                            best = -math.inf
                            for u in range(h0, h1):
                                for v in range(w0, w1):
                                    if src[bi, ci, u, v] > best:
                                        best = src[bi, ci, u, v]
                            out[bi, ci, i, j] = best
            return out
        out = np.zeros((b, cs, th, tw))
        for bi in range(b):
            for ci in range(cs):
                for i in range(th):
                    si = min(max((i + 0.5) * hs / th - 0.5, 0.0), hs - 1)
                    i0 = math.floor(si)
                    i1 = min(i0 + 1, hs - 1)
                    ti = si - i0
                    for j in range(tw):
                        sj = min(max((j + 0.5) * ws / tw - 0.5, 0.0), ws - 1)
                        j0 = math.floor(sj)
                        j1 = min(j0 + 1, ws - 1)
                        tj = sj - j0
                        top = src[bi, ci, i0, j0] + tj * (src[bi, ci, i0, j1] - src[bi, ci, i0, j0])
                        bot = src[bi, ci, i1, j0] + tj * (src[bi, ci, i1, j1] - src[bi, ci, i1, j0])
                        out[bi, ci, i, j] = top + ti * (bot - top)
        return out

    def project_entry(src, tag):
        cs = src.shape[1]
        if cs == c:
            return src
        w = np.asarray(unit.projections[tag_key(tag)].data, dtype=np.float64)
        out = np.zeros((b, c, th, tw))
        for bi in range(b):
            for co in range(c):
                for i in range(th):
                    for j in range(tw):
                        acc = 0.0
                        for ci in range(cs):
                            acc += w[co, ci, 0, 0] * src[bi, ci, i, j]
                        out[bi, co, i, j] = acc
        return out

    aligned = []
    for entry, tag in zip(pool.entries, pool.stage_tags):
        src = np.asarray(entry.data, dtype=np.float64)
        aligned.append(project_entry(resize_entry(src), tag))
    aligned.append(xd)
    if len(aligned) == 1:
        return xd.copy()

    out = np.zeros_like(xd)
    for bi in range(b):
        for i in range(th):
            for j in range(tw):
                logits = []
                for v in aligned:
                    ssq = 0.0
                    for ci in range(c):
                        ssq += v[bi, ci, i, j] * v[bi, ci, i, j]
                    rms = math.sqrt(ssq / c + eps)
                    score = 0.0
                    for ci in range(c):
                        score += query[ci] * (v[bi, ci, i, j] / rms * gain[ci])
                    logits.append(score)
                peak = max(logits)
                exps = [math.exp(s - peak) for s in logits]
                total = sum(exps)
                for ci in range(c):
                    acc = 0.0
                    for v, e in zip(aligned, exps):
                        acc += (e / total) * v[bi, ci, i, j]
                    out[bi, ci, i, j] = acc
    return out


def build_unit(site_id, target_channels, target_hw, sources, init_scheme="zero",
               rng=None, stage_index=0, dtype=np.float64,
               rms_epsilon=1e-6) -> StageAttentionUnit:
    """Construct a site with projections for every channel-mismatched source.

    ``sources`` is a list of (tag, channels). Pseudo-query init follows the
    named scheme; the query is treated as a [C, 1] weight for the fan-based
    schemes.
    """
    c = int(target_channels)
    if init_scheme == "zero":
        query = np.zeros(c)
    else:
        if rng is None:
            raise ContractError(f"init scheme {init_scheme!r} needs an rng")
        if init_scheme == "random-normal":
            query = rng.normal(0.0, 0.02, size=c)
        elif init_scheme == "kaiming-uniform":
            bound = math.sqrt(6.0 / 1.0)  # fan_in = 1 for a [C, 1] weight
            query = rng.uniform(-bound, bound, size=c)
        elif init_scheme == "xavier-uniform":
            bound = math.sqrt(6.0 / (1.0 + c))
            query = rng.uniform(-bound, bound, size=c)
        else:
            raise ContractError(f"unknown init scheme {init_scheme!r}")
    projections = {}
    for tag, c_src in sources:
        if c_src == c:
            continue
        if rng is None:
            w = np.zeros((c, c_src, 1, 1))
        else:
            bound = math.sqrt(6.0 / (c_src + c))  # Xavier; projections are linear
            w = rng.uniform(-bound, bound, size=(c, c_src, 1, 1))
        projections[tag_key(tag)] = Tensor(w.astype(dtype), requires_grad=True)
    return StageAttentionUnit(
        site_id=site_id,
        target_channels=c,
        target_hw=(int(target_hw[0]), int(target_hw[1])),
        pseudo_query=Tensor(query.astype(dtype), requires_grad=True),
        rms_gain=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        projections=projections,
        rms_epsilon=rms_epsilon,
        stage_index=stage_index,
    )
