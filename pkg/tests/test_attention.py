import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stageroute.attention import (HistoryPool, StageAttentionUnit, align_feature,
                                  attend, build_unit, history_append,
                                  naive_attend_oracle)
from stageroute.errors import ContractError
from stageroute.tensor import Tensor


def make_unit(c, hw, sources=(), init="zero", seed=0, eps=1e-6):
    rng = np.random.default_rng(seed)
    return build_unit("test", c, hw, list(sources), init_scheme=init, rng=rng,
                      rms_epsilon=eps)


def random_pool_case(rng, batch, channels, hw, k):
    """A random attend configuration: pool entries with mixed shapes."""
    th, tw = hw
    sources = []
    entries = []
    for i in range(k):
        c_src = int(rng.integers(1, 5))
        mode = rng.integers(0, 3)
        if mode == 0:
            hs, ws = th, tw
        elif mode == 1:
            hs = int(rng.integers(th, 2 * th + 1))
            ws = int(rng.integers(tw, 2 * tw + 1))
        else:
            hs = int(rng.integers(1, th + 1))
            ws = int(rng.integers(1, tw + 1))
        sources.append((("encoder", i + 1), c_src))
        entries.append(rng.standard_normal((batch, c_src, hs, ws)))
    unit = build_unit("case", channels, hw, sources, init_scheme="random-normal",
                      rng=rng)
    unit.pseudo_query.data = rng.standard_normal(channels)  # informative weights
    for w in unit.projections.values():  # randomize for differential coverage
        w.data = rng.standard_normal(w.data.shape)
    pool = HistoryPool()
    for entry, (tag, _) in zip(entries, sources):
        history_append(pool, Tensor(entry), tag)
    x = Tensor(rng.standard_normal((batch, channels, th, tw)))
    return pool, x, unit


# ------------------------------------------------------------ history pool

def test_history_append_order_and_tags():
    pool = HistoryPool()
    for i in range(1, 4):
        history_append(pool, Tensor(np.zeros((1, 2, 4, 4))), ("encoder", i))
    history_append(pool, Tensor(np.zeros((1, 2, 4, 4))), ("decoder", 1))
    assert pool.stage_tags == [("encoder", 1), ("encoder", 2), ("encoder", 3),
                               ("decoder", 1)]
    assert len(pool) == 4


def test_history_duplicate_tag_raises():
    pool = HistoryPool()
    history_append(pool, Tensor(np.zeros((1, 2, 4, 4))), ("encoder", 1))
    with pytest.raises(ContractError):
        history_append(pool, Tensor(np.zeros((1, 2, 4, 4))), ("encoder", 1))


def test_history_clear():
    pool = HistoryPool()
    history_append(pool, Tensor(np.zeros((1, 2, 4, 4))), ("encoder", 1))
    pool.clear()
    assert len(pool) == 0
    history_append(pool, Tensor(np.zeros((1, 2, 4, 4))), ("encoder", 1))


# ------------------------------------------------------------------- align

def test_align_resolution_and_channel_match_is_identity_object():
    unit = make_unit(3, (4, 4))
    h = Tensor(np.random.default_rng(0).standard_normal((1, 3, 4, 4)))
    assert align_feature(h, unit) is h


def test_align_pools_when_source_is_larger():
    unit = make_unit(1, (2, 2))
    h = Tensor(np.arange(1, 17, dtype=float).reshape(1, 1, 4, 4))
    h.stage_tag = ("encoder", 1)
    out = align_feature(h, unit)
    npt.assert_array_equal(out.data[0, 0], [[6, 8], [14, 16]])


def test_align_zero_projection_gives_zero():
    unit = make_unit(3, (4, 4), sources=[(("encoder", 1), 2)])
    unit.projections["encoder1"].data[:] = 0.0
    h = Tensor(np.random.default_rng(1).standard_normal((1, 2, 4, 4)))
    h.stage_tag = ("encoder", 1)
    assert not align_feature(h, unit).data.any()


def test_align_missing_projection_raises():
    unit = make_unit(3, (4, 4))
    h = Tensor(np.zeros((1, 2, 4, 4)))
    h.stage_tag = ("encoder", 9)
    with pytest.raises(ContractError):
        align_feature(h, unit)


# ------------------------------------------------------------------ attend

def test_attend_empty_pool_returns_input_bit_equal():
    unit = make_unit(3, (4, 4), init="kaiming-uniform", seed=3)
    x = Tensor(np.random.default_rng(2).standard_normal((2, 3, 4, 4)))
    out, trace = attend(HistoryPool(), x, unit)
    assert out is x
    assert trace.weights.shape == (1, 4, 4)
    npt.assert_array_equal(trace.weights, np.ones((1, 4, 4)))


def test_attend_zero_query_gives_exact_uniform_weights():
    rng = np.random.default_rng(4)
    unit = make_unit(2, (3, 3))
    pool = HistoryPool()
    for i in range(3):
        history_append(pool, Tensor(rng.standard_normal((2, 2, 3, 3))),
                       ("encoder", i + 1))
    x = Tensor(rng.standard_normal((2, 2, 3, 3)))
    out, trace = attend(pool, x, unit)
    assert (trace.weights == 0.25).all()
    stacked = np.stack([e.data for e in pool.entries] + [x.data])
    npt.assert_allclose(out.data, stacked.mean(axis=0), rtol=0, atol=1e-12)


def test_attend_engineered_logits_quarter_three_quarters():
    """Entries chosen so the two logits are exactly [0, ln 3] at the single
    position: weights must be [0.25, 0.75]."""
    unit = StageAttentionUnit(
        site_id="t", target_channels=2, target_hw=(1, 1),
        pseudo_query=Tensor(np.array([np.log(3.0), 0.0])),
        rms_gain=Tensor(np.ones(2)), rms_epsilon=0.0)
    pool = HistoryPool()
    v1 = np.array([0.0, 5.0]).reshape(1, 2, 1, 1)   # key [0, .]: logit 0
    history_append(pool, Tensor(v1), ("encoder", 1))
    v2 = np.array([1.0, -1.0]).reshape(1, 2, 1, 1)  # rms 1: logit ln 3
    x = Tensor(v2)
    out, trace = attend(pool, x, unit)
    npt.assert_allclose(trace.weights[:, 0, 0], [0.25, 0.75], rtol=1e-12)
    npt.assert_allclose(out.data[0, :, 0, 0],
                        0.25 * v1[0, :, 0, 0] + 0.75 * v2[0, :, 0, 0], rtol=1e-12)


def test_attend_weights_sum_to_one_per_position():
    rng = np.random.default_rng(5)
    pool, x, unit = random_pool_case(rng, 2, 3, (4, 3), 4)
    _, trace = attend(pool, x, unit)
    npt.assert_allclose(trace.weights.sum(axis=0), 1.0, atol=1e-6)
    assert (trace.weights > 0).all()


def test_attend_shape_mismatch_raises():
    unit = make_unit(3, (4, 4))
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ContractError):
        attend(HistoryPool(), x, unit)


def test_attend_per_sample_trace_shape():
    rng = np.random.default_rng(6)
    pool, x, unit = random_pool_case(rng, 2, 3, (4, 4), 2)
    _, trace = attend(pool, x, unit, per_sample_trace=True)
    assert trace.weights.shape == (3, 2, 4, 4)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=60, deadline=None)
def test_attend_convex_combination_bound(seed):
    rng = np.random.default_rng(seed)
    batch = int(rng.integers(1, 3))
    channels = int(rng.integers(1, 5))
    hw = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    k = int(rng.integers(0, 5))
    pool, x, unit = random_pool_case(rng, batch, channels, hw, k)
    out, _ = attend(pool, x, unit)
    aligned = [align_feature(h, unit).data for h in pool.entries] + [x.data]
    stacked = np.stack(aligned)
    assert (out.data <= stacked.max(axis=0) + 1e-9).all()
    assert (out.data >= stacked.min(axis=0) - 1e-9).all()


def test_attend_weight_scale_invariance():
    """Scaling one value entry leaves the attention trace unchanged within
    1e-6: RMSNorm keys are scale-free."""
    rng = np.random.default_rng(7)
    pool, x, unit = random_pool_case(rng, 1, 3, (3, 3), 2)
    pool.entries[0].data += np.sign(pool.entries[0].data)  # keep norms >= 1
    _, base = attend(pool, x, unit)
    pool.entries[0].data *= 3.7
    _, scaled = attend(pool, x, unit)
    npt.assert_allclose(base.weights, scaled.weights, atol=1e-6)


def test_attend_matches_oracle_smoke():
    rng = np.random.default_rng(8)
    for _ in range(10):
        batch = int(rng.integers(1, 3))
        channels = int(rng.integers(1, 4))
        hw = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        k = int(rng.integers(0, 4))
        pool, x, unit = random_pool_case(rng, batch, channels, hw, k)
        out, _ = attend(pool, x, unit)
        oracle = naive_attend_oracle(pool, x, unit)
        npt.assert_allclose(out.data, oracle, atol=1e-6)


def test_oracle_zero_query_matches_mean():
    rng = np.random.default_rng(9)
    unit = make_unit(2, (2, 2))
    pool = HistoryPool()
    entries = [rng.standard_normal((1, 2, 2, 2)) for _ in range(2)]
    for i, e in enumerate(entries):
        history_append(pool, Tensor(e), ("encoder", i + 1))
    x = rng.standard_normal((1, 2, 2, 2))
    oracle = naive_attend_oracle(pool, Tensor(x), unit)
    npt.assert_allclose(oracle, np.stack(entries + [x]).mean(axis=0), atol=1e-12)


def test_oracle_empty_pool_returns_input():
    unit = make_unit(2, (2, 2))
    x = np.random.default_rng(10).standard_normal((1, 2, 2, 2))
    npt.assert_array_equal(naive_attend_oracle(HistoryPool(), Tensor(x), unit), x)


# ------------------------------------------------------------------- trace

def test_trace_rows_and_uniformity():
    rng = np.random.default_rng(11)
    pool, x, unit = random_pool_case(rng, 1, 3, (4, 4), 3)
    _, trace = attend(pool, x, unit)
    rows = trace.rows()
    assert len(rows) == 4
    assert rows[-1][1] == "current"
    for site, side, index, mean_w, min_w, max_w in rows:
        assert site == "case"
        assert min_w <= mean_w <= max_w
    assert trace.uniformity_score() >= 0


def test_trace_uniformity_zero_at_zero_init():
    rng = np.random.default_rng(12)
    unit = make_unit(3, (4, 4), sources=[(("encoder", 1), 3)])
    pool = HistoryPool()
    history_append(pool, Tensor(rng.standard_normal((1, 3, 4, 4))), ("encoder", 1))
    x = Tensor(rng.standard_normal((1, 3, 4, 4)))
    _, trace = attend(pool, x, unit)
    assert trace.uniformity_score() == 0.0


# -------------------------------------------------------------- unit build

def test_build_unit_projections_only_for_mismatched_sources():
    unit = make_unit(4, (2, 2), sources=[(("encoder", 1), 4), (("encoder", 2), 7)])
    assert set(unit.projections) == {"encoder2"}
    assert unit.projections["encoder2"].data.shape == (4, 7, 1, 1)


def test_build_unit_zero_init_exact():
    unit = make_unit(5, (2, 2), init="zero")
    assert not unit.pseudo_query.data.any()
    npt.assert_array_equal(unit.rms_gain.data, np.ones(5))


def test_build_unit_init_scheme_bounds():
    c = 16
    kaiming = make_unit(c, (2, 2), init="kaiming-uniform", seed=1)
    xavier = make_unit(c, (2, 2), init="xavier-uniform", seed=1)
    normal = make_unit(c, (2, 2), init="random-normal", seed=1)
    assert np.abs(kaiming.pseudo_query.data).max() <= np.sqrt(6.0)
    assert np.abs(xavier.pseudo_query.data).max() <= np.sqrt(6.0 / (1 + c))
    # kaiming bound is much larger than xavier's for a [C, 1] weight
    assert np.abs(kaiming.pseudo_query.data).max() > np.abs(xavier.pseudo_query.data).max()
    assert np.abs(normal.pseudo_query.data).std() < 0.1


def test_unit_overhead_hand_case():
    unit = make_unit(8, (2, 2), sources=[(("encoder", 1), 8), (("encoder", 2), 16)])
    assert unit.overhead() == 8 + 8 + 8 * 16
