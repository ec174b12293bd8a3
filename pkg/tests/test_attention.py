import math

import numpy as np
import pytest

from xmodal import autodiff as ad
from xmodal.attention import (
    AttentionParams,
    FeatureGrid,
    attend_sequence,
    attention_weights,
    pool,
    score_locations,
)
from xmodal.autodiff import ParamStore, Tensor, grad_check
from xmodal.errors import DimensionError

from conftest import rng_for


def make_store(rng, channels, d_h, d_a, scale=0.5):
    ps = ParamStore()
    for tag in ("i", "f", "o", "g"):
        ps.add(f"attn.lstm.wx_{tag}", Tensor(scale * rng.standard_normal((d_h, channels))))
        ps.add(f"attn.lstm.wh_{tag}", Tensor(scale * rng.standard_normal((d_h, d_h))))
        ps.add(f"attn.lstm.b_{tag}", Tensor(scale * rng.standard_normal(d_h)))
    ps.add("attn.score.w_h", Tensor(scale * rng.standard_normal((d_a, d_h))))
    ps.add("attn.score.w_p", Tensor(scale * rng.standard_normal((d_a, channels))))
    ps.add("attn.score.w", Tensor(scale * rng.standard_normal(d_a)))
    ps.add("attn.score.b", Tensor(scale * rng.standard_normal(d_a)))
    return ps


def zero_store(channels, d_h, d_a):
    rng = rng_for(0)
    ps = make_store(rng, channels, d_h, d_a, scale=0.0)
    return ps


def make_grid(rng, grid_h, grid_w, channels):
    values = rng.standard_normal((grid_h * grid_w, channels))
    return FeatureGrid(grid_h, grid_w, channels, Tensor(values))


def test_zero_params_give_equal_scores():
    grid = make_grid(rng_for(30), 2, 3, 4)
    params = AttentionParams(zero_store(4, 5, 3))
    scores = score_locations(Tensor(np.zeros(5)), grid, params)
    assert np.array_equal(scores.data, np.zeros(6))


def test_single_location_collapses_to_one():
    grid = make_grid(rng_for(31), 1, 1, 4)
    params = AttentionParams(make_store(rng_for(32), 4, 5, 3))
    scores = score_locations(Tensor(np.zeros(5)), grid, params)
    assert scores.shape == (1,)
    weights = attention_weights(scores)
    assert weights.data.tolist() == [1.0]


def test_score_gradients_match_finite_differences():
    rng = rng_for(33)
    ps = make_store(rng, 3, 4, 3)
    ps.add("h", Tensor(rng.standard_normal(4)))
    ps.add("grid", Tensor(rng.standard_normal((5, 3))))

    def f(params):
        grid = FeatureGrid(5, 1, 3, params["grid"])
        s = score_locations(params["h"], grid, AttentionParams(params))
        return ad.sum_all(ad.mul(s, s))

    assert grad_check(f, ps) < 1e-4


def test_attention_weights_trivial_values():
    assert attention_weights(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    out = attention_weights(Tensor([math.log(3.0), 0.0])).data
    assert np.max(np.abs(out - [0.75, 0.25])) < 1e-15


def test_attention_weights_match_exp_normalization_oracle():
    rng = rng_for(34)
    for _ in range(20):
        scores = rng.standard_normal(int(rng.integers(1, 9)))
        expected = np.exp(scores) / np.exp(scores).sum()
        got = attention_weights(Tensor(scores)).data
        assert np.max(np.abs(got - expected)) < 1e-12


def test_attention_weights_empty_rejected():
    with pytest.raises(DimensionError):
        attention_weights(Tensor(np.zeros(0)))


def test_pool_one_hot_copies_row():
    grid = make_grid(rng_for(35), 2, 2, 3)
    for k in range(4):
        weights = np.zeros(4)
        weights[k] = 1.0
        out = pool(grid, Tensor(weights))
        assert np.array_equal(out.data, grid.values.data[k])


def test_pool_uniform_is_row_mean():
    grid = make_grid(rng_for(36), 2, 3, 4)
    out = pool(grid, Tensor(np.full(6, 1.0 / 6.0)))
    assert np.max(np.abs(out.data - grid.values.data.mean(axis=0))) < 1e-12


def test_pool_matches_weighted_sum_oracle():
    rng = rng_for(37)
    for _ in range(10):
        grid = make_grid(rng, 2, 3, 4)
        weights = rng.dirichlet(np.ones(6))
        expected = np.zeros(4)
        for l in range(6):
            expected += weights[l] * grid.values.data[l]
        got = pool(grid, Tensor(weights)).data
        assert np.max(np.abs(got - expected)) < 1e-12


def test_pool_length_mismatch():
    grid = make_grid(rng_for(38), 2, 2, 3)
    with pytest.raises(DimensionError):
        pool(grid, Tensor(np.ones(5) / 5.0))


def test_pool_gradients_match_finite_differences():
    rng = rng_for(39)
    ps = ParamStore()
    ps.add("grid", Tensor(rng.standard_normal((6, 4))))
    ps.add("weights", Tensor(rng.dirichlet(np.ones(6))))

    def f(params):
        grid = FeatureGrid(2, 3, 4, params["grid"])
        out = pool(grid, params["weights"])
        return ad.sum_all(ad.mul(out, out))

    assert grad_check(f, ps) < 1e-4


# ---------------------------------------------------------------------------
# attend_sequence


def test_single_step_equals_manual_pass():
    rng = rng_for(40)
    ps = make_store(rng, 4, 5, 3)
    params = AttentionParams(ps)
    grid = make_grid(rng, 2, 3, 4)

    [(weights, pooled)] = attend_sequence(grid, 1, params)

    x = ad.matmul(Tensor(np.full(6, 1.0 / 6.0)), grid.values)
    h, _ = ad.lstm_step(x, Tensor(np.zeros(5)), Tensor(np.zeros(5)), ps,
                        prefix="attn.lstm.")
    expected_w = attention_weights(score_locations(h, grid, params))
    expected_f = pool(grid, expected_w)
    assert weights.data.tobytes() == expected_w.data.tobytes()
    assert pooled.data.tobytes() == expected_f.data.tobytes()


def test_single_location_grid_pools_to_its_row():
    rng = rng_for(41)
    params = AttentionParams(make_store(rng, 4, 5, 3))
    grid = make_grid(rng, 1, 1, 4)
    for _, pooled in attend_sequence(grid, 3, params):
        assert np.array_equal(pooled.data, grid.values.data[0])


def test_two_steps_emit_distinct_simplex_maps():
    rng = rng_for(42)
    params = AttentionParams(make_store(rng, 4, 5, 3))
    grid = make_grid(rng, 2, 3, 4)
    steps = attend_sequence(grid, 2, params)
    for weights, _ in steps:
        assert weights.data.min() >= 0.0
        assert abs(weights.data.sum() - 1.0) < 1e-6
    assert not np.array_equal(steps[0][0].data, steps[1][0].data)


def test_attend_sequence_rejects_zero_steps():
    params = AttentionParams(zero_store(4, 5, 3))
    grid = make_grid(rng_for(43), 2, 2, 4)
    with pytest.raises(ValueError):
        attend_sequence(grid, 0, params)


def test_attend_sequence_deterministic():
    rng = rng_for(44)
    params = AttentionParams(make_store(rng, 4, 5, 3))
    grid = make_grid(rng, 3, 3, 4)
    a = attend_sequence(grid, 2, params)
    b = attend_sequence(grid, 2, params)
    for (wa, fa), (wb, fb) in zip(a, b):
        assert wa.data.tobytes() == wb.data.tobytes()
        assert fa.data.tobytes() == fb.data.tobytes()


def test_simplex_invariant_random_draws():
    rng = rng_for(45)
    for _ in range(50):
        d_h, d_a, m = (int(x) for x in rng.integers(2, 6, size=3))
        gh, gw = (int(x) for x in rng.integers(1, 4, size=2))
        params = AttentionParams(make_store(rng, m, d_h, d_a, scale=2.0))
        grid = make_grid(rng, gh, gw, m)
        for weights, _ in attend_sequence(grid, 2, params):
            assert weights.data.min() >= 0.0
            assert abs(weights.data.sum() - 1.0) < 1e-6


def test_pooled_features_are_convex_combinations():
    rng = rng_for(46)
    for _ in range(20):
        params = AttentionParams(make_store(rng, 5, 4, 3, scale=1.5))
        grid = make_grid(rng, 2, 3, 5)
        lo = grid.values.data.min(axis=0) - 1e-12
        hi = grid.values.data.max(axis=0) + 1e-12
        for _, pooled in attend_sequence(grid, 2, params):
            assert np.all(pooled.data >= lo)
            assert np.all(pooled.data <= hi)


@pytest.mark.parametrize("n", [1, 2])
def test_end_to_end_gradients_through_sequence(n):
    rng = rng_for(47 + n)
    ps = make_store(rng, 5, 4, 3)
    grid = make_grid(rng, 2, 3, 5)

    def f(params):
        steps = attend_sequence(grid, n, AttentionParams(params))
        _, pooled = steps[-1]
        return ad.sum_all(ad.mul(pooled, pooled))

    assert grad_check(f, ps) < 1e-4
