import numpy as np
import pytest

from xmodal import autodiff as ad
from xmodal.autodiff import ParamStore, Tensor, backward, grad_check, grad_of
from xmodal.errors import DegenerateVectorError
from xmodal.heads import (
    ImageHead,
    LossConfig,
    QueryHead,
    cosine_embedding_loss,
    embed_image,
    embed_query,
    multi_query_loss,
)
from xmodal.trainer import ModelDims, init_params

from conftest import rng_for


def make_query_head(rng, d_in, hidden, d_out, scale=0.5):
    ps = ParamStore()
    ps.add("query.w1", Tensor(scale * rng.standard_normal((hidden, d_in))))
    ps.add("query.b1", Tensor(scale * rng.standard_normal(hidden)))
    ps.add("query.w2", Tensor(scale * rng.standard_normal((d_out, hidden))))
    ps.add("query.b2", Tensor(scale * rng.standard_normal(d_out)))
    return ps


def make_image_head(rng, d_in, d_out, scale=0.5):
    ps = ParamStore()
    ps.add("image.w", Tensor(scale * rng.standard_normal((d_out, d_in))))
    ps.add("image.b", Tensor(scale * rng.standard_normal(d_out)))
    return ps


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# embedding heads


def test_default_width_is_512_and_unit_norm():
    dims = ModelDims(channels=16, query_dim=40)
    store = init_params(dims, seed=0)
    rng = rng_for(50)
    q = embed_query(Tensor(rng.standard_normal(40)), QueryHead(store))
    f = embed_image(Tensor(rng.standard_normal(16)), ImageHead(store))
    assert q.shape == (512,)
    assert f.shape == (512,)
    assert abs(np.linalg.norm(q.data) - 1.0) < 1e-9
    assert abs(np.linalg.norm(f.data) - 1.0) < 1e-9


def test_identity_block_head_normalizes_affine_image():
    # w1 = I and w2 an identity block with zero biases: a positive input
    # passes the ReLU untouched, so the output is just its normalization.
    ps = ParamStore()
    ps.add("query.w1", Tensor(np.eye(4)))
    ps.add("query.b1", Tensor(np.zeros(4)))
    ps.add("query.w2", Tensor(np.eye(3, 4)))
    ps.add("query.b2", Tensor(np.zeros(3)))
    x = np.array([0.5, 1.0, 2.0, 3.0])
    out = embed_query(Tensor(x), QueryHead(ps))
    assert np.max(np.abs(out.data - unit(x[:3]))) < 1e-12


def test_query_head_gradcheck_against_fixed_target():
    rng = rng_for(51)
    ps = make_query_head(rng, 6, 5, 4)
    ps.add("x", Tensor(rng.standard_normal(6)))
    target = Tensor(unit(rng.standard_normal(4)))

    def f(params):
        q = embed_query(params["x"], QueryHead(params))
        return ad.cosine_similarity(q, target)

    assert grad_check(f, ps) < 1e-4


def test_image_head_gradcheck():
    rng = rng_for(52)
    ps = make_image_head(rng, 5, 4)
    ps.add("pooled", Tensor(rng.standard_normal(5)))
    target = Tensor(unit(rng.standard_normal(4)))

    def f(params):
        emb = embed_image(params["pooled"], ImageHead(params))
        return ad.cosine_similarity(emb, target)

    assert grad_check(f, ps) < 1e-4


def test_degenerate_query_embedding_rejected():
    ps = make_query_head(rng_for(53), 4, 3, 2, scale=0.0)
    with pytest.raises(DegenerateVectorError):
        embed_query(Tensor(np.zeros(4)), QueryHead(ps))


def test_degenerate_image_embedding_rejected():
    ps = make_image_head(rng_for(54), 4, 3)
    ps["image.b"].data[:] = 0.0
    with pytest.raises(DegenerateVectorError):
        embed_image(Tensor(np.zeros(4)), ImageHead(ps))


def test_renormalizing_a_unit_embedding_changes_nothing():
    rng = rng_for(55)
    ps = make_query_head(rng, 6, 5, 4)
    emb = embed_query(Tensor(rng.standard_normal(6)), QueryHead(ps))
    again = ad.l2_normalize(emb)
    assert np.max(np.abs(again.data - emb.data)) < 1e-12
    cfg = LossConfig(margin=0.2)
    other = Tensor(unit(rng.standard_normal(4)))
    loss_a = cosine_embedding_loss(emb, other, -1, cfg).item()
    loss_b = cosine_embedding_loss(again, other, -1, cfg).item()
    assert abs(loss_a - loss_b) < 1e-12


# ---------------------------------------------------------------------------
# losses


def test_positive_identical_pair_is_zero():
    v = Tensor(unit(rng_for(56).standard_normal(5)))
    assert cosine_embedding_loss(v, v, 1, LossConfig()).item() < 1e-12


def test_orthogonal_negative_zero_margin():
    q = Tensor([1.0, 0.0])
    f = Tensor([0.0, 1.0])
    assert cosine_embedding_loss(q, f, -1, LossConfig(0.0)).item() == 0.0


def test_negative_margin_spot_value():
    # cos is exactly 0.8 for these unit vectors, so the loss must equal
    # the closed-form float expression max(0, 0.8 - 0.3).
    q = Tensor([1.0, 0.0])
    f = Tensor([0.8, 0.6])
    loss = cosine_embedding_loss(q, f, -1, LossConfig(0.3)).item()
    assert loss == max(0.0, 0.8 - 0.3)
    assert abs(loss - 0.5) < 1e-15


def test_label_validation():
    v = Tensor([1.0, 0.0])
    with pytest.raises(ValueError):
        cosine_embedding_loss(v, v, 0, LossConfig())


def test_margin_validation():
    with pytest.raises(ValueError):
        LossConfig(margin=1.0)
    with pytest.raises(ValueError):
        LossConfig(margin=-0.1)


def test_loss_nonnegative_and_bounded():
    rng = rng_for(57)
    for _ in range(100):
        q = Tensor(unit(rng.standard_normal(4)))
        f = Tensor(unit(rng.standard_normal(4)))
        y = int(rng.choice([1, -1]))
        m = float(rng.uniform(0.0, 0.99))
        loss = cosine_embedding_loss(q, f, y, LossConfig(m)).item()
        assert 0.0 <= loss <= 2.0


def test_positive_loss_zero_iff_cos_one():
    rng = rng_for(58)
    for _ in range(20):
        q = Tensor(unit(rng.standard_normal(4)))
        f = Tensor(unit(rng.standard_normal(4)))
        cos = ad.cosine_similarity(q, f).item()
        loss = cosine_embedding_loss(q, f, 1, LossConfig()).item()
        if abs(cos - 1.0) < 1e-9:
            assert loss < 1e-12
        else:
            assert loss > 0.0


def test_loss_gradcheck_both_labels():
    rng = rng_for(59)
    for y in (1, -1):
        ps = ParamStore()
        ps.add("q", Tensor(rng.standard_normal(4) + 0.2))
        ps.add("f", Tensor(rng.standard_normal(4) + 0.2))
        cfg = LossConfig(margin=0.1)

        def f(params):
            return cosine_embedding_loss(ad.l2_normalize(params["q"]),
                                         ad.l2_normalize(params["f"]), y, cfg)

        assert grad_check(f, ps) < 1e-4


def test_one_gradient_step_decreases_positive_loss():
    rng = rng_for(60)
    ps = make_query_head(rng, 6, 5, 4)
    x = Tensor(rng.standard_normal(6))
    target = Tensor(unit(rng.standard_normal(4)))
    cfg = LossConfig()

    def loss_tensor():
        return cosine_embedding_loss(embed_query(x, QueryHead(ps)), target, 1, cfg)

    before = loss_tensor()
    assert before.item() > 0.0
    grads = backward(before)
    for _, tensor in ps.items():
        tensor.data -= 1e-3 * grad_of(grads, tensor)
    assert loss_tensor().item() < before.item()


def test_multi_query_reduces_to_single():
    rng = rng_for(61)
    q = Tensor(unit(rng.standard_normal(4)))
    f = Tensor(unit(rng.standard_normal(4)))
    cfg = LossConfig(0.2)
    single = cosine_embedding_loss(q, f, -1, cfg).item()
    multi = multi_query_loss([(q, f)], -1, cfg).item()
    assert multi == single


def test_multi_query_additivity():
    # two terms engineered to cost 0.5 each
    q1, f1 = Tensor([1.0, 0.0]), Tensor([0.5, np.sqrt(0.75)])   # cos 0.5, y=+1
    q2, f2 = Tensor([1.0, 0.0]), Tensor([0.8, 0.6])
    cfg = LossConfig(0.3)
    a = cosine_embedding_loss(q1, f1, 1, cfg).item()
    assert abs(a - 0.5) < 1e-12
    total = multi_query_loss([(q1, f1), (q1, f1)], 1, cfg).item()
    assert abs(total - 1.0) < 1e-12

    rng = rng_for(62)
    for y in (1, -1):
        terms = [(Tensor(unit(rng.standard_normal(5))),
                  Tensor(unit(rng.standard_normal(5)))) for _ in range(2)]
        combined = multi_query_loss(terms, y, cfg).item()
        separate = sum(cosine_embedding_loss(q, f, y, cfg).item() for q, f in terms)
        assert abs(combined - separate) < 1e-12


def test_multi_query_empty_rejected():
    with pytest.raises(ValueError):
        multi_query_loss([], 1, LossConfig())
