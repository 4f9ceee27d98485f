import numpy as np
import pytest

from ngcg import numcore as nc
from ngcg.encoder import EncoderConfig, EncoderParams, TokenSequence, encode_text
from ngcg.errors import ContractError, DimensionError, RankError
from ngcg.lora import LoRAAdapter, adapted_forward, attach, merge, trainable_parameters
from ngcg.pooling import PoolingConfig


@pytest.fixture(scope="module")
def params():
    return EncoderParams.init(EncoderConfig(), seed=0)


def random_adapter(rng, d_in, d_out, r, alpha):
    return LoRAAdapter(rng.normal(size=(r, d_out)), rng.normal(size=(d_in, r)), alpha, r, "w")


def test_attach_covers_every_trunk_matrix(params):
    lora = attach(params, 16, 128.0, seed=1)
    assert lora.coverage == sorted(params.trunk_targets())
    assert len(lora) == 12
    for ad in lora.adapters.values():
        assert np.all(ad.B == 0)
        assert ad.A.std() > 0


@pytest.mark.parametrize("alpha, expected", [(128.0, 8.0), (16.0, 1.0), (32.0, 2.0), (64.0, 4.0)])
def test_scaling_factor(params, alpha, expected):
    lora = attach(params, 16, alpha, seed=1)
    assert all(ad.scaling == expected for ad in lora.adapters.values())


def test_attach_then_forward_is_bit_identical(params):
    lora = attach(params, 16, 128.0, seed=1)
    seq = TokenSequence.from_body([5, 9, 30, 70, 100])
    base = encode_text(params, None, seq).value
    adapted = encode_text(params, lora, seq).value
    assert np.array_equal(base, adapted)


def test_attach_rejects_bad_rank_and_alpha(params):
    with pytest.raises(RankError):
        attach(params, 65, 8.0, seed=0)
    with pytest.raises(RankError):
        attach(params, 0, 8.0, seed=0)
    with pytest.raises(ContractError):
        attach(params, 4, 0.0, seed=0)


def test_adapted_forward_zero_b_is_base():
    rng = np.random.default_rng(0)
    W0 = rng.normal(size=(6, 4))
    ad = LoRAAdapter(rng.normal(size=(2, 4)), np.zeros((6, 2)), 8.0, 2, "w")
    x = rng.normal(size=(3, 6))
    assert np.array_equal(adapted_forward(W0, ad, x), x @ W0)


def test_adapted_forward_by_hand():
    W0 = np.zeros((3, 2))
    ad = LoRAAdapter(np.array([[1.0, 0.0]]), np.array([[1.0], [2.0], [3.0]]), 1.0, 1, "w")
    out = adapted_forward(W0, ad, np.array([[1.0, 1.0, 1.0]]))
    np.testing.assert_array_equal(out, [[6.0, 0.0]])


def test_adapted_forward_matches_dense_materialization():
    rng = np.random.default_rng(5)
    W0 = rng.normal(size=(8, 5))
    ad = random_adapter(rng, 8, 5, 3, 12.0)
    x = rng.normal(size=(7, 8))
    dense = x @ (W0 + (12.0 / 3) * (ad.B @ ad.A))
    np.testing.assert_allclose(adapted_forward(W0, ad, x), dense, rtol=0, atol=1e-10)


def test_adapted_forward_shape_errors():
    rng = np.random.default_rng(0)
    ad = random_adapter(rng, 8, 5, 3, 1.0)
    with pytest.raises(DimensionError):
        adapted_forward(np.zeros((8, 5)), ad, np.zeros((2, 7)))
    with pytest.raises(DimensionError):
        adapted_forward(np.zeros((8, 4)), ad, np.zeros((2, 8)))


def test_merge_zero_b_unchanged():
    rng = np.random.default_rng(0)
    W0 = rng.normal(size=(4, 4))
    ad = LoRAAdapter(rng.normal(size=(2, 4)), np.zeros((4, 2)), 4.0, 2, "w")
    assert np.array_equal(merge(W0, ad), W0)


def test_merge_equivalence_on_random_inputs():
    rng = np.random.default_rng(9)
    W0 = rng.normal(size=(64, 256))
    ad = random_adapter(rng, 64, 256, 16, 128.0)
    merged = merge(W0, ad)
    x = rng.normal(size=(100, 64))
    assert np.max(np.abs(adapted_forward(W0, ad, x) - x @ merged)) < 1e-10


def test_alpha_zero_rejected():
    with pytest.raises(ContractError):
        LoRAAdapter(np.zeros((2, 4)), np.zeros((4, 2)), 0.0, 2, "w")


def test_graph_form_matches_array_form():
    rng = np.random.default_rng(2)
    W0 = rng.normal(size=(6, 4))
    ad = random_adapter(rng, 6, 4, 2, 5.0)
    x = rng.normal(size=(3, 6))
    from ngcg.lora import adapted_linear
    out = adapted_linear(nc.const(x), nc.const(W0), nc.const(ad.A), nc.const(ad.B), ad.scaling)
    np.testing.assert_array_equal(out.value, adapted_forward(W0, ad, x))


def test_trainable_parameter_counts(params):
    lora = attach(params, 16, 128.0, seed=1)
    eos = trainable_parameters(lora, PoolingConfig("eos"))
    assert len(eos) == 24
    assert all(n.startswith("lora.") for n in eos)
    query = trainable_parameters(lora, PoolingConfig.create("query", 64))
    assert set(query) - set(eos) == {"pool.query"}
    assert not any(n in params.tensors for n in query)


def test_gradients_reach_only_adapters(params):
    lora = attach(params, 2, 4.0, seed=3)
    rng = np.random.default_rng(0)
    for ad in lora.adapters.values():
        ad.B[:] = rng.normal(0, 0.1, ad.B.shape)
    tensors = {**params.tensors, **lora.tensors()}
    bind = nc.Bindings(tensors, trainable=lora.tensors().keys())
    seq = TokenSequence.from_body([4, 8, 15, 16, 23, 42])
    h = encode_text(params, lora, seq, bind)
    loss = nc.total(nc.scale(h.states, 0.1))
    frozen = [nc.param(params.tensors[n]) for n in params.trunk_targets()]
    grads = nc.backward(loss, list(bind.params().values()) + frozen)
    for node in frozen:
        assert np.all(grads[node] == 0)
    assert any(np.abs(grads[n]).max() > 0 for n in bind.params().values())
