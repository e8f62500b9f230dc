import numpy as np
import pytest

from abmlora.autodiff import Graph, Tensor2, finite_diff_grad
from abmlora.errors import ConfigError, DimensionError
from abmlora.models import MLP, TransformerBlock, build_model


def test_mlp_default_placement_skips_head():
    model = MLP.random(4, [5, 5], 3)
    assert model.default_placement == ["fc1", "fc2"]
    assert model.matchable_layers == ["fc1", "fc2"]


def test_trainable_count(small_mlp):
    assert small_mlp.trainable_parameter_count() == 2 * (8 + 6) + 2 * (7 + 8)


def test_clone_is_independent(small_mlp):
    twin = small_mlp.clone()
    twin.layer("fc1").adapter.A.data += 1.0
    assert not np.array_equal(twin.layer("fc1").adapter.A.data, small_mlp.layer("fc1").adapter.A.data)


def test_input_dimension_checked():
    with pytest.raises(DimensionError):
        MLP.random(4, [5], 3).forward(np.zeros((2, 5)))


@pytest.mark.parametrize("act", ["relu", "gelu", "silu"])
def test_transformer_adapter_gradients(act, rng):
    model = TransformerBlock.random(3, 4, 6, 2, act, seed=1)
    model.attach_adapters(2, 2.0, "gaussian", 4)
    x, y = rng.normal(size=(5, 12)), rng.integers(0, 2, 5)
    ad = model.layer("q").adapter

    def loss(a):
        saved = ad.A
        ad.A = a
        logits, _ = model.forward(x)
        ad.A = saved
        return Graph(record=False).softmax_cross_entropy(logits, y)

    g = Graph()
    logits, _ = model.forward(x, g)
    g.backward(g.softmax_cross_entropy(logits, y))
    fd = finite_diff_grad(loss, Tensor2(ad.A.data.copy()), h=1e-6)
    np.testing.assert_allclose(ad.A.grad, fd.data, rtol=1e-5, atol=1e-9)


def test_transformer_attention_is_per_sample(rng):
    model = TransformerBlock.random(3, 4, 6, 2, "relu", seed=1)
    x = rng.normal(size=(4, 12))
    full = model.forward(x)[0].data
    single = model.forward(x[1:2])[0].data
    np.testing.assert_allclose(full[1:2], single, rtol=1e-12)


def test_build_model_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        build_model({"kind": "rnn"}, 3, 4)
