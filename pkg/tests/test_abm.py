import numpy as np
import pytest

from abmlora.abm import (AbmConfig, MaskSnapshot, ReferenceModel, abm_loss, abm_loss_grad, abm_loss_graph,
                         capture, layer_weights, masks, mismatch_rate, resolve_layers, run_stage1)
from abmlora.autodiff import Graph, Tensor2, finite_diff_grad
from abmlora.errors import ConfigError, DataError, DimensionError
from abmlora.lora import save_adapters
from abmlora.models import MLP

# plain nested loops over the same draw, frozen
LOOP_LOSS = 2.861519309586412


def _draw():
    rng = np.random.default_rng(11)
    z_pt = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(4, 2))}
    z = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=(4, 2))}
    return z_pt, z


def test_loss_matches_loop_oracle():
    z_pt, z = _draw()
    tau = MaskSnapshot({n: np.where(v > 0, 1.0, -1.0) for n, v in z_pt.items()})
    assert abm_loss(z, tau, 0.5, layer_weights(2)) == pytest.approx(LOOP_LOSS, rel=1e-14)


def test_layer_weights():
    np.testing.assert_allclose(layer_weights(4, "sequential"), [0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(layer_weights(2, "quadratic"), [0.25, 1.0])
    np.testing.assert_array_equal(layer_weights(3, "uniform"), [1, 1, 1])
    with pytest.raises(ConfigError):
        layer_weights(0)


def test_masks_map_zero_to_minus_one():
    from abmlora.abm import ActivationCapture
    tau = masks(ActivationCapture({"l": np.array([[0.0, 2.0, -1.0]])}))
    np.testing.assert_array_equal(tau.layers["l"], [[-1.0, 1.0, -1.0]])


def test_gradient_zero_where_margin_met():
    tau = MaskSnapshot({"l": np.array([[1.0, -1.0]])})
    grad = abm_loss_grad({"l": np.array([[0.6, -0.7]])}, tau, 0.5, [1.0])
    assert not grad["l"].any()
    assert abm_loss({"l": np.array([[0.6, -0.7]])}, tau, 0.5, [1.0]) == 0.0


def test_closed_form_matches_autodiff_and_fd(rng):
    z_pt, z = _draw()
    tau = MaskSnapshot({n: np.where(v > 0, 1.0, -1.0) for n, v in z_pt.items()})
    w = layer_weights(2)
    closed = abm_loss_grad(z, tau, 0.5, w)
    leaves = {n: Tensor2(v, requires_grad=True) for n, v in z.items()}
    g = Graph()
    g.backward(abm_loss_graph(g, leaves, tau, 0.5, w))
    for n in z:
        np.testing.assert_allclose(closed[n], leaves[n].grad, rtol=1e-14, atol=1e-16)

        def f(t, n=n):
            return abm_loss({**z, n: t.data}, tau, 0.5, w)
        fd = finite_diff_grad(f, Tensor2(z[n]), h=1e-7)
        np.testing.assert_allclose(closed[n], fd.data, rtol=1e-6, atol=1e-9)


def test_shape_mismatch():
    tau = MaskSnapshot({"l": np.ones((2, 3))})
    with pytest.raises(DimensionError):
        abm_loss({"l": np.ones((2, 2))}, tau, 0.5, [1.0])


def test_capture_identical_for_zero_delta(rng):
    model = MLP.random(5, [6, 6], 3, seed=0)
    model.attach_adapters(2, 2.0, "kaiming_a_zero_b", 0)
    x = rng.normal(size=(7, 5))
    pt = capture(model, x, "pretrained", use_adapters=False)
    ft = capture(model, x, "finetuned")
    for n in pt.layers:
        assert pt.layers[n].tobytes() == ft.layers[n].tobytes()
    assert mismatch_rate(pt, ft) == 0.0


def test_capture_rejects_empty_batch():
    with pytest.raises(DataError):
        capture(MLP.random(5, [6], 3), np.zeros((0, 5)))


def test_resolve_layers():
    model = MLP.random(5, [6, 6, 6, 6], 3)
    assert resolve_layers(model, "last_half") == ["fc3", "fc4"]
    assert resolve_layers(model, ["fc2"]) == ["fc2"]
    with pytest.raises(ConfigError):
        resolve_layers(model, ["head"])


def test_config_validation():
    with pytest.raises(ConfigError, match="margin"):
        AbmConfig(margin=0.0)
    with pytest.raises(ConfigError, match="scope"):
        AbmConfig(scope="encoder")


def test_fixed_point_when_margins_met(rng):
    model = MLP.random(5, [6], 3, seed=0)
    model.attach_adapters(2, 2.0, "kaiming_a_zero_b", 0)
    x = rng.normal(size=(40, 5))
    z = x @ model.layer("fc1").W0.data.T
    keep = np.all(np.abs(z) >= 0.1, axis=1)
    before = model.layer("fc1").adapter.A.data.copy()
    _, trace = run_stage1(model, "base", x[keep], AbmConfig(margin=0.1, steps=3), 0)
    assert trace.losses[0] == 0.0
    np.testing.assert_array_equal(model.layer("fc1").adapter.A.data, before)
    assert not model.layer("fc1").adapter.B.data.any()


def _drifted(rng):
    base = MLP.random(5, [8, 8], 3, seed=2)
    ref = base.clone()
    ref.attach_adapters(2, 2.0, "gaussian", 9)
    for ad in ref.adapters().values():
        ad.A.data *= 30
        ad.B.data *= 30
    return base, ref, rng.normal(size=(64, 5))


def test_stage1_reduces_mismatch(rng):
    base, ref, pool = _drifted(rng)
    model = base.clone()
    model.attach_adapters(2, 2.0, "kaiming_a_zero_b", 1)
    _, trace = run_stage1(model, ref, pool, AbmConfig(steps=100, step_size=0.1), 0)
    assert trace.mismatch_rates[0] > 0
    assert trace.mismatch_rates[-1] <= 0.5 * trace.mismatch_rates[0]
    assert len(trace.records) == 101


def test_reference_checkpoint_equals_model(rng, tmp_path):
    base, ref, pool = _drifted(rng)
    save_adapters(tmp_path / "ref.ckpt", ref.adapters())
    runs = []
    for reference in (ref, str(tmp_path / "ref.ckpt")):
        model = base.clone()
        model.attach_adapters(2, 2.0, "kaiming_a_zero_b", 1)
        runs.append(run_stage1(model, reference, pool, AbmConfig(steps=5, step_size=1e-2), 0)[1].losses)
    assert runs[0] == runs[1]


def test_reference_must_share_w0(rng):
    base = MLP.random(5, [8], 3, seed=2)
    with pytest.raises(ConfigError):
        ReferenceModel(base, MLP.random(5, [8], 3, seed=3))


def test_selected_scope_leaves_other_adapters(rng):
    base, ref, pool = _drifted(rng)
    model = base.clone()
    model.attach_adapters(2, 2.0, "kaiming_a_zero_b", 1)
    fc1 = model.layer("fc1").adapter.A.data.copy()
    run_stage1(model, ref, pool, AbmConfig(steps=5, step_size=1e-2, layer_selection=["fc2"], scope="selected"), 0)
    np.testing.assert_array_equal(model.layer("fc1").adapter.A.data, fc1)
    assert model.layer("fc2").adapter.B.data.any()


def test_stage1_trace_csv(rng, tmp_path):
    base, ref, pool = _drifted(rng)
    model = base.clone()
    model.attach_adapters(2, 2.0, "kaiming_a_zero_b", 1)
    _, trace = run_stage1(model, ref, pool, AbmConfig(steps=4, step_size=1e-2), 0)
    trace.write_csv(tmp_path / "s1.csv")
    lines = (tmp_path / "s1.csv").read_text().splitlines()
    assert lines[0] == "step,abm_loss,mismatch_rate,share_fc1,share_fc2"
    assert len(lines) == 6
    assert float(lines[1].split(",")[1]) == trace.losses[0]


def test_stage1_is_deterministic(rng):
    base, ref, pool = _drifted(rng)
    out = []
    for _ in range(2):
        model = base.clone()
        model.attach_adapters(2, 2.0, "kaiming_a_zero_b", 1)
        run_stage1(model, ref, pool, AbmConfig(steps=10, step_size=1e-2), 3)
        out.append(model.layer("fc2").adapter.B.data.tobytes())
    assert out[0] == out[1]
