"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the per-criterion lines are
printed in the terminal summary (or run this file directly as a script).
"""
import time
from importlib.resources import files

import numpy as np
import pytest

from abmlora.abm import AbmConfig, MaskSnapshot, abm_loss, abm_loss_graph, abm_loss_grad, capture, masks, \
    mismatch_rate, run_stage1
from abmlora.autodiff import ACTIVATIONS, Graph, Tensor2, finite_diff_grad
from abmlora.data import Dataset, build_scenario
from abmlora.experiment import load_config, race, source_adapter_model
from abmlora.geometry import decompose, first_order_update_check, grad_diff_nonlinear, layer_gradient
from abmlora.lora import LoraAdapter
from abmlora.models import MLP
from abmlora.train import TrainConfig, fine_tune, read_trace_csv

REPORT: dict[int, str] = {}
INFO: list[str] = []
DEFAULT_RACE = files("abmlora") / "configs" / "default_race.yaml"


def report(num: int, ok: bool, detail: str) -> None:
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    REPORT[num] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def default_race(tmp_path_factory):
    out = tmp_path_factory.mktemp("race")
    start = time.perf_counter()
    outcome = race(load_config(DEFAULT_RACE), out)
    return outcome, time.perf_counter() - start


# 1 -------------------------------------------------------------------------

def _kink_free_models(count):
    """Random small adapted MLPs, cycling activations, skipping draws near the ReLU kink."""
    seed = 0
    while count:
        act = ACTIVATIONS[seed % 3]
        rng = np.random.default_rng(seed)
        model = MLP.random(4, [5, 5], 3, act, seed=seed)
        model.attach_adapters(2, 3.0, "gaussian", seed)
        for ad in model.adapters().values():
            ad.A.data *= 10
            ad.B.data *= 10
        x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
        seed += 1
        _, pre = model.forward(x)
        if act == "relu" and min(np.abs(z.data).min() for z in pre.values()) < 1e-3:
            continue
        count -= 1
        yield model, x, y


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for model, x, y in _kink_free_models(20):
        params = [layer.W0 for layer in model.layers.values()] + model.adapter_parameters()
        for layer in model.layers.values():
            layer.W0.requires_grad = True
        g = Graph()
        logits, _ = model.forward(x, g)
        g.backward(g.softmax_cross_entropy(logits, y))
        for p in params:
            analytic = p.grad.copy()
            saved = p.data

            def f(t, p=p, saved=saved):
                p.data = t.data
                value = Graph(record=False).softmax_cross_entropy(model.forward(x)[0], y)
                p.data = saved
                return value

            fd = finite_diff_grad(f, Tensor2(saved.copy()), h=1e-6).data
            worst = max(worst, np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12))
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-5 and elapsed < 5.0, f"max rel err {worst:.2e} (< 1e-5), {elapsed:.2f}s (< 5s)")


# 2 -------------------------------------------------------------------------

def test_criterion_02_first_order_identity():
    rng = np.random.default_rng(2)
    worst, ratios = 0.0, []
    for _ in range(50):
        d, k, r = rng.integers(2, 9, size=3)
        r = min(r, d, k)
        A, B, g = rng.normal(size=(d, r)), rng.normal(size=(r, k)), rng.normal(size=(d, k))
        gamma, eta = rng.uniform(1e-3, 0.1), rng.uniform(0.5, 4.0)
        closed = (gamma * eta) ** 2 * np.linalg.norm(g @ B.T @ A.T @ g)
        got = first_order_update_check(A, B, g, gamma, eta)
        worst = max(worst, abs(got - closed) / max(1.0, closed))
        ratios.append(got / first_order_update_check(A, B, g, gamma / 2, eta))
    ok = worst < 1e-12 and all(3.999 <= q <= 4.001 for q in ratios)
    report(2, ok, f"max |residual - closed form| {worst:.2e} (< 1e-12), "
                  f"halving ratios in [{min(ratios):.6f}, {max(ratios):.6f}]")


# 3 -------------------------------------------------------------------------

def test_criterion_03_pythagorean_identity():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        d, k = rng.integers(3, 10, size=2)
        r = rng.integers(1, min(d, k) + 1)
        A, _ = np.linalg.qr(rng.normal(size=(d, r)))
        B0 = np.zeros((r, k))
        rep = decompose(rng.normal(size=(d, k)), rng.normal(size=(d, k)), A, B0, projection="verbatim")
        worst = max(worst, rep.pythagorean_residual / max(1.0, rep.total_discrepancy))
    report(3, worst < 1e-10, f"max relative residual {worst:.2e} (< 1e-10)")


# 4 -------------------------------------------------------------------------

def test_criterion_04_non_expansive(default_race):
    rng = np.random.default_rng(4)
    worst = -np.inf
    for _ in range(100):
        d, k = rng.integers(2, 10, size=2)
        r = rng.integers(1, min(d, k) + 1)
        A, B = rng.normal(size=(d, r)) * rng.uniform(0.1, 5), rng.normal(size=(r, k)) * rng.uniform(0.1, 5)
        rep = decompose(rng.normal(size=(d, k)), rng.normal(size=(d, k)), A, B, check=False)
        worst = max(worst, (rep.reducible - rep.upper_bound) / max(rep.upper_bound, 1e-300))
    outcome, _ = default_race
    probed, violations = 0, 0
    for path in sorted((outcome.out_dir / "runs").rglob("trace.csv")):
        for t in read_trace_csv(path):
            if t["total"] is not None:
                probed += 1
                violations += t["reducible"] > t["upper_bound"] * (1 + 1e-9)
    statuses_ok = all(r["status"] == "ok" for r in outcome.rows)
    ok = worst <= 1e-9 and violations == 0 and probed > 0 and statuses_ok
    report(4, ok, f"random trials worst relative excess {worst:.2e} (<= 1e-9); "
                  f"race probes {probed}, violations {violations}")


# 5 -------------------------------------------------------------------------

def test_criterion_05_activation_mask_bridge():
    rng = np.random.default_rng(5)
    model = MLP([rng.normal(size=(6, 4)), rng.normal(size=(3, 6))], "relu")
    x, y = rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
    z = x @ model.layer("fc1").W0.data.T
    g = layer_gradient(model, x, y, "fc1", use_adapters=False)

    def measure(A, B, eta_alpha=1.0):
        adapted = model.clone()
        adapted.layer("fc1").adapter = LoraAdapter(Tensor2(A), Tensor2(B), eta_alpha, A.shape[1])
        diff = grad_diff_nonlinear(model, adapted, (x, y), "fc1", error="pretrained").data
        rep = decompose(g, g - diff, A, B)
        return np.linalg.norm(diff), rep.reducible

    # sign-preserving: ||Delta x||_inf below min |W0 x|
    A, B = rng.normal(size=(6, 2)), rng.normal(size=(2, 4))
    A *= 0.5 * np.abs(z).min() / np.abs(x @ (A @ B).T).max()
    norm_keep, red_keep = measure(A, B)

    # flip exactly one (sample, neuron) sign with a rank-one Delta on that neuron's row
    flipped = None
    for i, j in sorted(np.ndindex(*z.shape), key=lambda ij: abs(z[ij])):
        u = x[i] / np.dot(x[i], x[i])
        shift = np.zeros(6)
        shift[j] = -1.5 * z[i, j]
        new = z + np.outer(x @ u, shift)
        if np.count_nonzero(np.sign(new) != np.sign(z)) == 1:
            flipped = (shift[:, None], u[None, :])
            break
    norm_flip, red_flip = measure(*flipped)
    ok = norm_keep < 1e-12 and red_keep < 1e-20 and norm_flip > 0 and red_flip > 0
    report(5, ok, f"preserved: |g - grad| {norm_keep:.1e}, reducible {red_keep:.1e}; "
                  f"one flip: |g - grad| {norm_flip:.3e}, reducible {red_flip:.3e}")


# 6 -------------------------------------------------------------------------

def test_criterion_06_hinge_subgradient():
    rng = np.random.default_rng(6)
    worst_ad, worst_fd, zero_ok, checked = 0.0, 0.0, True, 0
    for trial in range(20):
        shapes = {f"l{i}": (rng.integers(2, 9), rng.integers(2, 6)) for i in range(3)}
        n = rng.integers(2, 9)
        z = {name: rng.normal(size=(n, w)) for name, (_, w) in shapes.items()}
        tau = MaskSnapshot({name: np.where(rng.normal(size=(n, w)) > 0, 1.0, -1.0)
                            for name, (_, w) in shapes.items()})
        m = rng.choice([0.5, 1.0, 2.0])
        w = rng.uniform(0.2, 1.0, size=3)
        closed = abm_loss_grad(z, tau, m, w)
        leaves = {k: Tensor2(v, requires_grad=True) for k, v in z.items()}
        g = Graph()
        g.backward(abm_loss_graph(g, leaves, tau, m, w))
        for name in z:
            worst_ad = max(worst_ad, np.abs(closed[name] - leaves[name].grad).max())
            margin_met = tau.layers[name] * z[name] > m
            zero_ok &= bool(np.all(closed[name][margin_met] == 0.0))

            def f(t, name=name):
                return abm_loss({**z, name: t.data}, tau, m, w)
            # piecewise quadratic: central differences are exact while h stays inside the smooth region
            fd = finite_diff_grad(f, Tensor2(z[name]), h=1e-4).data
            smooth = np.abs(m - tau.layers[name] * z[name]) > 1e-3
            denom = np.maximum(np.abs(fd[smooth]), 1e-12)
            rel = np.abs(closed[name][smooth] - fd[smooth]) / denom
            nonzero = np.abs(fd[smooth]) > 1e-12
            if nonzero.any():
                worst_fd = max(worst_fd, rel[nonzero].max())
            checked += int(smooth.sum())
    ok = worst_ad < 1e-14 and worst_fd < 1e-6 and zero_ok
    report(6, ok, f"closed vs autodiff {worst_ad:.1e}; closed vs FD rel {worst_fd:.1e} (< 1e-6) "
                  f"over {checked} smooth entries; zero where tau*z > m: {zero_ok}")


# 7 -------------------------------------------------------------------------

def test_criterion_07_stage1_efficacy():
    start = time.perf_counter()
    cfg = load_config(DEFAULT_RACE)
    base, _, fine = build_scenario(cfg.scenario)
    reference = source_adapter_model(base, cfg)
    layers = base.matchable_layers

    def full_pool_mismatch(model):
        ref = capture(reference, fine.inputs, "pretrained", layers)
        return mismatch_rate(masks(ref), masks(capture(model, fine.inputs, "finetuned", layers)))

    model = base.clone()
    model.attach_adapters(cfg.adapter.rank, cfg.adapter.alpha, "kaiming_a_zero_b", 0)
    before = full_pool_mismatch(model)
    run_stage1(model, reference, fine.inputs, AbmConfig(margin=0.5, steps=100, step_size=1e-2), seed=0)
    after = full_pool_mismatch(model)

    model = base.clone()
    model.attach_adapters(cfg.adapter.rank, cfg.adapter.alpha, "kaiming_a_zero_b", 0)
    _, trace = run_stage1(model, reference, fine.inputs,
                          AbmConfig(margin=0.5, steps=100, step_size=1e-5, batch_policy="fixed"), seed=0)
    rise = float(np.max(np.diff(trace.losses)))
    elapsed = time.perf_counter() - start
    ok = before > 0 and after <= 0.5 * before and rise <= 1e-8 and elapsed < 30
    report(7, ok, f"mismatch {before:.4f} -> {after:.4f} (<= 50%); fixed-batch mu=1e-5 largest step "
                  f"increase {rise:.1e} (<= 1e-8); {elapsed:.1f}s (< 30s)")


# 8 -------------------------------------------------------------------------

def test_criterion_08_early_convergence(default_race):
    outcome, elapsed = default_race
    wins = outcome.metrics["wins"][0]
    n = wins["seeds"]
    a, b = wins["step10_loss_wins"], wins["early_total_wins"]
    ok = n == 10 and a >= 8 and b >= 8 and elapsed < 300 and outcome.ok
    report(8, ok, f"abm vs vanilla over {n} seeds: step-10 loss lower in {a}/10, "
                  f"early info loss lower in {b}/10 (need 8/10 each); {elapsed:.1f}s (< 300s)")


def test_paper_style_learning_rates(tmp_path):
    """Informational: ABM fine-tuned at 3x the baseline rate, as in the T5 settings."""
    cfg = load_config(DEFAULT_RACE)
    cfg.learning_rates = {"abm": 3 * cfg.train.learning_rate}
    wins = race(cfg, tmp_path).metrics["wins"][0]
    line = (f"informational: abm fine-tuned at 3x the rate, step-10 loss lower in "
            f"{wins['step10_loss_wins']}/10, early info loss lower in {wins['early_total_wins']}/10")
    INFO.append(line)
    print(line)


# 9 -------------------------------------------------------------------------

def test_criterion_09_determinism(default_race, tmp_path):
    first, _ = default_race
    reruns = [race(load_config(DEFAULT_RACE), tmp_path / f"w{w}", workers=w).out_dir for w in (1, 2)]
    mismatched = []
    files_checked = 0
    for other in reruns:
        for f in sorted(first.out_dir.rglob("*")):
            if f.suffix in (".csv", ".json"):
                files_checked += 1
                if f.read_bytes() != (other / f.relative_to(first.out_dir)).read_bytes():
                    mismatched.append(str(f.relative_to(first.out_dir)))
    report(9, not mismatched and files_checked > 0,
           f"{files_checked} metrics/trace files compared across reruns with 1 and 2 workers, "
           f"{len(mismatched)} differ")


# 10 ------------------------------------------------------------------------

def test_criterion_10_parameter_count(default_race):
    outcome, _ = default_race
    rows_ok = all(r["trainable_params"] == r["expected_params"] and r["w0_unchanged"] for r in outcome.rows)
    model = MLP.random(7, [9, 5], 3, seed=1)
    model.attach_adapters(3, 6.0, "gaussian", 2)
    counts = {n: ad.num_parameters() for n, ad in model.adapters().items()}
    expected = {"fc1": 3 * (9 + 7), "fc2": 3 * (5 + 9)}
    before = {n: w.tobytes() for n, w in model.base_weights().items()}
    rng = np.random.default_rng(10)
    data = Dataset(rng.normal(size=(40, 7)), rng.integers(0, 3, 40))
    fine_tune(model, data, TrainConfig(learning_rate=0.05, epochs=2, batch_size=8))
    run_stage1(model, "base", data.inputs, AbmConfig(steps=5, step_size=1e-2), 0)
    after = {n: w.tobytes() for n, w in model.base_weights().items()}
    ok = rows_ok and counts == expected and before == after
    report(10, ok, f"{len(outcome.rows)} race runs report r(d+k) and unchanged W0: {rows_ok}; "
                   f"direct counts {counts}; W0 bit-identical after stage 1 and 2: {before == after}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
