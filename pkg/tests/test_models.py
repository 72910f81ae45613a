import math

import numpy as np
import pytest

from floodplan import autodiff as ad
from floodplan.autodiff import Tape, Tensor, finite_difference, grad, relative_error
from floodplan.errors import CapabilityError, ConfigError, ContractError, DimensionError
from floodplan.losses import Thresholds, threshold_loss
from floodplan.models import (
    COMPONENTS, GtnConfig, ablate, cross_attention, extract_attention, graph_conv, load_checkpoint,
    normalized_adjacency, param_count,
)
from floodplan.models.networks import GtnNetwork
from floodplan.training import manager_levels

from conftest import TINY_CONFIGS

ARCHS = ("mlp", "tcn", "gtn")


def batch(ws, idx):
    return ws.past_batch(idx), ws.future_batch(idx)


# ---------------------------------------------------------------- shapes and determinism


@pytest.mark.parametrize("arch", ARCHS)
def test_default_output_shapes(default_bundle, arch):
    b = default_bundle
    idx = np.arange(3)
    out = b.evaluator(arch).forward(*batch(b.train, idx))
    assert out.shape == (3, 24, 4)
    mw = b.manager_windows(b.train)
    sched = b.manager(arch).forward(*batch(mw, idx))
    assert sched.shape == (3, 24, 5)


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_is_deterministic(default_bundle, arch):
    b = default_bundle
    ev1, ev2 = b.evaluator(arch, seed=3), b.evaluator(arch, seed=3)
    past, fut = batch(b.train, np.arange(4))
    np.testing.assert_array_equal(ev1.forward(past, fut).data, ev2.forward(past, fut).data)
    np.testing.assert_array_equal(ev1.forward(past, fut).data, ev1.forward(past, fut).data)


def test_shape_mismatch_is_a_dimension_error(default_bundle):
    b = default_bundle
    past, fut = batch(b.train, np.arange(2))
    with pytest.raises(DimensionError):
        b.evaluator("mlp").forward(past[:, :-1], fut)
    with pytest.raises(DimensionError):
        b.evaluator("gtn").forward(past, fut[:, :, :5])
    with pytest.raises(DimensionError):
        # manager future block must exclude control columns
        b.manager("mlp").forward(past, fut)


@pytest.mark.parametrize("arch", ARCHS)
def test_evaluator_gradient_wrt_gate_slice(default_bundle, arch):
    b = default_bundle
    ev = b.evaluator(arch, seed=2)
    past, fut = batch(b.train, np.arange(1))
    future = Tensor(fut.copy(), requires_grad=True)
    fn = lambda: ev.forward(past, future).sum()  # noqa: E731
    with Tape() as tape:
        loss = fn()
    analytic = grad(loss, tape, [future])[0]
    numeric = finite_difference(fn, future)
    gates = [i for i, c in enumerate(ev.io.covariate_names) if c.startswith("GATE_")]
    assert len(gates) == 3
    assert np.abs(analytic[..., gates]).max() > 0
    assert relative_error(analytic[..., gates], numeric[..., gates]) <= 1e-5


# ---------------------------------------------------------------- manager clamp


@pytest.mark.parametrize("arch", ARCHS)
def test_manager_clamp_is_the_final_layer(default_bundle, arch):
    b = default_bundle
    mg = b.manager(arch)
    mw = b.manager_windows(b.train)
    assert mg.output_layers[-1] == "clamp"
    with Tape() as tape:
        out = mg.forward(*batch(mw, np.arange(2)))
    assert tape.nodes[-1].op == "clamp" and tape.nodes[-1].output is out


@pytest.mark.parametrize("arch", ARCHS)
def test_manager_bounds_hold_for_random_inputs(default_bundle, arch):
    b = default_bundle
    mg = b.manager(arch, seed=7)
    rng = np.random.default_rng(8)
    n = 10_000 if arch == "mlp" else 2_000
    past = rng.normal(scale=5.0, size=(n, 72, 11))
    fut = rng.normal(scale=5.0, size=(n, 24, 2))
    sched = mg.schedule(past, fut, batch=500)
    assert sched.shape == (n, 24, 5)
    assert np.count_nonzero((sched < 0.0) | (sched > 1.0)) == 0
    # large inputs actually reach both saturation levels
    assert (sched == 0.0).any() or (sched == 1.0).any()


def test_saturated_activation_emits_lower_bound(default_bundle):
    b = default_bundle
    mg = b.manager("mlp")
    last = max(int(n[3:].split(".")[0]) for n in mg.params if n.startswith("mlp"))
    arrays = mg.params.arrays()
    arrays[f"mlp{last}.w"] = np.zeros_like(arrays[f"mlp{last}.w"])
    # the clamp input is the network output plus the range centre 0.5
    arrays[f"mlp{last}.b"] = np.full_like(arrays[f"mlp{last}.b"], -3.7 - 0.5)
    mg.params.assign(arrays)
    mw = b.manager_windows(b.train)
    np.testing.assert_array_equal(mg.schedule(*batch(mw, np.arange(2))), 0.0)
    assert ad.clamp(Tensor(np.array([-3.7])), 0.0, 1.0).data[0] == 0.0


def test_manager_rejects_bad_bounds(default_bundle):
    b = default_bundle
    from floodplan.models import ManagerModel
    with pytest.raises(ConfigError):
        ManagerModel("mlp", b.roles, b.normalizer, bounds=[(0.0, 1.0)] * 4)
    with pytest.raises(ConfigError):
        ManagerModel("mlp", b.roles, b.normalizer, bounds=[(1.0, 1.0)] * 5)


def test_evaluator_output_independent_of_manager_identity(default_bundle):
    b = default_bundle
    ev = b.evaluator("mlp").freeze()
    mw = b.manager_windows(b.train)
    past, fut = batch(mw, np.arange(3))
    schedule = b.manager("mlp", seed=4).schedule(past, fut)
    via_a = ev.forward(past, ev.future_inputs(fut, schedule)).data
    with Tape():
        produced = b.manager("gtn", seed=9).forward(past, fut)
    via_b = ev.forward(past, ev.future_inputs(fut, Tensor(schedule))).data
    np.testing.assert_array_equal(via_a, via_b)
    assert not np.array_equal(produced.data, schedule)


def test_future_inputs_match_frame_layout(default_bundle):
    b = default_bundle
    ev = b.evaluator("mlp")
    idx = np.arange(3)
    mw = b.manager_windows(b.train)
    ctl = list(b.roles.controls)
    raw_schedule = b.normalizer.denormalize(b.train.future_batch(idx, cols=ctl), ctl)
    assembled = ev.future_inputs(mw.future_batch(idx), raw_schedule).data
    np.testing.assert_allclose(assembled, b.train.future_batch(idx), rtol=0, atol=1e-12)


# ---------------------------------------------------------------- end-to-end gradient


@pytest.mark.parametrize("arch", ARCHS)
def test_manager_gradient_through_frozen_evaluator(tiny_bundle, arch):
    b = tiny_bundle
    ev = b.evaluator(arch, TINY_CONFIGS[arch], seed=10).freeze()
    mg = b.manager(arch, TINY_CONFIGS[arch], seed=11)
    assert ev.params.num_values + mg.params.num_values <= 5000
    mw = b.manager_windows(b.train)
    past, fut = batch(mw, np.arange(4))
    with ad.no_tape():
        _, levels = manager_levels(mg, ev, past, fut)
    # thresholds inside the forecast range so both hinges are active
    lo, hi = np.quantile(levels.data, [0.2, 0.25])
    th = Thresholds.uniform(4, flood=hi, waste=lo)

    def fn():
        _, levels = manager_levels(mg, ev, past, fut)
        return threshold_loss(levels, th)

    with Tape() as tape:
        loss = fn()
    grads = ad.backward(loss, tape, mg.params)
    assert any(np.abs(g).max() > 0 for g in grads.values())
    # one relative error over the whole parameter vector: some biases (attention keys)
    # have an exactly-zero gradient, where a per-tensor ratio would be roundoff over roundoff
    analytic = np.concatenate([grads[n].ravel() for n in mg.params])
    numeric = np.concatenate([finite_difference(fn, t).ravel() for _, t in mg.params.items()])
    assert relative_error(analytic, numeric) <= 1e-5
    # nothing flows into the frozen evaluator
    assert all(np.abs(g).max() == 0 for g in ad.backward(loss, tape, ev.params).values())


# ---------------------------------------------------------------- attention


def test_cross_attention_single_pair_returns_value():
    q = Tensor(np.array([[0.3, -1.2], [2.0, 0.5]]))
    k = Tensor(np.array([[1.0, 4.0]]))
    v = Tensor(np.array([[7.0, -3.0, 0.25]]))
    out, attn = cross_attention(q, k, v, 2)
    np.testing.assert_array_equal(out.data, np.repeat(v.data, 2, axis=0))
    np.testing.assert_array_equal(attn.data, 1.0)


def test_cross_attention_hand_logits():
    # d_k = 1 so the raw dot products are the logits [0, ln 3]
    q = Tensor(np.array([[1.0], [1.0]]))
    k = Tensor(np.array([[0.0], [math.log(3.0)]]))
    v = Tensor(np.array([[4.0, 0.0], [0.0, 8.0]]))
    out, attn = cross_attention(q, k, v, 1)
    np.testing.assert_allclose(attn.data, [[0.25, 0.75], [0.25, 0.75]], rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.data, [[1.0, 6.0], [1.0, 6.0]], rtol=0, atol=1e-14)


def test_cross_attention_rows_and_errors(rng):
    q, k, v = (Tensor(rng.normal(size=s)) for s in [(5, 24, 8), (5, 96, 8), (5, 96, 3)])
    out, attn = cross_attention(q, k, v, 8)
    assert out.shape == (5, 24, 3) and attn.shape == (5, 24, 96)
    assert np.abs(attn.data.sum(axis=-1) - 1).max() <= 1e-9
    with pytest.raises(DimensionError):
        cross_attention(q, Tensor(rng.normal(size=(5, 96, 7))), v)
    with pytest.raises(DimensionError):
        cross_attention(q, k, Tensor(rng.normal(size=(5, 95, 3))))


def test_extract_attention_shape_and_rows(default_bundle):
    b = default_bundle
    ev = b.evaluator("gtn")
    s0, s1 = b.train[0], b.train[50]
    maps = extract_attention(ev, s0.past, s0.future_cov)
    assert set(maps) == set(ev.io.covariate_names)
    tide = maps["TIDE_S4"]
    assert tide.shape == (24, 96)
    assert np.abs(tide.sum(axis=1) - 1).max() <= 1e-9
    other = extract_attention(ev, s1.past, s1.future_cov, "TIDE_S4")
    assert not np.allclose(tide, other)


def test_extract_attention_requires_attention(default_bundle):
    b = default_bundle
    s = b.train[0]
    for model in (b.evaluator("mlp"), b.evaluator("gtn", ablate(GtnConfig(), "cross_attention"))):
        with pytest.raises(CapabilityError):
            extract_attention(model, s.past, s.future_cov)


# ---------------------------------------------------------------- graph convolution


def test_graph_conv_zero_adjacency_is_dense_per_station(rng):
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(5, 3))
    out = graph_conv(Tensor(x), np.zeros((4, 4)), Tensor(w), activation=None)
    np.testing.assert_allclose(out.data, x @ w, rtol=1e-14)


def test_graph_conv_two_node_chain_by_hand():
    np.testing.assert_allclose(normalized_adjacency(np.array([[0, 1], [1, 0]])), [[0.5, 0.5], [0.5, 0.5]])
    x = np.array([[2.0, 0.0], [0.0, 6.0]])
    out = graph_conv(Tensor(x), np.array([[0, 1], [1, 0]]), Tensor(np.eye(2)), activation=None)
    np.testing.assert_allclose(out.data, [[1.0, 3.0], [1.0, 3.0]], rtol=0, atol=1e-15)


def test_graph_conv_permutation_equivariance(rng, default_bundle):
    A = default_bundle.topology.adjacency
    x = rng.normal(size=(3, 4, 6))
    w, bias = rng.normal(size=(6, 5)), rng.normal(size=5)
    perm = np.array([2, 0, 3, 1])
    out = graph_conv(Tensor(x), A, Tensor(w), Tensor(bias)).data
    out_p = graph_conv(Tensor(x[:, perm]), A[np.ix_(perm, perm)], Tensor(w), Tensor(bias)).data
    np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-13)


def test_graph_conv_station_mismatch():
    with pytest.raises(DimensionError):
        graph_conv(Tensor(np.zeros((3, 2))), np.zeros((4, 4)), Tensor(np.eye(2)))


# ---------------------------------------------------------------- ablation config


def test_ablate_each_component_builds(default_bundle):
    b = default_bundle
    for comp in COMPONENTS:
        cfg = ablate(GtnConfig(), comp)
        assert not getattr(cfg, comp)
        ev = b.evaluator("gtn", cfg)
        assert ev.forward(*batch(b.train, np.arange(2))).shape == (2, 24, 4)


def test_ablate_recurrent_reduces_parameters(default_bundle):
    io = default_bundle.evaluator("gtn").io
    full = param_count(GtnNetwork(io, GtnConfig()))
    assert param_count(GtnNetwork(io, ablate(GtnConfig(), "recurrent"))) < full


def test_ablate_cannot_remove_both_graph_and_conv():
    with pytest.raises(ConfigError):
        ablate(ablate(GtnConfig(), "graph"), "conv")
    with pytest.raises(ConfigError):
        ablate(GtnConfig(), "dropout")


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("arch", ARCHS)
def test_checkpoint_round_trip(tmp_path, default_bundle, arch):
    b = default_bundle
    ev, mg = b.evaluator(arch, seed=12), b.manager(arch, seed=13)
    past, fut = batch(b.train, np.arange(2))
    for model, p in ((ev, tmp_path / "ev.npz"), (mg, tmp_path / "mg.npz")):
        model.save(p)
        back = load_checkpoint(p)
        assert type(back) is type(model) and back.fingerprint == model.fingerprint
        assert back.config == model.config
    mw = b.manager_windows(b.train)
    np.testing.assert_array_equal(load_checkpoint(tmp_path / "ev.npz").forward(past, fut).data,
                                  ev.forward(past, fut).data)
    np.testing.assert_array_equal(load_checkpoint(tmp_path / "mg.npz").forward(*batch(mw, [0, 1])).data,
                                  mg.forward(*batch(mw, [0, 1])).data)


def test_checkpoint_integrity_and_missing(tmp_path, default_bundle):
    ev = default_bundle.evaluator("mlp")
    p = tmp_path / "ev.npz"
    ev.save(p)
    with np.load(p) as z:
        arrays = {k: z[k] for k in z.files}
    name = next(k for k in arrays if k.startswith("param/"))
    arrays[name] = arrays[name] + 1.0
    bad = tmp_path / "bad.npz"
    np.savez(bad, **arrays)
    with pytest.raises(ContractError):
        load_checkpoint(bad)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.npz")
