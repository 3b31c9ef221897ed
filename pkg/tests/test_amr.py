import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feddah import amr
from feddah.client import ClientUpdate
from feddah.errors import OptimizationDivergedError, ProtocolError, UsageError
from feddah.hypernet import (HyperParams, LayerSpec, ModelSpec, ModelWeights, TaskRegistry,
                             generate_flat, generate_many, generate_model)
from feddah.numcore import Tensor, backward

SPEC = ModelSpec.mlp([2, 6, 1])


def make_state(seed=0, spec=SPEC, n_z=4, d=5, **cfg):
    reg = TaskRegistry(n_z, seed=seed)
    hp = HyperParams.init(spec, n_z, d, np.random.default_rng(seed))
    return amr.ServerState(hp, reg, amr.ServerConfig(**cfg))


def upload(client, task, flat, rnd=1, spec=SPEC):
    return ClientUpdate(client, task, ModelWeights.from_flat(flat, spec), rnd, 0.0, [])


def rand_flat(rng, spec=SPEC, scale=0.5):
    return scale * rng.standard_normal(spec.param_count)


# task loss

def test_l_task_examples():
    w = rand_flat(np.random.default_rng(0))
    assert amr.l_task(w, w) == 0.0
    assert amr.l_task(np.zeros(7), np.ones(7)) == 7.0
    assert amr.l_task(np.zeros(2), np.array([1.0, -1.0])) == 2.0


def test_l_task_spec_mismatch():
    with pytest.raises(UsageError):
        amr.l_task(np.zeros(3), np.zeros(4))


@given(st.integers(0, 10_000))
def test_l_task_is_squared_metric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(10), rng.standard_normal(10)
    assert amr.l_task(a, b) > 0
    assert amr.l_task(a, b) == amr.l_task(b, a)


# candidate change

def test_candidate_change_zero_at_minimum():
    s = make_state()
    ident = s.identities.register("a")
    target = generate_model(s.hp, ident)
    delta = amr.candidate_change(s, ident, target)
    assert all(not v.any() for v in delta.values())


def test_candidate_change_zero_inner_steps():
    s = make_state(n_inner=0)
    ident = s.identities.register("a")
    delta = amr.candidate_change(s, ident, np.ones(SPEC.param_count))
    assert all(not v.any() for v in delta.values())


def test_candidate_change_plain_gradient_step_matches_hand_backprop():
    spec = ModelSpec((LayerSpec(1, 1, "identity"),))
    s = make_state(spec=spec, n_z=2, d=3, candidate_optimizer="sgd", candidate_lr=0.1)
    ident = s.identities.register("a")
    target = np.array([0.7, -0.4])
    before = {k: v.copy() for k, v in s.hp.tensors.items()}
    delta = amr.candidate_change(s, ident, target)

    # one weight column and one bias chunk: cols[i] = Wo (Wi[i] z + Bi[i]) + Bo
    t, z = s.hp.tensors, ident.z
    Wi, Bi, Wo, Bo = t["layer1.head_w"], t["layer1.head_b"], t["layer1.out_w"], t["layer1.out_b"]
    a = np.einsum("cdk,k->cd", Wi, z) + Bi
    cols = (a @ Wo.T + Bo)[:, 0]
    r = 2 * (cols - target)  # dL/dcol
    grads = {
        "layer1.out_w": (r[:, None] * a).sum(axis=0)[None, :],
        "layer1.out_b": np.array([r.sum()]),
        "layer1.head_b": r[:, None] * Wo[0][None, :],
        "layer1.head_w": r[:, None, None] * Wo[0][None, :, None] * z[None, None, :],
        "layer1.enc_w": np.zeros_like(t["layer1.enc_w"]),
        "layer1.enc_b": np.zeros_like(t["layer1.enc_b"]),
    }
    for k, g in grads.items():
        np.testing.assert_allclose(delta[k], -0.1 * g, rtol=1e-12, atol=1e-15)
    for k in before:  # the live parameters are untouched
        np.testing.assert_array_equal(s.hp.tensors[k], before[k])


def test_candidate_change_leaves_server_optimizer_alone():
    s = make_state()
    ident = s.identities.register("a")
    amr.candidate_change(s, ident, np.ones(SPEC.param_count))
    assert s.optimizer.t == 0 and not s.optimizer.m


def test_candidate_change_divergence_carries_step():
    s = make_state(n_inner=3, candidate_optimizer="sgd", candidate_lr=1e300)
    ident = s.identities.register("a")
    with pytest.raises(OptimizationDivergedError) as info, np.errstate(all="ignore"):
        amr.candidate_change(s, ident, np.full(SPEC.param_count, 1e10))
    assert info.value.step in (1, 2)


# history regularizer

def test_l_r_zero_without_change():
    s = make_state()
    a, b = s.identities.register("a"), s.identities.register("b")
    zero = {k: np.zeros_like(v) for k, v in s.hp.tensors.items()}
    assert amr.l_r(s, zero, [a, b]) == 0.0
    assert amr.l_r(s, zero, []) == 0.0


def test_l_r_matches_direct_recomputation():
    s = make_state(seed=4)
    a = s.identities.register("a")
    rng = np.random.default_rng(2)
    delta = {k: 0.05 * rng.standard_normal(v.shape) for k, v in s.hp.tensors.items()}
    ref = generate_model(s.snapshot_hp, a).flatten()
    moved = generate_model(s.hp.plus(delta), a).flatten()
    assert math.isclose(amr.l_r(s, delta, [a]), float(((ref - moved) ** 2).sum()), rel_tol=1e-12)


def test_l_r_averages_over_previous_tasks():
    s = make_state(seed=5)
    ids = [s.identities.register(t) for t in "abc"]
    rng = np.random.default_rng(3)
    delta = {k: 0.05 * rng.standard_normal(v.shape) for k, v in s.hp.tensors.items()}
    each = [amr.l_r(s, delta, [t]) for t in ids]
    assert math.isclose(amr.l_r(s, delta, ids), sum(each) / 3, rel_tol=1e-12)
    assert all(v >= 0 for v in each)


# histograms and similarity

def test_histogram_all_at_lower_edge():
    p = amr.weights_to_distribution(np.zeros(10), 0.0, 1.0, 4, 1e-8)
    assert math.isclose(p[0], (10 + 1e-8) / (10 + 4e-8), rel_tol=1e-15)


def test_histogram_uniform_grid():
    n, bins = 64, 8
    w = (np.arange(n) + 0.5) / n
    p = amr.weights_to_distribution(w, 0.0, 1.0, bins, 1e-8)
    np.testing.assert_allclose(p, (n / bins + 1e-8) / (n + bins * 1e-8), rtol=1e-15)


def test_histogram_clamps_outside_values():
    p = amr.weights_to_distribution(np.array([-5.0, 0.5, 9.0]), 0.0, 1.0, 2, 0.0)
    np.testing.assert_allclose(p, [1 / 3, 2 / 3])


def test_histogram_degenerate_range():
    with pytest.raises(UsageError):
        amr.weights_to_distribution(np.ones(3), 1.0, 1.0)


def oracle_histogram(w, lo, hi, bins, eps):
    counts = [0.0] * bins
    for x in w:
        k = int(math.floor((x - lo) / (hi - lo) * bins))
        counts[min(max(k, 0), bins - 1)] += 1
    counts = [c + eps for c in counts]
    total = math.fsum(counts)
    return np.array([c / total for c in counts])


def test_histogram_matches_loop_oracle_exactly():
    w = np.random.default_rng(0).standard_normal(100)
    lo, hi = float(w.min()), float(w.max())
    np.testing.assert_array_equal(amr.weights_to_distribution(w, lo, hi, 8, 1e-8),
                                  oracle_histogram(w, lo, hi, 8, 1e-8))


def test_js_of_two_point_distributions_matches_closed_form():
    # bins=2, every weight at one of the two edges: P = [.5, .5], Q = [.9, .1]
    a = np.array([0.0] * 5 + [1.0] * 5)
    b = np.array([0.0] * 9 + [1.0] * 1)
    p = amr.weights_to_distribution(a, 0.0, 1.0, 2, 0.0)
    q = amr.weights_to_distribution(b, 0.0, 1.0, 2, 0.0)
    m = [0.7, 0.3]
    closed = 0.5 * (0.5 * math.log(0.5 / 0.7) + 0.5 * math.log(0.5 / 0.3)) + \
        0.5 * (0.9 * math.log(0.9 / 0.7) + 0.1 * math.log(0.1 / 0.3))
    assert abs(amr.js_divergence(p, q) - closed) < 1e-12
    assert abs(closed - 0.10175) < 1e-5
    ws = amr.similarity_weight(a, b, bins=2, smoothing=0.0)
    assert abs(ws - (1 - closed / math.log(2))) < 1e-12
    assert abs(ws - 0.8532) < 1e-4


def test_similarity_of_identical_models_is_one():
    w = np.random.default_rng(1).standard_normal(50)
    assert amr.similarity_weight(w, w) == 1.0
    assert amr.similarity_weight(np.full(5, 2.0), np.full(5, 2.0)) == 1.0


def test_disjoint_supports_give_near_zero_similarity():
    a = np.zeros(1000)
    b = np.ones(1000)
    assert amr.similarity_weight(a, b, 64, 1e-8) < 0.01


def test_similarity_spec_mismatch():
    with pytest.raises(UsageError):
        amr.similarity_weight(np.zeros(3), np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_similarity_properties(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(40)
    b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 2), 40)
    ws = amr.similarity_weight(a, b)
    assert 0.0 <= ws <= 1.0
    assert ws == amr.similarity_weight(b, a)
    lo, hi = amr.pooled_range(a, b)
    js = amr.js_divergence(amr.weights_to_distribution(a, lo, hi), amr.weights_to_distribution(b, lo, hi))
    assert ws == min(1.0, max(0.0, 1.0 - js / math.log(2)))


def test_similarity_decreases_with_divergence():
    rng = np.random.default_rng(0)
    pairs = [(rng.standard_normal(60), rng.normal(rng.uniform(-2, 2), 1.0, 60)) for _ in range(30)]
    scored = []
    for a, b in pairs:
        lo, hi = amr.pooled_range(a, b)
        js = amr.js_divergence(amr.weights_to_distribution(a, lo, hi),
                               amr.weights_to_distribution(b, lo, hi))
        scored.append((js, amr.similarity_weight(a, b)))
    scored.sort()
    ws = [w for _, w in scored]
    assert all(x >= y for x, y in zip(ws, ws[1:]))


# server round

def test_first_round_registers_three_basic_models():
    s = make_state(seed=1)
    rng = np.random.default_rng(0)
    ups = []
    for c, t in enumerate("abc"):
        s.identities.register(t)
        ups.append(upload(c, t, rand_flat(rng)))
    new, reports = amr.server_update(s, ups, 1)
    assert sorted(new.registry) == ["a", "b", "c"]
    assert all(b.round_created == 1 == b.round_updated for b in new.registry.values())
    assert reports[0].l_r2 is None or reports[0].l_r2 == 0.0
    assert reports[1].l_r2 > 0 and reports[2].l_r2 > 0
    assert not s.registry  # input state untouched


def test_fixed_point_upload_changes_nothing():
    s = make_state(seed=2)
    ident = s.identities.register("a")
    s.registry["a"] = amr.BasicModel(generate_model(s.hp, ident), 1, 1, 0)
    before = {k: v.copy() for k, v in s.hp.tensors.items()}
    new, (rep,) = amr.server_update(s, [upload(0, "a", generate_model(s.hp, ident).flatten(), 2)], 2)
    assert rep.w_s == 1.0
    assert rep.total_loss == 0.0
    for k, v in before.items():
        np.testing.assert_array_equal(new.hp.tensors[k], v)
    assert new.registry["a"].round_updated == 2 and new.registry["a"].round_created == 1


def test_second_round_repeat_task_recomposes_exactly():
    s = make_state(seed=3, n_z=4, d=6)
    rng = np.random.default_rng(5)
    ups = []
    for c, t in enumerate("abc"):
        s.identities.register(t)
        ups.append(upload(c, t, rand_flat(rng, scale=1.0)))
    s, _ = amr.server_update(s, ups, 1)
    s, reports = amr.server_update(s, [upload(1, "a", rand_flat(rng, scale=1.0), 2)], 2)
    (rep,) = reports
    assert 0.0 < rep.w_s < 1.0
    assert rep.l_task_hist is not None and rep.l_task_upload is not None
    for app in rep.applications:
        assert abs(amr.recompose(app) - app.total_loss) <= 1e-10


def test_unregistered_upload_is_protocol_error():
    s = make_state()
    with pytest.raises(ProtocolError):
        amr.server_update(s, [upload(0, "ghost", np.zeros(SPEC.param_count))], 1)


def test_groups_follow_registration_then_client_order():
    s = make_state()
    for t in "ba":
        s.identities.register(t)
    ups = [upload(2, "a", np.zeros(SPEC.param_count)), upload(0, "b", np.zeros(SPEC.param_count)),
           upload(1, "a", np.zeros(SPEC.param_count))]
    groups = amr.group_uploads(ups, s)
    assert [(t, [u.client_id for u in m]) for t, m in groups] == [("b", [0]), ("a", [1, 2])]


def test_server_update_is_deterministic():
    def run():
        s = make_state(seed=6)
        rng = np.random.default_rng(1)
        for t in "ab":
            s.identities.register(t)
        s, r1 = amr.server_update(s, [upload(0, "a", rand_flat(rng)), upload(1, "b", rand_flat(rng))], 1)
        s, r2 = amr.server_update(s, [upload(0, "b", rand_flat(rng)), upload(1, "a", rand_flat(rng))], 2)
        return s, [r.to_json() for r in r1 + r2]

    (s1, r1), (s2, r2) = run(), run()
    assert r1 == r2
    for k in s1.hp.tensors:
        assert s1.hp.tensors[k].tobytes() == s2.hp.tensors[k].tobytes()


def test_upload_only_override():
    s = make_state(seed=7, ws_override=0.0)
    rng = np.random.default_rng(0)
    s.identities.register("a")
    s, _ = amr.server_update(s, [upload(0, "a", rand_flat(rng))], 1)
    _, (rep,) = amr.server_update(s, [upload(0, "a", rand_flat(rng), 2)], 2)
    assert rep.w_s == 0.0 and rep.l_r1 is None


def _drift(seed, beta):
    s = make_state(seed=seed, n_z=8, d=8, beta=beta, beta1=beta, beta2=beta)
    rng = np.random.default_rng([seed, 1])
    ups = []
    for c, t in enumerate("ab"):
        s.identities.register(t)
        ups.append(upload(c, t, rand_flat(rng)))
    s, _ = amr.server_update(s, ups, 1)
    old = [s.identities["a"], s.identities["b"]]
    before = generate_many(s.hp, old)
    s.identities.register("c")
    s, _ = amr.server_update(s, [upload(0, "c", rand_flat(rng), 2)], 2)
    return float(((generate_many(s.hp, old) - before) ** 2).sum())


def test_history_penalty_reduces_drift_sign_test():
    wins = sum(_drift(seed, 0.01) < _drift(seed, 0.0) for seed in range(20))
    # one-sided binomial tail P(X >= 15 | n=20, p=.5) = 0.0207
    assert wins >= 15, wins


# gradients of the server losses

def _toy(seed=0):
    spec = ModelSpec.mlp([2, 3, 2, 1])
    s = make_state(seed=seed, spec=spec, n_z=3, d=4)
    rng = np.random.default_rng(seed + 100)
    for k, v in s.hp.tensors.items():
        v[...] = 0.4 * rng.standard_normal(v.shape)
    s.take_snapshot()
    for k, v in s.hp.tensors.items():
        v += 0.05 * rng.standard_normal(v.shape)
    a, b = s.identities.register("a"), s.identities.register("b")
    delta = {k: 0.05 * rng.standard_normal(v.shape) for k, v in s.hp.tensors.items()}
    delta2 = {k: 0.05 * rng.standard_normal(v.shape) for k, v in s.hp.tensors.items()}
    ref = generate_many(s.snapshot_hp, [a])
    return spec, s, a, b, delta, delta2, ref, rng


def test_recalibration_loss_gradient_matches_finite_differences():
    from feddah.numcore import grad_check
    spec, s, a, b, d1, d2, ref, rng = _toy(1)
    hist, up = rng.standard_normal(spec.param_count), rng.standard_normal(spec.param_count)
    f = lambda ps: amr.recalibration_loss(ps, spec, b.z, hist, up, 0.7, 0.3, 0.6, d1, d2,
                                          a.z[None], ref)["total"]
    rep = grad_check(f, s.hp.tensors, tol=1e-5)
    assert rep.passed, rep.max_rel_error


def test_penalty_holds_candidate_change_constant():
    # d/dθ of ||gen(θ+Δ) - ref||² with Δ fixed equals the gradient at the shifted point
    spec, s, a, b, d1, _, ref, _ = _toy(2)
    leaves = s.hp.leaves()
    g = backward(amr.history_penalty(leaves, d1, spec, a.z[None], ref), leaves.values())
    shifted = {k: Tensor(v + d1[k], requires_grad=True) for k, v in s.hp.tensors.items()}
    out = generate_flat(shifted, spec, a.z[None])
    g2 = backward((out - ref).square().sum(), shifted.values())
    for x, y in zip(g, g2):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("w_s", [0.0, 0.4, 1.0])
def test_fused_step_gradient_matches_reference_loss(w_s):
    s = make_state(seed=9)
    rng = np.random.default_rng(4)
    ups = []
    for c, t in enumerate("ab"):
        s.identities.register(t)
        ups.append(upload(c, t, rand_flat(rng)))
    s, _ = amr.server_update(s, ups, 1)
    s.take_snapshot()
    ident = s.identities["b"]
    hist, up = rand_flat(rng), rand_flat(rng)
    ref = amr._Reference(s)
    grads, info = amr._recalibrate_step(s, ident, hist, up, w_s, ref, 0)

    prev = s.previous_tasks("b")
    z_prev, reference = ref.get(prev)
    d1 = amr.candidate_change(s, ident, hist) if w_s != 0 else None
    d2 = amr.candidate_change(s, ident, up) if w_s != 1 else None
    leaves = s.hp.leaves()
    parts = amr.recalibration_loss(leaves, SPEC, ident.z, hist, up, w_s, 0.01, 0.01, d1, d2,
                                   z_prev, reference)
    expect = dict(zip(leaves, backward(parts["total"], leaves.values())))
    assert abs(info["total_loss"] - float(parts["total"].data)) <= 1e-10 * abs(info["total_loss"])
    for k in expect:
        np.testing.assert_allclose(grads[k], expect[k], rtol=1e-9, atol=1e-12)
