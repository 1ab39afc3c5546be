from __future__ import annotations

import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgcnf import cnf
from pgcnf import targets as tg
from pgcnf import train as tr
from pgcnf import vectorfield as vf
from pgcnf.errors import ConfigError, DomainError, ShapeError

from fdutil import fd_grad, rel_err


def small_field(D=2, seed=0, widths=(10, 10), act="tanh", scale=0.3):
    p = vf.init_params(vf.FieldArch(D, widths, act), seed)
    r = np.random.default_rng(seed + 50)
    return p.with_values(p.values + scale * r.standard_normal(p.values.size))


def shifted_normal(mu):
    return tg.GMM2D(np.array([mu], dtype=float), np.ones((1, 2)))


# --- flow matching ---------------------------------------------------------


def test_cfm_zero_target_field():
    p = vf.affine_params(np.zeros((2, 2)))
    x = np.random.default_rng(0).standard_normal((8, 2))
    g = tr.cfm_loss_grad(p, x, x, sigma=1e-12)
    assert g.aux["loss"] < 1e-20
    assert np.max(np.abs(g.values)) < 1e-10


@pytest.mark.parametrize("coupling", ["independent", "ot"])
def test_cfm_gradient_matches_fd_at_fixed_rng(coupling):
    p = small_field(seed=1)
    r = np.random.default_rng(1)
    x0, x1 = r.standard_normal((12, 2)), r.standard_normal((12, 2)) + 1.0
    g = tr.cfm_loss_grad(p, x0, x1, coupling, 0.05, seed=3)

    def L(vals):
        return tr.cfm_loss_grad(p.with_values(vals), x0, x1, coupling, 0.05, seed=3).aux["loss"]

    assert rel_err(g.values, fd_grad(L, p.values.copy())) < 1e-5


def test_cfm_loss_helper_agrees_with_estimator():
    p = small_field(seed=2)
    r = np.random.default_rng(2)
    x0, x1 = r.standard_normal((6, 2)), r.standard_normal((6, 2))
    g = tr.cfm_loss_grad(p, x0, x1, sigma=0.1, seed=7)
    rr = np.random.default_rng(7)
    t, eps = rr.uniform(size=6), rr.standard_normal((6, 2))
    assert np.isclose(tr.cfm_loss(p, x0, x1, t, eps, 0.1), g.aux["loss"], rtol=1e-14)


def test_cfm_rejects_mismatch():
    p = small_field()
    with pytest.raises(ShapeError):
        tr.cfm_loss_grad(p, np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(DomainError):
        tr.cfm_loss_grad(p, np.zeros((3, 2)), np.zeros((3, 2)), coupling="sinkhorn")


def test_toy_fm_gradient_is_permutation_invariant():
    p = vf.constant_params(0.0, 3)
    r = np.random.default_rng(3)
    x0, x1 = r.standard_normal((16, 3)), r.standard_normal((16, 3))
    # only the bias is the toy parameter; weights on x see the pairing
    bias = slice(p.values.size - 3, None)
    a = tr.cfm_loss_grad(p, x0, x1, mode="toy").values[bias]
    b = tr.cfm_loss_grad(p, x0, x1[r.permutation(16)], mode="toy").values[bias]
    assert np.max(np.abs(a - b)) < 1e-12


# --- OT pairing ------------------------------------------------------------


def brute_force_perm(x0, x1):
    best, best_c = None, np.inf
    for perm in itertools.permutations(range(len(x0))):
        c = tr.pairing_cost(x0, x1, np.array(perm))
        if c < best_c:
            best, best_c = np.array(perm), c
    return best, best_c


@pytest.mark.parametrize("n", [1, 2, 3, 5, 7])
def test_ot_matches_brute_force_small(n):
    r = np.random.default_rng(n)
    for _ in range(5):
        x0, x1 = r.standard_normal((n, 2)), r.standard_normal((n, 2))
        _, best = brute_force_perm(x0, x1)
        assert np.isclose(tr.pairing_cost(x0, x1, tr.ot_pair(x0, x1)), best, rtol=1e-12)


def test_ot_recovers_shuffle():
    r = np.random.default_rng(0)
    x0 = r.standard_normal((40, 3))
    shuf = r.permutation(40)
    x1 = x0[shuf]
    perm = tr.ot_pair(x0, x1)
    assert np.array_equal(x1[perm], x0)
    assert tr.pairing_cost(x0, x1, perm) == 0.0


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 60), seed=st.integers(0, 10_000))
def test_ot_never_worse_than_identity(n, seed):
    r = np.random.default_rng(seed)
    x0, x1 = r.standard_normal((n, 2)), r.standard_normal((n, 2))
    perm = tr.ot_pair(x0, x1)
    assert sorted(perm.tolist()) == list(range(n))
    assert tr.pairing_cost(x0, x1, perm) <= tr.pairing_cost(x0, x1) + 1e-12


def test_ot_rejects_unequal():
    with pytest.raises(ShapeError):
        tr.ot_pair(np.zeros((3, 2)), np.zeros((2, 2)))


# --- likelihood and path gradients -----------------------------------------


def test_ml_gradient_matches_fd_of_nll():
    p = small_field(seed=4, act="elu")
    base = tg.StandardNormal(2)
    x1 = np.random.default_rng(4).standard_normal((10, 2)) + 0.5
    cfg = cnf.IntegratorConfig(n_steps=10)
    g = tr.ml_grad(p, base, x1, cfg)

    def nll(vals):
        return -np.mean(cnf.log_prob(p.with_values(vals), base, x1, cfg))

    assert rel_err(g.values, fd_grad(nll, p.values.copy())) < 1e-3
    assert np.isclose(g.aux["loss"], nll(p.values.copy()))


def test_pg_is_exactly_zero_at_optimum():
    for D in (1, 3, 6):
        p = vf.constant_params(0.0, D)
        m = tg.StandardNormal(D)
        x1 = np.random.default_rng(D).standard_normal((32, D)) * 3
        g = tr.pg_grad(p, m, m, x1, None, cnf.IntegratorConfig())
        assert np.max(np.abs(g.values)) <= 1e-12


def test_pg_linear_field_closed_form():
    # v = a x, base N(0, 1), target N(0, s^2): x0 = x1 e^-a and the per-batch
    # path gradient along a is mean(x0^2) (e^{2a} / s^2 - 1)
    a, s = 0.3, 1.7
    p = vf.affine_params(np.array([[a]]))
    base = tg.StandardNormal(1)
    x1 = np.random.default_rng(5).standard_normal((64, 1)) * s
    forces = -x1 / s**2
    g = tr.pg_grad(p, base, None, x1, forces, cnf.IntegratorConfig(n_steps=15))
    x0 = x1[:, 0] * np.exp(-a)
    expected = np.mean(x0**2) * (np.exp(2 * a) / s**2 - 1)
    assert abs(g.values[0] - expected) < 1e-3 * abs(expected)


def test_pg_linear_field_matches_kl_gradient_in_expectation():
    # KL(p || q_a) = log(e^a / s) + s^2 e^{-2a} / 2 - 1/2, derivative 1 - s^2 e^{-2a}
    a, s = -0.2, 0.8
    p = vf.affine_params(np.array([[a]]))
    base = tg.StandardNormal(1)
    x1 = np.random.default_rng(6).standard_normal((200_000, 1)) * s
    g = tr.pg_grad(p, base, None, x1, -x1 / s**2, cnf.IntegratorConfig(n_steps=15))
    assert abs(g.values[0] - (1 - s**2 * np.exp(-2 * a))) < 0.02


def test_pg_does_not_need_the_normaliser():
    p = small_field(seed=7)
    base = tg.StandardNormal(2)
    x1 = np.random.default_rng(7).standard_normal((8, 2))
    target = tg.GMM2D.from_seed(1)
    cfg = cnf.IntegratorConfig()
    a = tr.pg_grad(p, base, target, x1, None, cfg)
    b = tr.pg_grad(p, base, None, x1, target.force(x1), cfg)
    assert np.array_equal(a.values, b.values)
    with pytest.raises(DomainError):
        tr.pg_grad(p, base, None, x1, None, cfg)


def _quadrature_kl_grad(p, base, target, h=0.12, lim=6.0, dstep=1e-5):
    ax = np.arange(-lim, lim, h) + h / 2
    X, Y = np.meshgrid(ax, ax)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    w = np.exp(target.log_prob_exact(pts)) * h * h
    cfg = cnf.IntegratorConfig(n_steps=15)

    def cross_entropy(vals):
        return -np.sum(w * cnf.log_prob(p.with_values(vals), base, pts, cfg))

    return fd_grad(cross_entropy, p.values.copy(), h=dstep)


def test_unbiasedness_triangle_pg_ml_and_quadrature():
    """E[G_PG] and E[G_ML] agree with the exact forward-KL gradient."""
    p = vf.affine_params(np.array([[0.1, -0.05], [0.02, -0.1]]), b=[0.05, 0.0])
    base = tg.StandardNormal(2)
    target = shifted_normal([0.5, -0.3])
    cfg = cnf.IntegratorConfig(n_steps=15)
    r = np.random.default_rng(8)
    pg, ml = [], []
    for _ in range(200):
        x1 = target.sample_exact(32, r)
        pg.append(tr.pg_grad(p, base, target, x1, None, cfg).values)
        ml.append(tr.ml_grad(p, base, x1, cfg).values)
    pg, ml = np.array(pg), np.array(ml)
    exact = _quadrature_kl_grad(p, base, target)
    se_pg = pg.std(axis=0, ddof=1) / np.sqrt(len(pg))
    se_ml = ml.std(axis=0, ddof=1) / np.sqrt(len(ml))
    assert np.all(np.abs(pg.mean(0) - exact) <= 3 * se_pg + 1e-3)
    assert np.all(np.abs(ml.mean(0) - exact) <= 3 * se_ml + 1e-3)


def test_pg_and_ml_agree_in_expectation_for_shifted_target():
    p = vf.init_params(vf.FieldArch(2, (8,), "tanh"), 0)
    p = p.with_values(np.where(np.arange(p.values.size) >= p.values.size - 18, 0.0, p.values))
    base = tg.StandardNormal(2)
    target = shifted_normal([0.6, 0.0])
    cfg = cnf.IntegratorConfig(n_steps=15)
    r = np.random.default_rng(9)
    pg, ml = [], []
    for _ in range(1000):
        x1 = target.sample_exact(16, r)
        pg.append(tr.pg_grad(p, base, target, x1, None, cfg).values)
        ml.append(tr.ml_grad(p, base, x1, cfg).values)
    pg, ml = np.array(pg), np.array(ml)
    se = np.sqrt(pg.var(0, ddof=1) / len(pg) + ml.var(0, ddof=1) / len(ml))
    assert np.all(np.abs(pg.mean(0) - ml.mean(0)) <= 3 * se + 1e-12)
    # the path gradient is the lower-variance estimator here
    assert pg.var(0).sum() < ml.var(0).sum()


def test_ml_unbiased_for_zero_field_on_base_samples():
    p = vf.affine_params(np.zeros((2, 2)))
    base = tg.StandardNormal(2)
    r = np.random.default_rng(10)
    g = np.array([tr.ml_grad(p, base, base.sample_exact(16, r), cnf.IntegratorConfig(n_steps=4)).values for _ in range(300)])
    se = g.std(0, ddof=1) / np.sqrt(len(g))
    assert np.all(np.abs(g.mean(0)) <= 3.5 * se + 1e-12)


# --- optimiser -------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = small_field()
    s = tr.OptimizerState.fresh(p.values.size, 0.1)
    s2, p2 = tr.adam_step(s, p, np.zeros(p.values.size))
    assert np.array_equal(p2.values, p.values)
    assert s2.step == 1


def test_adam_two_step_hand_trace():
    p = vf.constant_params(0.0, 1)
    n = p.values.size
    idx = n - 1  # the bias
    s = tr.OptimizerState.fresh(n, 0.1)
    g = np.zeros(n)
    g[idx] = 1.0
    s, p = tr.adam_step(s, p, g)
    # m = 0.1, v = 0.001; m_hat = 1, v_hat = 1
    assert np.isclose(p.values[idx], -0.1 / (1 + 1e-8), rtol=0, atol=1e-15)
    g[idx] = 3.0
    s, p = tr.adam_step(s, p, g)
    m = 0.9 * 0.1 + 0.1 * 3.0
    v = 0.999 * 0.001 + 0.001 * 9.0
    m_hat = m / (1 - 0.81)
    v_hat = v / (1 - 0.999**2)
    expected = -0.1 / (1 + 1e-8) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert np.isclose(p.values[idx], expected, rtol=0, atol=1e-14)
    assert s.step == 2


def test_adam_rejects_shape_mismatch():
    p = small_field()
    s = tr.OptimizerState.fresh(p.values.size, 0.1)
    with pytest.raises(ShapeError):
        tr.adam_step(s, p, np.zeros(3))


def test_optimizer_sidecar_round_trip(tmp_path):
    p = small_field()
    s = tr.OptimizerState.fresh(p.values.size, 0.01)
    s, p = tr.adam_step(s, p, np.ones(p.values.size))
    tr.save_optimizer(tmp_path / "o.opt", s)
    b = tr.load_optimizer(tmp_path / "o.opt")
    assert b.step == s.step and b.lr == s.lr
    assert np.array_equal(b.m, s.m) and np.array_equal(b.v, s.v)


def _ge(v, kind="fm"):
    return tr.GradEstimate(np.asarray(v, dtype=float), kind, 1)


def test_clip_and_accumulate():
    g = tr.clip_and_accumulate([_ge([2.0, 0.0])], clip_norm=1.0)
    assert np.isclose(np.linalg.norm(g.values), 1.0)
    z = tr.clip_and_accumulate([_ge([1.0, -2.0]), _ge([-1.0, 2.0])])
    assert np.all(z.values == 0)
    with pytest.raises(ShapeError):
        tr.clip_and_accumulate([_ge([1.0]), _ge([1.0, 2.0])])
    with pytest.raises(DomainError):
        tr.clip_and_accumulate([_ge([1.0]), _ge([1.0], "pg")])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), clip=st.floats(1e-3, 10.0))
def test_clipped_norm_is_bounded(seed, clip):
    v = np.random.default_rng(seed).standard_normal(7) * 5
    g = tr.clip_and_accumulate([_ge(v)], clip)
    assert np.linalg.norm(g.values) <= clip + 1e-12


def test_accumulation_equals_full_batch_mean():
    p = small_field(seed=11)
    r = np.random.default_rng(11)
    x0, x1 = r.standard_normal((24, 2)), r.standard_normal((24, 2))
    full = tr.cfm_loss_grad(p, x0, x1, mode="toy").values
    parts = [tr.cfm_loss_grad(p, x0[i : i + 8], x1[i : i + 8], mode="toy") for i in (0, 8, 16)]
    acc = tr.clip_and_accumulate(parts).values
    assert np.max(np.abs(acc - full)) < 1e-12


# --- training loop -----------------------------------------------------------


def _gmm_setup(n=256):
    gmm = tg.GMM2D.from_seed(0)
    return gmm, tg.exact_dataset(gmm, n, 0), tg.StandardNormal(2)


def test_zero_epochs_returns_initial_params():
    gmm, ds, base = _gmm_setup()
    p = vf.init_params(vf.FieldArch(2, (8,)), 0)
    res = tr.run_training("fm_pretrain", tr.TrainConfig(epochs=0), ds, p, base)
    assert res.params is p and res.log == [] and res.steps == 0


def test_training_is_deterministic_and_logs_columns(tmp_path):
    gmm, ds, base = _gmm_setup()
    p = vf.init_params(vf.FieldArch(2, (8,)), 0)
    hook = lambda q: {"nll": 1.0, "ess_q": 0.5}  # noqa: E731
    cfg = tr.TrainConfig("cfm_ot", batch_size=64, epochs=3, eval_every=1)
    a = tr.run_training("fm_pretrain", cfg, ds, p, base, gmm, hook, checkpoint_dir=tmp_path)
    b = tr.run_training("fm_pretrain", cfg, ds, p, base, gmm, hook)
    assert np.array_equal(a.params.values, b.params.values)
    strip = lambda log: [{k: v for k, v in r.items() if k != "wall_seconds"} for r in log]  # noqa: E731
    assert strip(a.log) == strip(b.log) or all(
        np.allclose([x[k] for k in x if k != "stage"], [y[k] for k in y if k != "stage"], equal_nan=True)
        for x, y in zip(strip(a.log), strip(b.log))
    )
    assert [r["step"] for r in a.log] == [0, 4, 8, 12]
    assert set(a.log[0]) == set(tr.LOG_COLUMNS)
    assert (tmp_path / "fm_pretrain_final.ckpt").exists()
    assert (tmp_path / "fm_pretrain_final.opt").exists()
    back = vf.load_params(tmp_path / "fm_pretrain_final.ckpt")
    assert np.array_equal(back.values, a.params.values)


def test_training_reduces_flow_matching_loss():
    gmm, ds, base = _gmm_setup(512)
    p = vf.init_params(vf.FieldArch(2, (32, 32), "elu"), 0)
    r = np.random.default_rng(0)
    pairs = (base.sample_exact(512, r), ds.samples, r.uniform(size=512), r.standard_normal((512, 2)))
    before = tr.cfm_loss(p, *pairs, 1e-2)
    res = tr.run_training("fm_pretrain", tr.TrainConfig(batch_size=64, epochs=10), ds, p, base)
    assert tr.cfm_loss(res.params, *pairs, 1e-2) < 0.9 * before


def test_wall_clock_budget_is_respected():
    gmm, ds, base = _gmm_setup()
    p = vf.init_params(vf.FieldArch(2, (16,)), 0)
    cfg = tr.TrainConfig(batch_size=32, wall_seconds=1.0, eval_every_seconds=0.25)
    slow_eval = lambda q: (time.sleep(0.05), {"nll": 0.0})[1]  # noqa: E731
    res = tr.run_training("fm_pretrain", cfg, ds, p, base, gmm, slow_eval)
    assert res.stopped_by == "budget"
    assert 1.0 <= res.train_seconds <= 1.02
    assert len(res.log) >= 4


def test_stage_and_loss_validation():
    gmm, ds, base = _gmm_setup()
    p = vf.init_params(vf.FieldArch(2, (8,)), 0)
    with pytest.raises(ConfigError):
        tr.run_training("pg_finetune", tr.TrainConfig("cfm_standard"), ds, p, base)
    with pytest.raises(ConfigError):
        tr.run_training("pg_finetune", tr.TrainConfig("pg"), tg.Dataset(ds.samples), p, base)
    with pytest.raises(ConfigError):
        tr.TrainConfig(sigma=0.0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(lr=-1.0)


def test_divergence_aborts_with_last_good_params():
    gmm, ds, base = _gmm_setup(64)
    p = vf.affine_params(np.eye(2) * 1e80)
    with pytest.raises(tr.TrainingDiverged) as info:
        tr.run_training("pg_finetune", tr.TrainConfig("pg", batch_size=32, epochs=1), ds, p, base, gmm)
    assert info.value.last_good is p
    assert info.value.step == 0


def test_pg_finetune_reduces_forward_kl():
    gmm, ds, base = _gmm_setup(512)
    from pgcnf import metrics as mt

    p = vf.init_params(vf.FieldArch(2, (16, 16), "tanh"), 1)
    test = gmm.sample_exact(1024, 5)
    before = mt.forward_kl(p, base, gmm, test)
    res = tr.run_training(
        "pg_finetune", tr.TrainConfig("pg", batch_size=128, lr=1e-2, epochs=3), ds, p, base, gmm
    )
    assert mt.forward_kl(res.params, base, gmm, test) < before
