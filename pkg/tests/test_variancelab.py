from __future__ import annotations

import csv
import io

import numpy as np
import pytest

from pgcnf import cnf
from pgcnf import targets as tg
from pgcnf import train as tr
from pgcnf import variancelab as vl
from pgcnf import vectorfield as vf
from pgcnf.errors import DomainError


def test_config_validation():
    with pytest.raises(DomainError):
        vl.ToyConfig(N=0)
    with pytest.raises(DomainError):
        vl.ToyConfig(trials=0)


@pytest.mark.parametrize("N,D", [(16, 2), (64, 8)])
def test_fm_variance_closed_form(N, D):
    s = vl.toy_fm_variance(vl.ToyConfig(N=N, D=D, trials=10_000))
    assert s["closed_form"] == 8.0 / (N * D)
    assert abs(s["var"] - s["closed_form"]) < 0.1 * s["closed_form"]
    assert abs(s["mean"]) < 3 * np.sqrt(s["var"] / 10_000)


def test_fm_draw_matches_hand_formula():
    # toy loss gradient along theta: 2 * mean over elements of (theta + x0 - x1), summed over D
    cfg = vl.ToyConfig(N=5, D=3, trials=4, theta=0.3, seed=2)
    draws = vl.fm_toy_draws(cfg)
    for d, rng in zip(draws, vl._trial_rngs(cfg)):
        x0 = rng.standard_normal((5, 3))
        x1 = rng.standard_normal((5, 3))
        ref = np.sum(2 * np.mean(0.3 + x0 - x1, axis=0)) / 3
        assert np.isclose(d, ref, atol=1e-12)


def test_ml_variance_closed_form_and_scaling():
    a = vl.toy_ml_variance(vl.ToyConfig(N=16, D=2, trials=10_000))
    assert abs(a["var"] - 0.125) < 0.0125
    assert abs(a["mean"]) < 3 * np.sqrt(a["var"] / 10_000)
    b = vl.toy_ml_variance(vl.ToyConfig(N=64, D=2, trials=10_000, seed=1))
    assert 0.22 <= b["var"] / a["var"] <= 0.28


def test_fisher_information_by_empirical_score_variance():
    # independent oracle: per-sample score of N(theta 1, I) along theta is sum_d (x - theta)
    x = np.random.default_rng(7).standard_normal((200_000, 2))
    score = np.sum(x, axis=1)
    assert abs(np.var(score) - 2.0) < 0.03


def test_ml_closed_form_agrees_with_engine_gradient():
    # the adjoint-based NLL gradient along the bias reproduces the closed-form ML draw
    theta, D = 0.4, 3
    params = vf.constant_params(theta, D)
    x1 = np.random.default_rng(3).standard_normal((32, D))
    g = tr.ml_grad(params, tg.StandardNormal(D), x1, cnf.IntegratorConfig(n_steps=15))
    eng = g.values[vl._bias_slice(D)].sum()
    assert np.isclose(eng, -np.mean(np.sum(x1 - theta, axis=1)), atol=1e-10)


@pytest.mark.parametrize("N,D", [(16, 2), (8, 5)])
def test_pg_is_exactly_zero_at_optimum(N, D):
    assert vl.toy_pg_at_optimum(vl.ToyConfig(N=N, D=D, trials=200)) <= 1e-12


def test_pg_away_from_optimum_matches_kl_gradient_and_variance_grows():
    a = vl.toy_pg_summary(vl.ToyConfig(N=16, D=2, trials=200, theta=0.5))
    b = vl.toy_pg_summary(vl.ToyConfig(N=16, D=2, trials=200, theta=1.0))
    assert np.isclose(a["mean"], 2 * 0.5, atol=1e-9)
    assert np.isclose(b["mean"], 2 * 1.0, atol=1e-9)
    assert a["max_abs"] > 0
    z = vl.toy_pg_summary(vl.ToyConfig(N=16, D=2, trials=50))
    assert z["total_var"] < a["total_var"] < b["total_var"]


def test_estimators_agree_in_expectation_at_theta_in_2d():
    cfg = vl.ToyConfig(N=16, D=2, trials=10_000, theta=0.5)
    fm = vl.toy_fm_variance(cfg)
    ml = vl.toy_ml_variance(cfg)
    pg = vl.toy_pg_summary(vl.ToyConfig(N=16, D=2, trials=100, theta=0.5))
    for s in (fm, ml):
        assert abs(s["mean"] - pg["mean"]) < 3 * np.sqrt(s["var"] / cfg.trials)


def test_fm_expectation_is_two_theta_in_other_dimensions():
    # the toy FM gradient targets 2 theta regardless of D, the KL gradient is D theta
    cfg = vl.ToyConfig(N=16, D=4, trials=10_000, theta=0.5)
    fm = vl.toy_fm_variance(cfg)
    ml = vl.toy_ml_variance(cfg)
    assert abs(fm["mean"] - 1.0) < 3 * np.sqrt(fm["var"] / cfg.trials)
    assert abs(ml["mean"] - 2.0) < 3 * np.sqrt(ml["var"] / cfg.trials)
    assert np.sign(fm["mean"]) == np.sign(ml["mean"])


def test_rows_and_csv():
    rows = vl.variance_rows(vl.ToyConfig(N=16, D=2, trials=2000), pg_trials=20)
    assert [r["estimator"] for r in rows] == ["fm", "ml", "pg"]
    assert rows[2]["trials"] == 20 and rows[2]["var"] < 1e-24
    text = vl.rows_to_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert tuple(parsed[0].keys()) == vl.CSV_COLUMNS
    assert float(parsed[1]["closed_form"]) == 0.125
    assert vl.rows_to_csv(vl.variance_rows(vl.ToyConfig(N=16, D=2, trials=2000), pg_trials=20)) == text
