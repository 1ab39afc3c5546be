"""Estimator variance in the analytic toy: constant-shift field, standard-normal base and target.

The field is ``v(x, t) = theta * 1``, represented as a degenerate affine
network (``constant_params``) so the flow-matching and path-gradient numbers
come from the production estimators.  The scalar toy gradient is the sum of
the bias-gradient components, i.e. the derivative along ``theta``.

Closed forms at ``theta = 0`` for a batch of ``N`` points in ``D`` dims:

* flow matching (per-element mean loss): ``Var = 8 / (N D)``
* maximum likelihood: ``Var = D / N`` (Fisher information ``D``)
* path gradient: exactly zero for every batch
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .cnf import IntegratorConfig
from .errors import DomainError
from .targets import StandardNormal
from .train import cfm_loss_grad, pg_grad
from .vectorfield import constant_params

CSV_COLUMNS = ("estimator", "N", "D", "trials", "mean", "var", "closed_form", "rel_err")


@dataclass(frozen=True)
class ToyConfig:
    N: int = 16
    D: int = 2
    trials: int = 10_000
    theta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.N < 1 or self.D < 1 or self.trials < 1:
            raise DomainError("N, D and trials must be >= 1")


def _bias_slice(D: int) -> slice:
    # affine layer layout: W (D x (D+1)) then b (D)
    return slice(D * (D + 1), D * (D + 1) + D)


def _trial_rngs(cfg: ToyConfig):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.trials)]


def _summary(draws: np.ndarray) -> dict:
    return {"mean": float(np.mean(draws)), "var": float(np.var(draws, ddof=1)) if draws.size > 1 else 0.0}


def fm_toy_draws(cfg: ToyConfig) -> np.ndarray:
    """Scalar toy flow-matching gradient for each trial (x0, x1 ~ N(0, I), independent pairs)."""
    params = constant_params(cfg.theta, cfg.D)
    sl = _bias_slice(cfg.D)
    out = np.empty(cfg.trials)
    for i, rng in enumerate(_trial_rngs(cfg)):
        x0 = rng.standard_normal((cfg.N, cfg.D))
        x1 = rng.standard_normal((cfg.N, cfg.D))
        out[i] = cfm_loss_grad(params, x0, x1, "independent", mode="toy").values[sl].sum()
    return out


def toy_fm_variance(cfg: ToyConfig) -> dict:
    s = _summary(fm_toy_draws(cfg))
    s["closed_form"] = 8.0 / (cfg.N * cfg.D)
    return s


def ml_toy_draws(cfg: ToyConfig) -> np.ndarray:
    """d/dtheta of the batch NLL of ``N(theta 1, I)``: ``-mean_n sum_d (x1 - theta)``."""
    out = np.empty(cfg.trials)
    for i, rng in enumerate(_trial_rngs(cfg)):
        x1 = rng.standard_normal((cfg.N, cfg.D))
        out[i] = -np.mean(np.sum(x1 - cfg.theta, axis=1))
    return out


def toy_ml_variance(cfg: ToyConfig) -> dict:
    s = _summary(ml_toy_draws(cfg))
    s["closed_form"] = cfg.D / cfg.N
    return s


def pg_toy_grads(cfg: ToyConfig, n_steps: int = 15) -> np.ndarray:
    """Full path-gradient vectors (trials x n_params) through the augmented adjoint."""
    params = constant_params(cfg.theta, cfg.D)
    model = StandardNormal(cfg.D)
    icfg = IntegratorConfig(n_steps=n_steps)
    out = np.empty((cfg.trials, params.values.size))
    for i, rng in enumerate(_trial_rngs(cfg)):
        x1 = rng.standard_normal((cfg.N, cfg.D))
        out[i] = pg_grad(params, model, model, x1, None, icfg).values
    return out


def toy_pg_at_optimum(cfg: ToyConfig, n_steps: int = 15) -> float:
    """Largest |component| of the path gradient over all trials."""
    return float(np.max(np.abs(pg_toy_grads(cfg, n_steps))))


def toy_pg_summary(cfg: ToyConfig, n_steps: int = 15) -> dict:
    g = pg_toy_grads(cfg, n_steps)
    scalar = g[:, _bias_slice(cfg.D)].sum(axis=1)
    s = _summary(scalar)
    s["max_abs"] = float(np.max(np.abs(g)))
    s["total_var"] = float(np.sum(np.var(g, axis=0, ddof=1))) if cfg.trials > 1 else 0.0
    # forward KL of N(theta 1, I) from N(0, I) is D theta^2 / 2
    s["closed_form_mean"] = cfg.D * cfg.theta
    return s


def variance_rows(cfg: ToyConfig, pg_trials: int | None = None) -> list[dict]:
    """One CSV row per estimator; path-gradient trials may be capped because each runs two ODE solves."""
    rows = []
    fm = toy_fm_variance(cfg)
    ml = toy_ml_variance(cfg)
    pcfg = cfg if pg_trials is None else ToyConfig(cfg.N, cfg.D, pg_trials, cfg.theta, cfg.seed)
    pg = toy_pg_summary(pcfg)
    for name, s, n, cf in (
        ("fm", fm, cfg.trials, fm["closed_form"]),
        ("ml", ml, cfg.trials, ml["closed_form"]),
        ("pg", pg, pcfg.trials, 0.0),
    ):
        rel = abs(s["var"] - cf) / cf if cf != 0 else abs(s["var"])
        rows.append(
            {
                "estimator": name,
                "N": cfg.N,
                "D": cfg.D,
                "trials": n,
                "mean": s["mean"],
                "var": s["var"],
                "closed_form": cf,
                "rel_err": rel,
            }
        )
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
