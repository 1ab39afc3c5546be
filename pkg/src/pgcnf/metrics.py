"""Importance-sampling diagnostics for a trained flow.

All weight arithmetic is done on log-weights with the maximum subtracted
first.  A log-weight of ``-inf`` (zero weight, e.g. an overlapping
Lennard-Jones configuration) is allowed; NaN and ``+inf`` are not.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .cnf import IntegratorConfig, forward_map, log_prob
from .errors import DegenerateWeights, DomainError, ShapeError, UnsupportedOperation
from .targets import EnergyModel
from .vectorfield import FieldParams

ORIGINS = ("model_samples", "target_samples")
EVAL_STEPS = 30


@dataclass
class WeightSet:
    log_w: np.ndarray
    origin: str

    def __post_init__(self):
        self.log_w = np.asarray(self.log_w, dtype=np.float64).reshape(-1)
        if self.origin not in ORIGINS:
            raise DomainError(f"unknown weight origin {self.origin!r}")
        if np.any(np.isnan(self.log_w)) or np.any(self.log_w == np.inf):
            raise DomainError("log-weights must be finite or -inf")

    def __len__(self):
        return self.log_w.size


def importance_weights(target: EnergyModel, log_q, x, origin: str) -> WeightSet:
    """``log w = -U(x) - log q(x)``, i.e. unnormalised target over model density."""
    x = np.asarray(x, dtype=np.float64)
    log_q = np.asarray(log_q, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != log_q.size:
        raise ShapeError("log_q must have one entry per row of x")
    with np.errstate(over="ignore", invalid="ignore"):
        u = target.energy(x) if len(x) else np.zeros(0)
    return WeightSet(-u - log_q, origin)


def _require(w: WeightSet, origin: str):
    if w.origin != origin:
        raise DomainError(f"expected weights from {origin}, got {w.origin}")
    if len(w) == 0:
        raise DomainError("empty weight set")


def ess_q(w: WeightSet) -> float:
    """``(sum w)^2 / (N sum w^2)`` on samples from the model."""
    _require(w, "model_samples")
    lw = w.log_w
    if np.all(lw == -np.inf):
        return 0.0
    lw = lw - np.max(lw)
    return float(np.exp(2.0 * logsumexp(lw) - np.log(lw.size) - logsumexp(2.0 * lw)))


def ess_p(w: WeightSet) -> float:
    """``1 / (mean_p[w] * mean_p[1/w])`` on samples from the target.

    ``mean_p[1/w]`` estimates ``1/Z``, which supplies the normaliser that
    ``E_p[p/q]`` needs when only ``exp(-U)`` is known.
    """
    _require(w, "target_samples")
    lw = w.log_w
    if np.any(lw == -np.inf):
        return 0.0
    n = np.log(lw.size)
    return float(np.exp(-((logsumexp(lw) - n) + (logsumexp(-lw) - n))))


def log_z_hat(w: WeightSet) -> tuple[float, float]:
    """log of ``mean_q[w]`` and its jackknife standard error."""
    _require(w, "model_samples")
    lw = w.log_w
    n = lw.size
    est = float(logsumexp(lw) - np.log(n))
    if n < 2 or np.all(lw == -np.inf):
        return est, float("nan")
    m = np.max(lw)
    e = np.exp(lw - m)
    s = np.sum(e)
    with np.errstate(divide="ignore"):
        loo = m + np.log(np.maximum(s - e, 0.0)) - np.log(n - 1)
    if not np.all(np.isfinite(loo)):
        return est, float("inf")
    se = float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return est, se


def expectation_under_p(w: WeightSet, obs_values) -> float:
    """Self-normalised estimate ``sum w O / sum w`` from model samples."""
    _require(w, "model_samples")
    obs = np.asarray(obs_values, dtype=np.float64).reshape(-1)
    if obs.size != len(w):
        raise ShapeError("one observable value per weight")
    if np.all(w.log_w == -np.inf):
        raise DegenerateWeights("all importance weights are zero")
    ww = np.exp(w.log_w - np.max(w.log_w))
    return float(np.sum(ww * obs) / np.sum(ww))


def _eval_cfg(cfg: IntegratorConfig | None) -> IntegratorConfig:
    if cfg is None:
        return IntegratorConfig(n_steps=EVAL_STEPS)
    return cfg.exact()


def nll(params: FieldParams, base: EnergyModel, test_set, cfg: IntegratorConfig | None = None) -> float:
    """``-mean log q(x)`` over held-out target samples (exact trace, 30 steps by default)."""
    x = test_set.samples if hasattr(test_set, "samples") else np.asarray(test_set)
    return float(-np.mean(log_prob(params, base, x, _eval_cfg(cfg))))


def forward_kl(
    params: FieldParams,
    base: EnergyModel,
    target: EnergyModel,
    test_set,
    cfg: IntegratorConfig | None = None,
) -> float:
    """``mean[log p(x) - log q(x)]`` over target samples; needs a normalised target."""
    if not target.has_exact_density:
        raise UnsupportedOperation("forward KL needs a normalised target density")
    x = test_set.samples if hasattr(test_set, "samples") else np.asarray(test_set)
    lq = log_prob(params, base, x, _eval_cfg(cfg))
    return float(np.mean(target.log_prob_exact(x) - lq))


@dataclass
class MetricsReport:
    nll: float
    ess_q: float
    ess_p: float
    log_z_hat: float
    log_z_err: float
    fwd_kl: float | None
    traj_len_mean: float
    n_model_samples: int
    n_test_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class EvaluationRaw:
    log_w_q: np.ndarray
    log_w_p: np.ndarray
    energy_model: np.ndarray
    energy_target: np.ndarray
    traj_len: np.ndarray


def evaluate_model(
    params: FieldParams,
    base: EnergyModel,
    target: EnergyModel,
    test_x: np.ndarray,
    n_model_samples: int,
    seed: int,
    n_steps: int = EVAL_STEPS,
) -> tuple[MetricsReport, EvaluationRaw]:
    """Full report: ESS_q from fresh model samples, ESS_p/NLL/KL from ``test_x``."""
    cfg = IntegratorConfig(n_steps=n_steps)
    x0 = base.sample_exact(n_model_samples, seed)
    fwd = forward_map(params, x0, cfg)
    log_q = base.log_prob_exact(x0) + fwd.log_det
    wq = importance_weights(target, log_q, fwd.x_end, "model_samples")
    lq_test = log_prob(params, base, test_x, cfg)
    wp = importance_weights(target, lq_test, test_x, "target_samples")
    kl = None
    if target.has_exact_density:
        kl = float(np.mean(target.log_prob_exact(test_x) - lq_test))
    lz, lz_err = log_z_hat(wq)
    with np.errstate(over="ignore", invalid="ignore"):
        e_model = target.energy(fwd.x_end)
    report = MetricsReport(
        nll=float(-np.mean(lq_test)),
        ess_q=ess_q(wq),
        ess_p=ess_p(wp),
        log_z_hat=lz,
        log_z_err=lz_err,
        fwd_kl=kl,
        traj_len_mean=float(np.mean(fwd.traj_length)),
        n_model_samples=int(n_model_samples),
        n_test_samples=int(len(test_x)),
    )
    raw = EvaluationRaw(wq.log_w, wp.log_w, e_model, target.energy(test_x), fwd.traj_length)
    return report, raw


def make_eval_hook(
    base: EnergyModel,
    target: EnergyModel,
    test_x: np.ndarray,
    n_model_samples: int = 2048,
    seed: int = 0,
    n_steps: int = EVAL_STEPS,
    fm_pairs: tuple | None = None,
    sigma: float = 1e-2,
):
    """Evaluation callback for :func:`train.run_training`.

    ``fm_pairs`` is ``(x0, x1, t, eps)`` held fixed so the flow-matching
    MSE is comparable across evaluations.
    """
    from .train import cfm_loss

    def hook(params: FieldParams) -> dict:
        rep, _ = evaluate_model(params, base, target, test_x, n_model_samples, seed, n_steps)
        out = {
            "nll": rep.nll,
            "ess_q": rep.ess_q,
            "ess_p": rep.ess_p,
            "traj_len": rep.traj_len_mean,
        }
        if rep.fwd_kl is not None:
            out["fwd_kl"] = rep.fwd_kl
        if fm_pairs is not None:
            out["fm_mse"] = cfm_loss(params, *fm_pairs, sigma)
        return out

    return hook
