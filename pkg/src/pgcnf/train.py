"""Losses, gradient estimators, Adam, and the staged training loop.

Estimators
----------
* ``cfm_loss_grad``: conditional flow matching with straight conditional paths
  ``x_t = t x1 + (1 - t) x0 + sigma * eps`` and target velocity ``x1 - x0``,
  optionally with minibatch optimal-transport pairing.
* ``ml_grad``: total derivative of the negative log-likelihood through the
  inverse map (score term included).
* ``pg_grad``: path gradient of the forward KL viewed as a reverse KL at t=0.
  Only target forces enter, so the unknown normaliser of an unnormalised
  target never matters.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import vectorfield as vf
from .cnf import IntegratorConfig, adjoint_param_grad, augmented_inverse, inverse_map
from .errors import ConfigError, DomainError, IntegrationDiverged, PGCNFError, ShapeError
from .targets import Dataset, EnergyModel
from .vectorfield import FieldParams, evaluate

LOSSES = ("cfm_standard", "cfm_ot", "ml", "pg")
STAGES = ("fm_pretrain", "pg_finetune", "ml_finetune", "fm_finetune")
LOG_COLUMNS = (
    "stage",
    "step",
    "wall_seconds",
    "loss",
    "fwd_kl",
    "nll",
    "ess_q",
    "ess_p",
    "traj_len",
    "grad_norm",
    "fm_mse",
)


def default_divergence(dim: int) -> str:
    return "exact" if dim <= 16 else "hutchinson"


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class GradEstimate:
    values: np.ndarray
    estimator: str
    batch_size: int
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.estimator not in ("fm", "ml", "pg"):
            raise DomainError(f"unknown estimator {self.estimator!r}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError(f"non-finite {self.estimator} gradient")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


# --- flow matching ---------------------------------------------------------


def ot_pair(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Permutation ``perm`` minimising ``sum_i |x0_i - x1_perm[i]|^2`` (exact assignment)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"OT pairing needs equal batches, got {x0.shape} and {x1.shape}")
    if len(x0) == 0:
        return np.zeros(0, dtype=np.int64)
    cost = np.sum((x0[:, None, :] - x1[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(x0), dtype=np.int64)
    perm[rows] = cols
    return perm


def pairing_cost(x0, x1, perm=None) -> float:
    x1 = x1 if perm is None else x1[perm]
    return float(np.sum((np.asarray(x0) - np.asarray(x1)) ** 2))


def cfm_loss(params: FieldParams, x0, x1, t, eps, sigma: float) -> float:
    """Mean squared regression error at fixed (t, eps) draws; no gradient."""
    t = np.asarray(t, dtype=np.float64)
    xt = t[:, None] * x1 + (1.0 - t[:, None]) * x0 + sigma * eps
    r = evaluate(params, xt, t).v - (x1 - x0)
    return float(np.mean(r * r))


def cfm_loss_grad(
    params: FieldParams,
    x0: np.ndarray,
    x1: np.ndarray,
    coupling: str = "independent",
    sigma: float = 1e-2,
    seed=0,
    mode: str = "path",
) -> GradEstimate:
    """Conditional flow-matching loss and gradient for one batch of pairs.

    The loss is the per-element mean ``mean_{i,d} (v_d(x_t, t) - (x1 - x0)_d)^2``.
    ``mode="toy"`` evaluates the field at ``(x0, t=0)`` with no noise, which
    is the setting of the closed-form variance result for x-independent fields.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape or x0.ndim != 2:
        raise ShapeError(f"batches must be equal (N, D) matrices, got {x0.shape} and {x1.shape}")
    if x0.shape[1] != params.arch.input_dim:
        raise ShapeError("batch dimension does not match the field")
    if coupling == "ot":
        x1 = x1[ot_pair(x0, x1)]
    elif coupling != "independent":
        raise DomainError(f"unknown coupling {coupling!r}")
    n, D = x0.shape
    if mode == "path":
        if sigma <= 0:
            raise DomainError("sigma must be positive")
        rng = _rng(seed)
        t = rng.uniform(size=n)
        eps = rng.standard_normal((n, D))
        xt = t[:, None] * x1 + (1.0 - t[:, None]) * x0 + sigma * eps
    elif mode == "toy":
        t = np.zeros(n)
        xt = x0
    else:
        raise DomainError(f"unknown flow-matching mode {mode!r}")
    u = x1 - x0
    v = evaluate(params, xt, t).v
    r = v - u
    loss = float(np.mean(r * r))
    res = evaluate(params, xt, t, cot_v=(2.0 / (n * D)) * r, param_grad=True)
    return GradEstimate(res.dtheta, "fm", n, {"loss": loss})


# --- likelihood and path gradients -----------------------------------------


def ml_grad(params: FieldParams, base: EnergyModel, x1: np.ndarray, cfg: IntegratorConfig, rng=None) -> GradEstimate:
    """Gradient of the NLL ``-mean log q(x1)`` via the inverse map and the continuous adjoint."""
    if not base.has_exact_density:
        raise DomainError("maximum likelihood needs a base with a closed-form density")
    x1 = np.asarray(x1, dtype=np.float64)
    n = x1.shape[0]
    res = inverse_map(params, x1, cfg.inverse(), rng)
    x0 = res.x_end
    # log q(x1) = log q0(x0) - log_det, both depending on theta
    grad, ev = adjoint_param_grad(
        params, x0, -base.force(x0) / n, cfg, cot_logdet=np.full(n, 1.0 / n), rng=rng
    )
    nll = float(-np.mean(base.log_prob_exact(x0) - res.log_det))
    return GradEstimate(grad, "ml", n, {"loss": nll, "nll": nll, "n_ode_evals": 2 * res.n_field_evals + ev})


def pg_grad(
    params: FieldParams,
    base: EnergyModel,
    target: EnergyModel | None,
    x1: np.ndarray,
    forces: np.ndarray | None,
    cfg: IntegratorConfig,
    rng=None,
) -> GradEstimate:
    """Forward-KL path gradient on target samples.

    1. Integrate (x, d log p_t/dx, log-det) from t=1 to 0 starting at the
       target force.
    2. Form ``dL/dx0 = (g0 - grad log q0(x0)) / N`` and treat it as constant.
    3. Pull it back to the parameters with the continuous adjoint.

    The score term never appears.  ``forces`` are ``-grad U`` at ``x1``;
    if omitted they are computed from ``target``.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    n = x1.shape[0]
    if forces is None:
        if target is None:
            raise DomainError("path gradients need target forces or a target model")
        forces = target.force(x1)
    x0, g0, log_det, ev1 = augmented_inverse(params, x1, forces, cfg.inverse(), rng)
    cot = (g0 - base.force(x0)) / n
    grad, ev2 = adjoint_param_grad(params, x0, cot, cfg)
    nll = float(-np.mean(base.log_prob_exact(x0) - log_det)) if base.has_exact_density else float("nan")
    return GradEstimate(grad, "pg", n, {"loss": nll, "nll": nll, "n_ode_evals": ev1 + ev2})


# --- optimisation ----------------------------------------------------------


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr: float, **hyper) -> "OptimizerState":
        if lr <= 0:
            raise DomainError("learning rate must be positive")
        return cls(np.zeros(size), np.zeros(size), 0, lr, **hyper)


def adam_step(state: OptimizerState, params: FieldParams, grad) -> tuple[OptimizerState, FieldParams]:
    g = grad.values if isinstance(grad, GradEstimate) else np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise ShapeError("gradient, moments and parameters must share one shape")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=step), params.with_values(new_values)


def clip_and_accumulate(grads: list[GradEstimate], clip_norm: float | None = None) -> GradEstimate:
    """Average a list of gradients, then rescale to ``clip_norm`` if the mean is longer."""
    if not grads:
        raise DomainError("nothing to accumulate")
    kind = grads[0].estimator
    shape = grads[0].values.shape
    for g in grads[1:]:
        if g.values.shape != shape:
            raise ShapeError("cannot accumulate gradients of different shapes")
        if g.estimator != kind:
            raise DomainError("cannot accumulate gradients from different estimators")
    mean = np.mean(np.stack([g.values for g in grads]), axis=0)
    norm = float(np.linalg.norm(mean))
    if clip_norm is not None and norm > clip_norm:
        mean = mean * (clip_norm / norm)
    aux = {"pre_clip_norm": norm, "n_accumulated": len(grads)}
    losses = [g.aux["loss"] for g in grads if "loss" in g.aux]
    if losses:
        aux["loss"] = float(np.mean(losses))
    return GradEstimate(mean, kind, sum(g.batch_size for g in grads), aux)


OPT_MAGIC = b"PGOP"


def save_optimizer(path, state: OptimizerState) -> None:
    header = json.dumps(
        {
            "step": state.step,
            "lr": state.lr,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
            "size": int(state.m.size),
        },
        sort_keys=True,
    ).encode("utf-8")
    payload = state.m.astype("<f8").tobytes() + state.v.astype("<f8").tobytes()
    Path(path).write_bytes(OPT_MAGIC + struct.pack("<II", 1, len(header)) + header + payload)


def load_optimizer(path) -> OptimizerState:
    data = Path(path).read_bytes()
    if data[:4] != OPT_MAGIC:
        raise ShapeError(f"{path}: not an optimizer sidecar")
    _, hlen = struct.unpack("<II", data[4:12])
    h = json.loads(data[12 : 12 + hlen])
    arr = np.frombuffer(data[12 + hlen :], dtype="<f8").astype(np.float64)
    size = h["size"]
    return OptimizerState(arr[:size], arr[size:], h["step"], h["lr"], h["beta1"], h["beta2"], h["eps"])


# --- training loop ---------------------------------------------------------


@dataclass
class TrainConfig:
    loss: str = "cfm_standard"
    batch_size: int = 256
    lr: float = 1e-2
    sigma: float = 1e-2
    epochs: int = 1
    grad_clip_norm: float | None = None
    accumulation_steps: int = 1
    seed: int = 0
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    eval_every: int = 1
    wall_seconds: float | None = None
    eval_every_seconds: float | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise ConfigError("batch_size and accumulation_steps must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.wall_seconds is not None and self.wall_seconds < 0:
            raise ConfigError("wall_seconds must be >= 0")


_STAGE_LOSSES = {
    "fm_pretrain": ("cfm_standard", "cfm_ot"),
    "fm_finetune": ("cfm_standard", "cfm_ot"),
    "pg_finetune": ("pg",),
    "ml_finetune": ("ml",),
}


@dataclass
class TrainingResult:
    params: FieldParams
    opt_state: OptimizerState
    log: list[dict]
    train_seconds: float
    steps: int
    stopped_by: str


class TrainingDiverged(PGCNFError):
    code = "training_diverged"

    def __init__(self, step: int, cause: IntegrationDiverged, last_good: FieldParams, log: list[dict]):
        self.step = step
        self.cause = cause
        self.last_good = last_good
        self.log = log
        super().__init__(f"training diverged at optimizer step {step}: {cause}")


def _write_checkpoint(ckpt_dir, stem: str, params: FieldParams, opt: OptimizerState) -> list[Path]:
    if ckpt_dir is None:
        return []
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    p1, p2 = d / f"{stem}.ckpt", d / f"{stem}.opt"
    vf.save_params(p1, params)
    save_optimizer(p2, opt)
    return [p1, p2]


def run_training(
    stage: str,
    config: TrainConfig,
    dataset: Dataset,
    params: FieldParams,
    base: EnergyModel,
    target: EnergyModel | None = None,
    eval_hook: Callable[[FieldParams], dict] | None = None,
    opt_state: OptimizerState | None = None,
    checkpoint_dir=None,
) -> TrainingResult:
    """Train one stage; epoch-bounded, or wall-clock bounded if ``config.wall_seconds`` is set.

    The wall clock counts optimisation only; evaluation time is excluded.
    Each evaluation appends one row (columns ``LOG_COLUMNS``) to the log.
    With ``epochs == 0`` (and no budget) nothing runs and the log is empty.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    if config.loss not in _STAGE_LOSSES[stage]:
        raise ConfigError(f"stage {stage} cannot use loss {config.loss!r}")
    if stage == "pg_finetune" and dataset.forces is None and target is None:
        raise ConfigError("pg_finetune needs force-labelled data")
    if dataset.dim != params.arch.input_dim:
        raise ShapeError("dataset dimension does not match the field")

    rng = np.random.default_rng(config.seed)
    budget = config.wall_seconds
    if opt_state is None or opt_state.lr != config.lr or opt_state.m.size != params.values.size:
        opt_state = OptimizerState.fresh(params.values.size, config.lr)
    log: list[dict] = []
    N = len(dataset)
    bs = config.batch_size
    cfg = config.integrator
    train_time = 0.0
    steps = 0
    window_losses: list[float] = []
    window_norms: list[float] = []
    last_good = params
    next_eval_time = config.eval_every_seconds
    will_run = (budget is not None and budget > 0) or (budget is None and config.epochs > 0)
    if N == 0:
        will_run = False

    def do_eval():
        row = {c: float("nan") for c in LOG_COLUMNS}
        row.update(stage=stage, step=steps, wall_seconds=train_time)
        if window_losses:
            row["loss"] = float(np.mean(window_losses))
            row["grad_norm"] = float(np.mean(window_norms))
        if eval_hook is not None:
            for k, v in eval_hook(params).items():
                if k in row and k not in ("stage", "step", "wall_seconds"):
                    row[k] = float(v)
        window_losses.clear()
        window_norms.clear()
        log.append(row)
        _write_checkpoint(checkpoint_dir, f"{stage}_last", params, opt_state)

    def one_grad(idx):
        x1 = dataset.samples[idx]
        if config.loss in ("cfm_standard", "cfm_ot"):
            x0 = base.sample_exact(len(idx), rng)
            coupling = "ot" if config.loss == "cfm_ot" else "independent"
            return cfm_loss_grad(params, x0, x1, coupling, config.sigma, rng)
        if config.loss == "ml":
            return ml_grad(params, base, x1, cfg, rng)
        forces = dataset.forces[idx] if dataset.forces is not None else None
        return pg_grad(params, base, target, x1, forces, cfg, rng)

    if not will_run:
        return TrainingResult(params, opt_state, log, 0.0, 0, "empty")

    do_eval()
    stopped_by = "epochs"
    epoch = 0
    done = False
    while not done:
        if budget is None and epoch >= config.epochs:
            break
        perm = rng.permutation(N)
        micro = [perm[i : i + bs] for i in range(0, N, bs)]
        for s in range(0, len(micro), config.accumulation_steps):
            if budget is not None and train_time >= budget:
                stopped_by = "budget"
                done = True
                break
            t_start = time.perf_counter()
            try:
                grads = [one_grad(idx) for idx in micro[s : s + config.accumulation_steps]]
            except IntegrationDiverged as exc:
                raise TrainingDiverged(steps, exc, last_good, log) from exc
            g = clip_and_accumulate(grads, config.grad_clip_norm)
            opt_state, params = adam_step(opt_state, params, g)
            steps += 1
            train_time += time.perf_counter() - t_start
            window_losses.append(g.aux.get("loss", float("nan")))
            window_norms.append(g.aux["pre_clip_norm"])
            if budget is not None and next_eval_time is not None and train_time >= next_eval_time:
                last_good = params
                do_eval()
                while next_eval_time <= train_time:
                    next_eval_time += config.eval_every_seconds
        epoch += 1
        if budget is None and config.eval_every > 0 and epoch % config.eval_every == 0 and epoch < config.epochs:
            last_good = params
            do_eval()
    if log[-1]["step"] != steps:
        do_eval()
    _write_checkpoint(checkpoint_dir, f"{stage}_final", params, opt_state)
    return TrainingResult(params, opt_state, log, train_time, steps, stopped_by)
