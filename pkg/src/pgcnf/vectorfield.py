"""Fully connected time-dependent vector field v(x, t) and its derivatives.

The network maps ``[x, t]`` (time concatenated as one extra input) through
``len(hidden_widths)`` activated layers and a final linear layer back to
``input_dim`` outputs.  With ``hidden_widths == ()`` the field is a single
affine map ``W [x; t] + b``, which the tests and the analytic toys use.

Every derivative is computed by hand on a layer-by-layer basis:

* Jacobian-probe products ``J p`` are carried forward as tangents next to
  the primal activations (forward mode).
* Cotangents ``(dL/dv, dL/ddiv)`` are pulled back through that tangent
  computation (reverse mode over the forward-mode pass), which produces
  ``dL/dx`` including the second-order ``d/dx tr(J)`` term and the matching
  parameter cotangent in one sweep.

All arithmetic is float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ArchMismatch, DomainError, ShapeError

ACTIVATIONS = ("tanh", "elu")
TIME_ENCODINGS = ("concat_scalar",)
OUTPUT_INIT_SCALE = 0.01


@dataclass(frozen=True)
class FieldArch:
    input_dim: int
    hidden_widths: tuple[int, ...] = (64, 64, 64, 64)
    activation: str = "tanh"
    time_encoding: str = "concat_scalar"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if int(self.input_dim) < 1:
            raise DomainError(f"input_dim must be positive, got {self.input_dim}")
        object.__setattr__(self, "input_dim", int(self.input_dim))
        if any(w < 1 for w in self.hidden_widths):
            raise DomainError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.time_encoding not in TIME_ENCODINGS:
            raise DomainError(f"unknown time encoding {self.time_encoding!r}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) per layer, input layer first."""
        sizes = [self.input_dim + 1, *self.hidden_widths, self.input_dim]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @property
    def parameter_count(self) -> int:
        # sum over layers of fan_in * fan_out weights plus fan_out biases
        return sum(o * i + o for o, i in self.layer_shapes())

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
            "time_encoding": self.time_encoding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FieldArch":
        return cls(
            input_dim=d["input_dim"],
            hidden_widths=tuple(d.get("hidden_widths", (64, 64, 64, 64))),
            activation=d.get("activation", "tanh"),
            time_encoding=d.get("time_encoding", "concat_scalar"),
        )


@dataclass(frozen=True)
class FieldParams:
    """Immutable parameter snapshot; ``values`` is a flat read-only float64 array.

    Layout: for each layer in order, the weight matrix (fan_out x fan_in,
    row-major) followed by its bias vector.
    """

    arch: FieldArch
    values: np.ndarray
    version: int = 0

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if vals.size != self.arch.parameter_count:
            raise ShapeError(
                f"expected {self.arch.parameter_count} parameters for {self.arch}, got {vals.size}"
            )
        if not np.all(np.isfinite(vals)):
            raise DomainError("parameter vector contains non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, pos = [], 0
        for o, i in self.arch.layer_shapes():
            W = self.values[pos : pos + o * i].reshape(o, i)
            pos += o * i
            b = self.values[pos : pos + o]
            pos += o
            out.append((W, b))
        return out

    def with_values(self, values: np.ndarray) -> "FieldParams":
        return FieldParams(self.arch, values, self.version + 1)


@dataclass(frozen=True)
class ProbeVector:
    """Rademacher probe for the stochastic trace estimate.

    ``values`` has shape (D,) or (N, D); every entry must be exactly +1 or -1.
    """

    values: np.ndarray
    seed_tag: str = ""

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.abs(vals) == 1.0):
            raise DomainError("probe entries must be +1 or -1")
        object.__setattr__(self, "values", vals)

    @classmethod
    def draw(cls, rng: np.random.Generator, shape, seed_tag: str = "") -> "ProbeVector":
        return cls(rademacher(rng, shape), seed_tag)


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def init_params(arch: FieldArch, seed: int) -> FieldParams:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.

    The output layer's weights are multiplied by 0.01 and its bias is zero, so
    the freshly initialised field is close to zero everywhere.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    shapes = arch.layer_shapes()
    for li, (o, i) in enumerate(shapes):
        bound = 1.0 / np.sqrt(i)
        W = rng.uniform(-bound, bound, size=(o, i))
        b = rng.uniform(-bound, bound, size=o)
        if li == len(shapes) - 1:
            W = W * OUTPUT_INIT_SCALE
            b = np.zeros(o)
        chunks += [W.ravel(), b]
    return FieldParams(arch, np.concatenate(chunks), 0)


def affine_params(A: np.ndarray, b: np.ndarray | None = None, t_weight: np.ndarray | None = None) -> FieldParams:
    """Single affine layer ``v = A x + t_weight * t + b`` (no hidden layers)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    D = A.shape[0]
    if A.shape != (D, D):
        raise ShapeError(f"A must be square, got {A.shape}")
    W = np.zeros((D, D + 1))
    W[:, :D] = A
    if t_weight is not None:
        W[:, D] = t_weight
    bias = np.zeros(D) if b is None else np.broadcast_to(np.asarray(b, dtype=np.float64), (D,))
    arch = FieldArch(input_dim=D, hidden_widths=())
    return FieldParams(arch, np.concatenate([W.ravel(), bias]))


def constant_params(theta: float, dim: int) -> FieldParams:
    """The constant-shift field v = theta * 1 as a degenerate affine network."""
    return affine_params(np.zeros((dim, dim)), np.full(dim, float(theta)))


# --- activations -----------------------------------------------------------


def _act(name: str, a: np.ndarray, order: int):
    """Return (s, s', s'') up to ``order``; missing derivatives are None."""
    if name == "tanh":
        s = np.tanh(a)
        if order == 0:
            return s, None, None
        s1 = 1.0 - s * s
        return s, s1, (-2.0 * s * s1 if order > 1 else None)
    pos = a > 0
    neg = np.minimum(a, 0.0)
    e = np.exp(neg)
    s = np.where(pos, a, np.expm1(neg))
    if order == 0:
        return s, None, None
    s1 = np.where(pos, 1.0, e)
    # elu'' jumps at a == 0; valid almost everywhere
    return s, s1, (np.where(pos, 0.0, e) if order > 1 else None)


# --- core passes -----------------------------------------------------------


class FieldEval(NamedTuple):
    v: np.ndarray  # (N, D)
    div: np.ndarray | None  # (N,) probe-contracted trace, when probes given
    dx: np.ndarray | None  # (N, D) cotangent pulled back to x
    dtheta: np.ndarray | None  # flat parameter cotangent summed over the batch


def _time_column(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full((n, 1), float(t))
    return t.reshape(n, 1)


def exact_probes(n: int, dim: int) -> np.ndarray:
    """Identity probes, shape (N, D, D): contracting with them gives the exact trace."""
    return np.broadcast_to(np.eye(dim), (n, dim, dim))


def evaluate(
    params: FieldParams,
    x: np.ndarray,
    t,
    probes: np.ndarray | None = None,
    cot_v: np.ndarray | None = None,
    cot_div: np.ndarray | None = None,
    param_grad: bool = False,
) -> FieldEval:
    """One combined forward (+ optional reverse) sweep over a batch.

    ``probes`` has shape (N, K, D); the returned ``div`` is
    ``sum_k p_k^T J p_k`` (exact trace for identity probes).  When ``cot_v``
    or ``cot_div`` is given, the scalar ``L = sum_n cot_v.v + cot_div*div`` is
    differentiated w.r.t. x (per sample) and, if ``param_grad``, w.r.t. the
    parameters.  No input validation happens here; see the public wrappers.
    """
    arch = params.arch
    name = arch.activation
    layers = params.layers()
    n = x.shape[0]
    D = arch.input_dim
    has_tan = probes is not None
    backward = cot_v is not None or cot_div is not None
    if backward and cot_div is not None and not has_tan:
        raise ShapeError("a divergence cotangent needs probes")
    order = 0
    if has_tan or backward:
        order = 1
    if has_tan and backward and cot_div is not None:
        order = 2

    z = np.concatenate([x, _time_column(t, n)], axis=1)
    if has_tan:
        K = probes.shape[1]
        T = np.concatenate([probes, np.zeros((n, K, 1))], axis=2)
    else:
        T = None
    cache = []
    for W, b in layers[:-1]:
        a = z @ W.T + b
        da = T @ W.T if has_tan else None
        s, s1, s2 = _act(name, a, order)
        cache.append((z, T, da, s1, s2))
        z = s
        T = s1[:, None, :] * da if has_tan else None
    Wo, bo = layers[-1]
    v = z @ Wo.T + bo
    div = None
    if has_tan:
        jp = T @ Wo.T  # (N, K, D)
        div = np.einsum("nkd,nkd->n", probes, jp)
    if not backward:
        return FieldEval(v, div, None, None)

    cv = np.zeros_like(v) if cot_v is None else np.asarray(cot_v, dtype=np.float64)
    use_tan = cot_div is not None
    grads = [] if param_grad else None
    bar_z = cv @ Wo
    bar_T = None
    if use_tan:
        bar_jp = np.asarray(cot_div, dtype=np.float64).reshape(n, 1, 1) * probes
        bar_T = bar_jp @ Wo
    if param_grad:
        gW = cv.T @ z
        if use_tan:
            Kd = bar_jp.shape[1]
            gW = gW + bar_jp.reshape(n * Kd, -1).T @ T.reshape(n * Kd, -1)
        grads.append((gW, cv.sum(axis=0)))
    for li in range(len(layers) - 2, -1, -1):
        W, _ = layers[li]
        z_prev, T_prev, da, s1, s2 = cache[li]
        bar_a = s1 * bar_z
        if use_tan:
            bar_da = s1[:, None, :] * bar_T
            bar_a = bar_a + s2 * np.einsum("nkw,nkw->nw", da, bar_T)
        if param_grad:
            gW = bar_a.T @ z_prev
            if use_tan:
                Kd = bar_da.shape[1]
                gW = gW + bar_da.reshape(n * Kd, -1).T @ T_prev.reshape(n * Kd, -1)
            grads.append((gW, bar_a.sum(axis=0)))
        bar_z = bar_a @ W
        if use_tan and li > 0:
            bar_T = bar_da @ W
    dx = bar_z[:, :D]
    dtheta = None
    if param_grad:
        grads.reverse()
        dtheta = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return FieldEval(v, div, dx, dtheta)


# --- public wrappers -------------------------------------------------------


def _check_inputs(params: FieldParams, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.ndim != 2 or X.shape[1] != params.arch.input_dim:
        raise ShapeError(f"x must have trailing dimension {params.arch.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(X)):
        raise DomainError("non-finite input to vector field")
    tt = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(tt)):
        raise DomainError("non-finite time")
    if np.any(tt < -1e-12) or np.any(tt > 1 + 1e-12):
        raise DomainError(f"time must lie in [0, 1], got {t}")
    if tt.ndim > 0 and tt.size != X.shape[0]:
        raise ShapeError("per-sample times must match the batch size")
    return X, tt, single


def _probe_array(params, X, method, probe) -> np.ndarray:
    n, D = X.shape
    if method == "exact":
        return exact_probes(n, D)
    if method != "hutchinson":
        raise DomainError(f"unknown divergence method {method!r}")
    if probe is None:
        raise DomainError("hutchinson divergence needs a probe")
    if not isinstance(probe, ProbeVector):
        probe = ProbeVector(probe)
    p = np.broadcast_to(probe.values, (n, D))
    return p[:, None, :]


def eval_field(params: FieldParams, x, t) -> np.ndarray:
    X, tt, single = _check_inputs(params, x, t)
    v = evaluate(params, X, tt).v
    return v[0] if single else v


def jacobian(params: FieldParams, x, t) -> np.ndarray:
    """dv/dx, shape (D, D) for a point or (N, D, D) for a batch; J[..., i, j] = dv_i/dx_j."""
    X, tt, single = _check_inputs(params, x, t)
    n, D = X.shape
    probes = exact_probes(n, D)
    # with identity probes, row k of jp holds J e_k, i.e. column k of J
    arch = params.arch
    layers = params.layers()
    z = np.concatenate([X, _time_column(tt, n)], axis=1)
    T = np.concatenate([probes, np.zeros((n, D, 1))], axis=2)
    for W, b in layers[:-1]:
        a = z @ W.T + b
        s, s1, _ = _act(arch.activation, a, 1)
        T = s1[:, None, :] * (T @ W.T)
        z = s
    J = np.swapaxes(T @ layers[-1][0].T, 1, 2)
    return J[0] if single else J


def divergence(params: FieldParams, x, t, method: str = "exact", probe=None):
    """Exact ``tr(dv/dx)`` or the Hutchinson estimate ``e^T (dv/dx) e`` for a given probe."""
    X, tt, single = _check_inputs(params, x, t)
    out = evaluate(params, X, tt, probes=_probe_array(params, X, method, probe)).div
    return float(out[0]) if single else out


def grad_x_divergence(params: FieldParams, x, t, method: str = "exact", probe=None) -> np.ndarray:
    """d/dx of :func:`divergence` with the probe held fixed.

    For elu the result is valid away from zero pre-activations only.
    """
    X, tt, single = _check_inputs(params, x, t)
    n = X.shape[0]
    res = evaluate(
        params, X, tt, probes=_probe_array(params, X, method, probe), cot_div=np.ones(n)
    )
    return res.dx[0] if single else res.dx


def vjp(
    params: FieldParams,
    x,
    t,
    cot_v,
    cot_div=None,
    method: str = "exact",
    probe=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Pull ``(dL/dv, dL/ddiv)`` back to ``(dL/dx, dL/dtheta)``.

    ``dL/dx = cot_v^T dv/dx + cot_div * d/dx div``; the parameter cotangent
    is summed over the batch.
    """
    X, tt, single = _check_inputs(params, x, t)
    n, D = X.shape
    cv = np.asarray(cot_v, dtype=np.float64).reshape(n, D)
    probes = None
    cd = None
    if cot_div is not None:
        cd = np.broadcast_to(np.asarray(cot_div, dtype=np.float64), (n,))
        if np.any(cd != 0):
            probes = _probe_array(params, X, method, probe)
        else:
            cd = None
    res = evaluate(params, X, tt, probes=probes, cot_v=cv, cot_div=cd, param_grad=True)
    return (res.dx[0] if single else res.dx), res.dtheta


# --- checkpoint file -------------------------------------------------------

CKPT_MAGIC = b"PGCK"
CKPT_VERSION = 1


def params_to_bytes(params: FieldParams) -> bytes:
    header = json.dumps(
        {"arch": params.arch.to_dict(), "version": params.version}, sort_keys=True
    ).encode("utf-8")
    return (
        CKPT_MAGIC
        + struct.pack("<II", CKPT_VERSION, len(header))
        + header
        + params.values.astype("<f8").tobytes()
    )


def params_from_bytes(data: bytes) -> FieldParams:
    if data[:4] != CKPT_MAGIC:
        raise ShapeError("not a parameter checkpoint (bad magic)")
    fmt_version, hlen = struct.unpack("<II", data[4:12])
    if fmt_version != CKPT_VERSION:
        raise ShapeError(f"unsupported checkpoint format version {fmt_version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    arch = FieldArch.from_dict(header["arch"])
    values = np.frombuffer(data[12 + hlen :], dtype="<f8")
    if values.size != arch.parameter_count:
        raise ShapeError("checkpoint payload length does not match its architecture")
    return FieldParams(arch, values.astype(np.float64), int(header.get("version", 0)))


def save_params(path, params: FieldParams) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path, expect_arch: FieldArch | None = None) -> FieldParams:
    params = params_from_bytes(Path(path).read_bytes())
    if expect_arch is not None and params.arch != expect_arch:
        raise ArchMismatch(
            f"checkpoint arch {params.arch.to_dict()} != expected {expect_arch.to_dict()}"
        )
    return params
