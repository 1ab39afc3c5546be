"""Energy models, force-labelled datasets and a MALA data generator.

Energies are in reduced units at unit temperature, so a model's density is
``exp(-U(x)) / Z``.  ``standard_normal`` and ``gmm2d`` carry their
normaliser inside ``U`` (``Z == 1``), which makes forward KL values absolute.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, ShapeError, SingularConfiguration, UnsupportedOperation

LOG_2PI = float(np.log(2.0 * np.pi))


def _as_batch(x, dim: int):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.ndim != 2 or X.shape[1] != dim:
        raise ShapeError(f"expected points of dimension {dim}, got shape {x.shape}")
    if not np.all(np.isfinite(X)):
        raise DomainError("non-finite configuration")
    return X, single


class EnergyModel:
    """Interface: ``energy``, ``force`` and, where available, an exact density and sampler.

    Methods accept a single point of shape (D,) or a batch (N, D).
    """

    kind: str = ""
    dim: int

    def _energy(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _force(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def energy(self, x):
        X, single = _as_batch(x, self.dim)
        u = self._energy(X)
        return float(u[0]) if single else u

    def force(self, x):
        X, single = _as_batch(x, self.dim)
        f = self._force(X)
        return f[0] if single else f

    @property
    def has_exact_density(self) -> bool:
        return False

    def log_prob_exact(self, x):
        raise UnsupportedOperation(f"{self.kind} has no closed-form normalised density")

    def sample_exact(self, n: int, seed) -> np.ndarray:
        raise UnsupportedOperation(f"{self.kind} has no exact sampler")

    def initial_state(self, rng: np.random.Generator, n_chains: int) -> np.ndarray:
        return 0.1 * rng.standard_normal((n_chains, self.dim))

    def descriptor(self) -> dict:
        raise NotImplementedError


class _NormalizedModel(EnergyModel):
    @property
    def has_exact_density(self) -> bool:
        return True

    def log_prob_exact(self, x):
        # energy carries the normaliser, so log p == -U exactly
        X, single = _as_batch(x, self.dim)
        lp = -self._energy(X)
        return float(lp[0]) if single else lp


@dataclass(eq=False)
class StandardNormal(_NormalizedModel):
    dim: int
    kind: str = field(default="standard_normal", init=False)

    def _energy(self, X):
        return 0.5 * np.sum(X * X, axis=1) + 0.5 * self.dim * LOG_2PI

    def _force(self, X):
        return -X

    def sample_exact(self, n, seed):
        rng = np.random.default_rng(seed)
        return rng.standard_normal((int(n), self.dim))

    def descriptor(self):
        return {"kind": self.kind, "dim": self.dim}


@dataclass(eq=False)
class GMM2D(_NormalizedModel):
    """Equal-weight mixture of axis-aligned 2D Gaussians (4 components by default)."""

    means: np.ndarray
    variances: np.ndarray
    kind: str = field(default="gmm2d", init=False)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        self.variances = np.asarray(self.variances, dtype=np.float64).reshape(-1, 2)
        if self.means.shape != self.variances.shape:
            raise ShapeError("means and variances must both be (K, 2)")
        if np.any(self.variances <= 0):
            raise DomainError("mixture variances must be positive")
        self.dim = 2
        self.weights = np.full(len(self.means), 1.0 / len(self.means))

    @classmethod
    def from_seed(cls, seed: int, n_components: int = 4) -> "GMM2D":
        """Means ~ N(0, 1); variances c + 0.01 with c ~ N(0, 1), negative c re-drawn."""
        rng = np.random.default_rng(seed)
        means = rng.standard_normal((n_components, 2))
        c = rng.standard_normal((n_components, 2))
        while np.any(c < 0):
            bad = c < 0
            c[bad] = rng.standard_normal(int(bad.sum()))
        return cls(means, c + 0.01)

    def _component_logpdf(self, X):
        diff = X[:, None, :] - self.means[None]
        return (
            -0.5 * np.sum(diff * diff / self.variances, axis=2)
            - 0.5 * np.sum(np.log(self.variances), axis=1)
            - LOG_2PI
            + np.log(self.weights)
        )

    def _energy(self, X):
        return -logsumexp(self._component_logpdf(X), axis=1)

    def _force(self, X):
        lc = self._component_logpdf(X)
        r = np.exp(lc - logsumexp(lc, axis=1, keepdims=True))
        diff = X[:, None, :] - self.means[None]
        return -np.sum(r[:, :, None] * diff / self.variances[None], axis=1)

    def sample_exact(self, n, seed):
        rng = np.random.default_rng(seed)
        n = int(n)
        comp = rng.choice(len(self.means), size=n, p=self.weights)
        eps = rng.standard_normal((n, 2))
        return self.means[comp] + np.sqrt(self.variances[comp]) * eps

    def descriptor(self):
        return {
            "kind": self.kind,
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


@dataclass(eq=False)
class LennardJones(EnergyModel):
    """``U = eps/2 sum_{i != j} (d_ij^-12 - 2 d_ij^-6) + tether/2 sum_i |x_i|^2``.

    ``tether == 0`` is the bare pair potential (translation invariant).  A
    positive tether binds the cluster to the origin so that the density is
    normalisable; only then is it a valid flow target.  ``eps`` is the well
    depth in units of kT (an inverse temperature for the pair term).
    """

    n_particles: int
    space_dim: int = 2
    tether: float = 0.0
    eps: float = 1.0
    kind: str = field(default="lennard_jones", init=False)

    def __post_init__(self):
        if self.n_particles < 2 or self.space_dim < 1:
            raise DomainError("Lennard-Jones needs at least 2 particles")
        if self.tether < 0:
            raise DomainError("tether strength must be non-negative")
        if self.eps <= 0:
            raise DomainError("well depth must be positive")
        self.dim = self.n_particles * self.space_dim
        self._iu = np.triu_indices(self.n_particles, k=1)

    def _pairs(self, X, check: bool):
        P = X.reshape(X.shape[0], self.n_particles, self.space_dim)
        i, j = self._iu
        diff = P[:, i, :] - P[:, j, :]
        d2 = np.sum(diff * diff, axis=2)
        if check and np.any(d2 == 0.0):
            raise SingularConfiguration("coincident Lennard-Jones particles")
        return P, diff, d2

    def _energy(self, X, check: bool = True):
        P, _, d2 = self._pairs(X, check)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            inv6 = 1.0 / (d2 * d2 * d2)
            # the 1/2 over ordered pairs equals one term per unordered pair
            u = self.eps * np.sum(inv6 * inv6 - 2.0 * inv6, axis=1)
        if self.tether:
            u = u + 0.5 * self.tether * np.sum(X * X, axis=1)
        return u

    def _force(self, X, check: bool = True):
        P, diff, d2 = self._pairs(X, check)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            inv2 = 1.0 / d2
            inv6 = inv2 * inv2 * inv2
            # -(1/d) dphi/dd for phi = d^-12 - 2 d^-6
            coef = 12.0 * self.eps * (inv6 * inv6 - inv6) * inv2
        fpair = coef[:, :, None] * diff  # force on i from j
        F = np.zeros_like(P)
        i, j = self._iu
        np.add.at(F, (slice(None), i), fpair)
        np.add.at(F, (slice(None), j), -fpair)
        F = F.reshape(X.shape[0], -1)
        if self.tether:
            F = F - self.tether * X
        return F

    def initial_state(self, rng, n_chains):
        # lattice at the pair minimum (d = 1), particle 0 nearest the origin;
        # triangular in 2D, cubic otherwise
        side = int(np.ceil(self.n_particles ** (1.0 / self.space_dim))) + 2
        ax = np.arange(-side, side + 1, dtype=np.float64)
        grid = np.stack(np.meshgrid(*[ax] * self.space_dim, indexing="ij"), axis=-1).reshape(-1, self.space_dim)
        if self.space_dim == 2:
            grid = np.stack([grid[:, 0] + 0.5 * grid[:, 1], grid[:, 1] * np.sqrt(3.0) / 2.0], axis=1)
        order = np.lexsort((np.arctan2(grid[:, -1], grid[:, 0]), np.round(np.sum(grid * grid, axis=1), 9)))
        pts = grid[order[: self.n_particles]]
        pts = pts - pts.mean(axis=0)
        return pts.reshape(-1)[None] + 0.01 * rng.standard_normal((n_chains, self.dim))

    def descriptor(self):
        return {
            "kind": self.kind,
            "n_particles": self.n_particles,
            "space_dim": self.space_dim,
            "tether": self.tether,
            "eps": self.eps,
        }


@dataclass(eq=False)
class DoubleWell(EnergyModel):
    """``U = a x_1^4 - b x_1^2 + 1/2 sum_{d>1} x_d^2`` (unnormalised)."""

    dim: int = 2
    a: float = 1.0
    b: float = 4.0
    kind: str = field(default="double_well", init=False)

    def _energy(self, X):
        x1 = X[:, 0]
        return self.a * x1**4 - self.b * x1**2 + 0.5 * np.sum(X[:, 1:] ** 2, axis=1)

    def _force(self, X):
        F = -X.copy()
        x1 = X[:, 0]
        F[:, 0] = -(4.0 * self.a * x1**3 - 2.0 * self.b * x1)
        return F

    def descriptor(self):
        return {"kind": self.kind, "dim": self.dim, "a": self.a, "b": self.b}


def model_from_descriptor(d: dict) -> EnergyModel:
    kind = d.get("kind")
    if kind == "standard_normal":
        return StandardNormal(int(d["dim"]))
    if kind == "gmm2d":
        if "means" in d:
            return GMM2D(d["means"], d["variances"])
        return GMM2D.from_seed(int(d.get("seed", 0)), int(d.get("n_components", 4)))
    if kind == "lennard_jones":
        return LennardJones(
            int(d["n_particles"]),
            int(d.get("space_dim", 2)),
            float(d.get("tether", 0.0)),
            float(d.get("eps", 1.0)),
        )
    if kind == "double_well":
        return DoubleWell(int(d.get("dim", 2)), float(d.get("a", 1.0)), float(d.get("b", 4.0)))
    raise DomainError(f"unknown energy model kind {kind!r}")


# module-level spellings of the interface


def energy(model: EnergyModel, x):
    return model.energy(x)


def force(model: EnergyModel, x):
    return model.force(x)


def log_prob_exact(model: EnergyModel, x):
    return model.log_prob_exact(x)


def sample_exact(model: EnergyModel, n: int, seed) -> np.ndarray:
    return model.sample_exact(n, seed)


# --- datasets --------------------------------------------------------------


@dataclass
class Dataset:
    samples: np.ndarray
    forces: np.ndarray | None = None
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ShapeError("samples must be an (N, D) matrix")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != self.samples.shape:
                raise ShapeError("forces must have the same shape as samples")
            if not np.all(np.isfinite(self.forces)):
                raise DomainError("forces contain non-finite entries")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def exact_dataset(model: EnergyModel, n: int, seed, with_forces: bool = True) -> Dataset:
    x = model.sample_exact(n, seed)
    f = model.force(x) if (with_forces and n > 0) else (np.zeros_like(x) if with_forces else None)
    return Dataset(x, f, {"type": "exact-sampler", "model": model.descriptor(), "seed": seed})


def mcmc_sample(
    model: EnergyModel,
    n: int,
    burn_in: int = 1000,
    thinning: int = 10,
    step_size: float = 0.01,
    seed: int = 0,
    n_chains: int = 1,
    adapt: bool = True,
    target_accept: float = 0.57,
    adapt_window: int = 50,
) -> Dataset:
    """Metropolis-adjusted Langevin sampling with forces stored per sample.

    Proposal ``y = x + s F(x) + sqrt(2 s) xi`` with step ``s``.  During burn-in
    the step is tuned every ``adapt_window`` iterations towards
    ``target_accept``; afterwards it is frozen.  ``n_chains`` chains run in
    lockstep and their states are interleaved in the output.
    """
    if step_size <= 0:
        raise DomainError("step_size must be positive")
    if thinning < 1 or burn_in < 0 or n < 0 or n_chains < 1:
        raise DomainError("need thinning >= 1, burn_in >= 0, n >= 0, n_chains >= 1")
    rng = np.random.default_rng(seed)
    D = model.dim
    x = model.initial_state(rng, n_chains)

    def _u(X):
        return model._energy(X, check=False) if isinstance(model, LennardJones) else model._energy(X)

    def _f(X):
        return model._force(X, check=False) if isinstance(model, LennardJones) else model._force(X)

    u = _u(x)
    f = _f(x)
    s = float(step_size)
    rounds = -(-n // n_chains) if n else 0
    total = burn_in + rounds * thinning
    kept = []
    win_acc = 0.0
    win_n = 0
    acc_sum = 0.0
    acc_n = 0
    for it in range(total):
        noise = rng.standard_normal((n_chains, D))
        y = x + s * f + np.sqrt(2.0 * s) * noise
        with np.errstate(all="ignore"):
            uy = _u(y)
            fy = _f(y)
            fwd = np.sum((y - x - s * f) ** 2, axis=1) / (4.0 * s)
            bwd = np.sum((x - y - s * fy) ** 2, axis=1) / (4.0 * s)
            log_a = -uy + u - bwd + fwd
        ok = np.isfinite(log_a) & np.all(np.isfinite(fy), axis=1)
        log_a = np.where(ok, log_a, -np.inf)
        accept = np.log(rng.uniform(size=n_chains)) < log_a
        x = np.where(accept[:, None], y, x)
        u = np.where(accept, uy, u)
        f = np.where(accept[:, None], fy, f)
        rate = float(np.mean(accept))
        if it < burn_in:
            win_acc += rate
            win_n += 1
            if adapt and win_n == adapt_window:
                s *= float(np.exp(win_acc / win_n - target_accept))
                win_acc = 0.0
                win_n = 0
        else:
            acc_sum += rate
            acc_n += 1
            if (it - burn_in + 1) % thinning == 0:
                kept.append(x.copy())
    samples = np.concatenate(kept, axis=0)[:n] if kept else np.zeros((0, D))
    forces = model.force(samples) if len(samples) else np.zeros((0, D))
    acc_rate = acc_sum / acc_n if acc_n else float("nan")
    warnings = []
    if acc_n and not (0.1 <= acc_rate <= 0.9):
        warnings.append(f"acceptance rate {acc_rate:.3f} outside [0.1, 0.9]")
    source = {
        "type": "mcmc",
        "sampler": "mala",
        "model": model.descriptor(),
        "settings": {
            "n": n,
            "burn_in": burn_in,
            "thinning": thinning,
            "step_size": step_size,
            "seed": seed,
            "n_chains": n_chains,
            "adapt": adapt,
        },
        "final_step_size": s,
        "acceptance_rate": acc_rate,
        "warnings": warnings,
    }
    return Dataset(samples, forces, source)


DS_MAGIC = b"PGDS"
DS_VERSION = 1


def write_dataset(path, ds: Dataset, model_descriptor: dict | None = None) -> None:
    """Header (magic, version, D, N, has_forces, JSON descriptor) then float64 LE rows."""
    N, D = ds.samples.shape
    meta = json.dumps(
        {"model": model_descriptor or ds.source.get("model"), "source": ds.source},
        sort_keys=True,
    ).encode("utf-8")
    has_f = ds.forces is not None
    with open(path, "wb") as fh:
        fh.write(DS_MAGIC)
        fh.write(struct.pack("<IIQBI", DS_VERSION, D, N, int(has_f), len(meta)))
        fh.write(meta)
        fh.write(np.ascontiguousarray(ds.samples, dtype="<f8").tobytes())
        if has_f:
            fh.write(np.ascontiguousarray(ds.forces, dtype="<f8").tobytes())


def read_dataset(path) -> tuple[Dataset, dict]:
    data = Path(path).read_bytes()
    if data[:4] != DS_MAGIC:
        raise ShapeError(f"{path}: not a dataset file")
    hsize = struct.calcsize("<IIQBI")
    version, D, N, has_f, mlen = struct.unpack("<IIQBI", data[4 : 4 + hsize])
    if version != DS_VERSION:
        raise ShapeError(f"{path}: unsupported dataset version {version}")
    pos = 4 + hsize
    meta = json.loads(data[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    nbytes = N * D * 8
    samples = np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(N, D).astype(np.float64)
    pos += nbytes
    forces = None
    if has_f:
        forces = np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(N, D).astype(np.float64)
    return Dataset(samples, forces, meta.get("source", {})), meta
