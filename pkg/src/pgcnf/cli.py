"""Command-line experiment runner.

Subcommands: ``generate-data``, ``train``, ``evaluate``, ``variance-lab``
and ``plot-data``.  Experiments are described by one JSON config file;
``--set dotted.key=value`` overrides single entries (values are parsed as
JSON when possible, e.g. ``--set stages.0.lr=0.005``).

Every failure prints exactly one line ``error <code>: <detail>`` to stderr
and exits nonzero.  ``PGCNF_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as mt
from . import targets as tg
from . import train as tr
from . import variancelab as vl
from . import vectorfield as vf
from .cnf import IntegratorConfig
from .errors import ArchMismatch, ConfigError, PGCNFError

THREADS_ENV = "PGCNF_THREADS"
MANIFEST = "manifest.json"
LOCK = ".lock"

DEFAULT_CONFIG = {
    "output_dir": "run",
    "seed": 0,
    "target": {"kind": "gmm2d", "seed": 0},
    "base": None,
    "data": {
        "n_train": 2000,
        "n_eval": 2048,
        "source": "auto",
        "mala": {"burn_in": 20000, "thinning": 100, "step_size": 1e-3, "n_chains": 64},
    },
    "field": {"hidden_widths": [64, 64, 64], "activation": "elu"},
    "integrator": {"n_steps": 15, "divergence_method": "auto"},
    "budget": "epochs",
    "stages": [{"stage": "fm_pretrain", "loss": "cfm_standard", "lr": 1e-2, "epochs": 10}],
    "eval": {"n_model_samples": 2048, "n_steps": 30, "seed": 0, "during_training": True},
}

class RunLocked(PGCNFError):
    code = "run_locked"


class MissingFiles(PGCNFError):
    code = "missing_files"


STAGE_KEYS = {
    "stage",
    "loss",
    "batch_size",
    "lr",
    "sigma",
    "epochs",
    "grad_clip_norm",
    "accumulation_steps",
    "eval_every",
    "wall_seconds",
    "eval_every_seconds",
}


# --- config ----------------------------------------------------------------


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("target", "base"):
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        node = _child(node, p, ".".join(parts[: i + 1]))
        if not isinstance(node, (dict, list)):
            raise ConfigError(f"config key '{'.'.join(parts[: i + 1])}' is not a section")
    last = parts[-1]
    if isinstance(node, list):
        idx = _index(node, last, key)
        node[idx] = _parse_value(raw)
    else:
        node[last] = _parse_value(raw)


def _index(node: list, p: str, where: str) -> int:
    try:
        idx = int(p)
    except ValueError:
        raise ConfigError(f"'{where}': expected a list index, got '{p}'") from None
    if not -len(node) <= idx < len(node):
        raise ConfigError(f"'{where}': index {idx} out of range")
    return idx


def _child(node, p: str, where: str):
    if isinstance(node, list):
        return node[_index(node, p, where)]
    if p not in node:
        raise ConfigError(f"unknown config key '{where}'")
    if node[p] is None:
        node[p] = {}
    return node[p]


def load_config(path, overrides=()) -> dict:
    text = Path(path).read_text()
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = _merge(DEFAULT_CONFIG, user)
    for o in overrides:
        apply_override(cfg, o)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not cfg["stages"]:
        raise ConfigError("'stages' must list at least one stage")
    if cfg["budget"] not in ("epochs", "wall_seconds"):
        raise ConfigError("'budget' must be 'epochs' or 'wall_seconds'")
    for i, st in enumerate(cfg["stages"]):
        extra = set(st) - STAGE_KEYS
        if extra:
            raise ConfigError(f"unknown config key 'stages.{i}.{sorted(extra)[0]}'")
        if "stage" not in st:
            raise ConfigError(f"'stages.{i}.stage' is required")
        if cfg["budget"] == "wall_seconds" and st.get("wall_seconds") is None:
            raise ConfigError(f"'stages.{i}.wall_seconds' is required in wall_seconds budget mode")
    if cfg["data"]["source"] not in ("auto", "exact", "mala"):
        raise ConfigError("'data.source' must be auto, exact or mala")
    try:
        tg.model_from_descriptor(cfg["target"])
        field_arch(cfg)
        integrator(cfg)
        for i in range(len(cfg["stages"])):
            stage_config(cfg, i)
    except ConfigError:
        raise
    except (PGCNFError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def target_model(cfg: dict) -> tg.EnergyModel:
    return tg.model_from_descriptor(cfg["target"])


def base_model(cfg: dict, dim: int) -> tg.EnergyModel:
    if cfg.get("base"):
        return tg.model_from_descriptor(cfg["base"])
    return tg.StandardNormal(dim)


def field_arch(cfg: dict) -> vf.FieldArch:
    dim = target_model(cfg).dim
    f = cfg["field"]
    return vf.FieldArch(dim, tuple(f.get("hidden_widths", (64, 64, 64))), f.get("activation", "elu"))


def integrator(cfg: dict) -> IntegratorConfig:
    ic = cfg["integrator"]
    div = ic.get("divergence_method", "auto")
    if div == "auto":
        div = tr.default_divergence(target_model(cfg).dim)
    return IntegratorConfig(n_steps=int(ic.get("n_steps", 15)), divergence_method=div)


def stage_config(cfg: dict, i: int) -> tuple[str, tr.TrainConfig]:
    st = dict(cfg["stages"][i])
    stage = st.pop("stage")
    if stage not in tr.STAGES:
        raise ConfigError(f"'stages.{i}.stage': unknown stage {stage!r}")
    if cfg["budget"] == "epochs":
        st.pop("wall_seconds", None)
        st.pop("eval_every_seconds", None)
    seed = int(cfg["seed"]) * 1000 + i
    return stage, tr.TrainConfig(seed=seed, integrator=integrator(cfg), **st)


# --- run directory plumbing -------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@contextmanager
def run_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{out_dir} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def record_manifest(out_dir: Path, command: str, cfg: dict | None, files: list[Path], started: str) -> dict:
    path = out_dir / MANIFEST
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    manifest["engine_version"] = __version__
    manifest["commands"][command] = {
        "config": cfg,
        "started": started,
        "finished": _now(),
        "files": {str(p.relative_to(out_dir)): sha256_file(p) for p in sorted(set(files))},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _save_array(path: Path, arr) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(arr, dtype=np.float64))
    return path


def write_log_csv(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=tr.LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def read_log_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in tr.LOG_COLUMNS:
            if k != "stage":
                r[k] = float(r[k])
    return rows


# --- subcommands -----------------------------------------------------------


def cmd_generate_data(cfg: dict) -> list[Path]:
    out = Path(cfg["output_dir"])
    model = target_model(cfg)
    d = cfg["data"]
    seed = int(cfg["seed"])
    source = d["source"]
    if source == "auto":
        source = "exact" if model.has_exact_density else "mala"
    files = []
    for split, n, s in (("train", d["n_train"], seed), ("test", d["n_eval"], seed + 10_000)):
        if source == "exact":
            ds = tg.exact_dataset(model, int(n), s)
        else:
            m = d["mala"]
            ds = tg.mcmc_sample(
                model,
                int(n),
                burn_in=int(m["burn_in"]),
                thinning=int(m["thinning"]),
                step_size=float(m["step_size"]),
                seed=s,
                n_chains=int(m["n_chains"]),
            )
            for w in ds.source["warnings"]:
                print(f"warning: {split} sampler: {w}", file=sys.stderr)
        path = out / "data" / f"{split}.pgds"
        path.parent.mkdir(parents=True, exist_ok=True)
        tg.write_dataset(path, ds, model.descriptor())
        files.append(path)
    return files


def _load_split(out: Path, split: str) -> tg.Dataset:
    path = out / "data" / f"{split}.pgds"
    if not path.exists():
        raise ConfigError(f"dataset {path} not found; run generate-data first")
    return tg.read_dataset(path)[0]


def _persist_eval(out: Path, report: mt.MetricsReport, raw: mt.EvaluationRaw, prefix: str = "eval") -> list[Path]:
    d = out / prefix
    files = [_write_json(d / "report.json", asdict(report))]
    files.append(_save_array(d / "log_w_model.npy", raw.log_w_q))
    files.append(_save_array(d / "log_w_target.npy", raw.log_w_p))
    files.append(_save_array(d / "energy_model.npy", raw.energy_model))
    files.append(_save_array(d / "energy_target.npy", raw.energy_target))
    files.append(_save_array(d / "traj_len.npy", raw.traj_len))
    return files


def cmd_train(cfg: dict) -> list[Path]:
    out = Path(cfg["output_dir"])
    model = target_model(cfg)
    train_ds = _load_split(out, "train")
    test_ds = _load_split(out, "test")
    base = base_model(cfg, model.dim)
    arch = field_arch(cfg)
    ev = cfg["eval"]
    params = vf.init_params(arch, int(cfg["seed"]))
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    init = ckdir / "init.ckpt"
    vf.save_params(init, params)
    files = [init]
    hook = None
    if ev.get("during_training", True):
        rng = np.random.default_rng(int(ev["seed"]) + 1)
        n = len(test_ds)
        fm_pairs = (
            base.sample_exact(n, rng),
            test_ds.samples,
            rng.uniform(size=n),
            rng.standard_normal(test_ds.samples.shape),
        )
        hook = mt.make_eval_hook(
            base,
            model,
            test_ds.samples,
            int(ev["n_model_samples"]),
            int(ev["seed"]),
            int(ev["n_steps"]),
            fm_pairs,
        )
    log: list[dict] = []
    opt = None
    total_steps = 0
    for i in range(len(cfg["stages"])):
        stage, tcfg = stage_config(cfg, i)
        if stage == "fm_pretrain" or (opt is not None and opt.lr != tcfg.lr):
            opt = None
        stage_dir = ckdir / f"{i}_{stage}"
        try:
            res = tr.run_training(stage, tcfg, train_ds, params, base, model, hook, opt, stage_dir)
        except tr.TrainingDiverged as exc:
            log += exc.log
            files.append(write_log_csv(out / "logs" / "train_log.csv", log))
            files.append(
                _write_json(
                    out / "logs" / "diverged.json",
                    {
                        "stage": stage,
                        "stage_index": i,
                        "optimizer_step": exc.step,
                        "cause": str(exc.cause),
                        "last_checkpoint": str((stage_dir / f"{stage}_last.ckpt").relative_to(out))
                        if (stage_dir / f"{stage}_last.ckpt").exists()
                        else str(init.relative_to(out)),
                    },
                )
            )
            files += sorted(p for p in ckdir.rglob("*") if p.is_file())
            record_manifest(out, "train", cfg, files, _now())
            raise
        params, opt = res.params, res.opt_state
        log += res.log
        total_steps += res.steps
    files += sorted(p for p in ckdir.rglob("*") if p.is_file())
    files.append(write_log_csv(out / "logs" / "train_log.csv", log))
    if total_steps > 0:
        final = ckdir / "final.ckpt"
        vf.save_params(final, params)
        files.append(final)
        report, raw = mt.evaluate_model(
            params, base, model, test_ds.samples, int(ev["n_model_samples"]), int(ev["seed"]), int(ev["n_steps"])
        )
        files += _persist_eval(out, report, raw)
        print(report.to_json())
    return files


def cmd_evaluate(cfg: dict, checkpoint, dataset, out_dir=None) -> tuple[mt.MetricsReport, list[Path]]:
    arch = field_arch(cfg)
    params = vf.load_params(checkpoint)
    if params.arch != arch:
        raise ArchMismatch(
            f"checkpoint arch {json.dumps(params.arch.to_dict(), sort_keys=True)} "
            f"!= config arch {json.dumps(arch.to_dict(), sort_keys=True)}"
        )
    model = target_model(cfg)
    ds, _ = tg.read_dataset(dataset)
    if ds.dim != model.dim:
        raise ArchMismatch(f"dataset dimension {ds.dim} != target dimension {model.dim}")
    ev = cfg["eval"]
    base = base_model(cfg, model.dim)
    report, raw = mt.evaluate_model(
        params, base, model, ds.samples, int(ev["n_model_samples"]), int(ev["seed"]), int(ev["n_steps"])
    )
    files = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        files = _persist_eval(out_dir.parent, report, raw, prefix=out_dir.name)
    return report, files


def _histogram_rows(label_key: str, groups: dict, bins: int) -> list[dict]:
    rows = []
    for label, values in groups.items():
        v = np.asarray(values, dtype=np.float64)
        finite = v[np.isfinite(v)]
        if finite.size:
            counts, edges = np.histogram(finite, bins=bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                rows.append({label_key: label, "bin_left": lo, "bin_right": hi, "count": int(c)})
        n_bad = int(v.size - finite.size)
        if n_bad:
            # non-finite values (e.g. overlapping particles) keep the counts conserved
            rows.append({label_key: label, "bin_left": np.inf, "bin_right": np.inf, "count": n_bad})
    return rows


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return path


def cmd_plot_data(run_dir, bins: int = 50) -> list[Path]:
    run = Path(run_dir)
    mpath = run / MANIFEST
    if not mpath.exists():
        raise MissingFiles(f"missing files: {MANIFEST}")
    manifest = json.loads(mpath.read_text())
    missing = sorted(
        {f for rec in manifest["commands"].values() for f in rec["files"] if not (run / f).exists()}
    )
    if missing:
        raise MissingFiles("missing files: " + ", ".join(missing))
    out = run / "plots"
    log_path = run / "logs" / "train_log.csv"
    log = read_log_csv(log_path) if log_path.exists() else []
    metrics_cols = [c for c in tr.LOG_COLUMNS if c not in ("stage", "step", "wall_seconds")]
    curves = []
    traj = []
    for event, r in enumerate(log):
        row = {"event": event, "stage": r["stage"], "step": int(r["step"]), "wall_seconds": r["wall_seconds"]}
        row.update({c: r[c] for c in metrics_cols})
        curves.append(row)
        traj.append({"event": event, "stage": r["stage"], "step": int(r["step"]), "traj_len": r["traj_len"]})
    ev = run / "eval"
    weights = {}
    energies = {}
    if (ev / "log_w_model.npy").exists():
        weights = {
            "model_samples": np.load(ev / "log_w_model.npy"),
            "target_samples": np.load(ev / "log_w_target.npy"),
        }
        energies = {"model": np.load(ev / "energy_model.npy"), "target": np.load(ev / "energy_target.npy")}
    files = [
        _write_csv(out / "learning_curves.csv", ["event", "stage", "step", "wall_seconds", *metrics_cols], curves),
        _write_csv(out / "trajectory_length.csv", ["event", "stage", "step", "traj_len"], traj),
        _write_csv(
            out / "weight_histograms.csv",
            ["origin", "bin_left", "bin_right", "count"],
            _histogram_rows("origin", weights, bins),
        ),
        _write_csv(
            out / "energy_histograms.csv",
            ["source", "bin_left", "bin_right", "count"],
            _histogram_rows("source", energies, bins),
        ),
    ]
    return files


def cmd_variance_lab(N: int, D: int, trials: int, theta: float, seed: int, pg_trials: int | None) -> str:
    cfg = vl.ToyConfig(N, D, trials, theta, seed)
    return vl.rows_to_csv(vl.variance_rows(cfg, pg_trials))


# --- entry point -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pgcnf", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"pgcnf {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    with_config(sub.add_parser("generate-data", help="sample train/test datasets"))
    with_config(sub.add_parser("train", help="run the configured training stages"))
    e = sub.add_parser("evaluate", help="metrics report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    with_config(e)
    e.add_argument("--out", help="directory for report.json and the raw log-weight/energy arrays")
    v = sub.add_parser("variance-lab", help="toy estimator variances as CSV")
    v.add_argument("--N", type=int, default=16)
    v.add_argument("--D", type=int, default=2)
    v.add_argument("--trials", type=int, default=10_000)
    v.add_argument("--pg-trials", type=int, default=200)
    v.add_argument("--theta", type=float, default=0.0)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    pd = sub.add_parser("plot-data", help="export tidy CSVs from a run directory")
    pd.add_argument("run_dir")
    pd.add_argument("--bins", type=int, default=50)
    return p


@contextmanager
def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=int(n)):
        yield


def _fail(code: str, detail: str, status: int = 1) -> int:
    detail = " ".join(str(detail).split())
    print(f"error {code}: {detail}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        return _fail("usage", exc, 2)
    try:
        with _thread_limit():
            return _dispatch(args)
    except ConfigError as exc:
        return _fail(exc.code, exc, 2)
    except PGCNFError as exc:
        return _fail(exc.code, exc)
    except FileNotFoundError as exc:
        return _fail("file_not_found", exc)
    except OSError as exc:
        return _fail("io_error", exc)


def _dispatch(args) -> int:
    started = _now()
    if args.command == "variance-lab":
        text = cmd_variance_lab(args.N, args.D, args.trials, args.theta, args.seed, args.pg_trials)
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return 0
    if args.command == "plot-data":
        for f in cmd_plot_data(args.run_dir, args.bins):
            print(f)
        return 0
    cfg = load_config(args.config, args.overrides)
    if args.command == "evaluate":
        report, files = cmd_evaluate(cfg, args.checkpoint, args.dataset, args.out)
        print(report.to_json())
        if files:
            record_manifest(Path(args.out), "evaluate", cfg, files, started)
        return 0
    out = Path(cfg["output_dir"])
    with run_lock(out):
        if args.command == "generate-data":
            files = cmd_generate_data(cfg)
        else:
            files = cmd_train(cfg)
        record_manifest(out, args.command, cfg, files, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
