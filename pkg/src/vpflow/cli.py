"""Config-driven experiment runner: ``vpflow run <config.json>``.

Every run writes plot-ready CSV/JSON files plus ``manifest.json`` into its
output directory.  Exit codes: 0 success, 2 invalid configuration, 3
numerical failure; failures also print a JSON error record to stderr and,
when possible, write it to ``error.json``.

Numerical modules are imported lazily so ``--threads`` can cap the BLAS
thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
from importlib import metadata, resources
from pathlib import Path

import jsonschema

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULT_SWEEP = [{"delta": 0.1, "T": 2.0}, {"delta": 0.01, "T": 3.0}, {"delta": 0.001, "T": 4.0}]

REQUIRED_BLOCKS = {
    "score_bounds": ("target",),
    "transport": ("target", "time"),
    "converge": ("target",),
    "train_score": ("target", "time"),
    "train_iresnet": ("target",),
    "compare": ("targets", "time"),
    "girsanov_check": ("target", "time"),
}

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class ConfigError(ValueError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(message)
        self.pointer = pointer


# ---------------------------------------------------------------------------
# CSV helpers


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int,)) and not isinstance(v, bool):
        return str(v)
    return repr(float(v))


def write_csv(path, header, rows) -> Path:
    """Write a header row then ``rows``; floats use ``repr`` so files are exact and byte-stable."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row of length {len(row)} under a {len(header)}-column header")
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list]]:
    """Read a CSV written by :func:`write_csv`; numeric cells come back as floats."""

    def conv(cell: str):
        try:
            return float(cell)
        except ValueError:
            return cell

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[conv(c) for c in row] for row in reader]
    return header, rows


def _point_columns(dim: int) -> list[str]:
    return [f"x{i}" for i in range(dim)]


def write_points(path, pts) -> Path:
    """Export a point set under the ``dim,x0[,x1]`` header."""
    dim = len(pts[0]) if len(pts) else 0
    return write_csv(path, ["dim"] + _point_columns(dim), [[dim] + [float(v) for v in x] for x in pts])


# ---------------------------------------------------------------------------
# configuration


def load_schema() -> dict:
    return json.loads(resources.files("vpflow").joinpath("config_schema.json").read_text())


def validate_config(cfg: dict) -> dict:
    """Strict schema validation plus cross-field checks; raises :class:`ConfigError`."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        parts = [str(p) for p in err.absolute_path]
        if err.validator == "additionalProperties" and isinstance(err.instance, dict):
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            parts += extra[:1]
        pointer = "/" + "/".join(parts)
        raise ConfigError(err.message, pointer)
    exp = cfg["experiment"]
    for block in REQUIRED_BLOCKS[exp]:
        if block not in cfg:
            raise ConfigError(f"experiment {exp!r} needs a {block!r} block", f"/{block}")
    tm = cfg.get("time")
    if tm is not None and "delta" in tm and not tm["delta"] < tm["T"]:
        raise ConfigError("time.delta must be smaller than time.T", "/time/delta")
    for i, pair in enumerate(cfg.get("sweep", [])):
        if not pair["delta"] < pair["T"]:
            raise ConfigError("sweep delta must be smaller than T", f"/sweep/{i}/delta")
    tg = cfg.get("t_grid", {})
    if "lo" in tg and "hi" in tg and not tg["lo"] < tg["hi"]:
        raise ConfigError("t_grid.lo must be smaller than t_grid.hi", "/t_grid/lo")
    grid = cfg.get("grid")
    if grid is not None:
        if not len(grid["lo"]) == len(grid["hi"]) == len(grid["count"]):
            raise ConfigError("grid lo/hi/count must have equal lengths", "/grid")
        for i, (lo, hi) in enumerate(zip(grid["lo"], grid["hi"])):
            if not lo < hi:
                raise ConfigError("grid lo must be smaller than hi", f"/grid/lo/{i}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------------------
# experiment runners; each returns the list of files written


class _Ctx:
    def __init__(self, cfg: dict, out: Path):
        from .flow import IntegratorConfig
        from .metrics import GridSpec

        self.cfg = cfg
        self.out = out
        self.seed = int(cfg.get("seed", 0))
        self.written: list[Path] = []
        self.integrator = IntegratorConfig(**cfg.get("integrator", {}))
        g = cfg.get("grid")
        self.grid_override = GridSpec(tuple(g["lo"]), tuple(g["hi"]), tuple(g["count"])) if g else None

    def target(self, block=None):
        from .targets import make_builtin_target

        block = block or self.cfg["target"]
        return make_builtin_target(block["name"], block.get("params"))

    def grid(self, dim: int, default=None):
        from .metrics import GridSpec

        if self.grid_override is not None:
            if self.grid_override.dim != dim:
                raise ConfigError(f"grid has dimension {self.grid_override.dim}, target has {dim}", "/grid")
            return self.grid_override
        return default or GridSpec.default(dim)

    def csv(self, name, header, rows):
        self.written.append(write_csv(self.out / name, header, rows))

    def json(self, name, obj):
        path = self.out / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
        self.written.append(path)

    def report(self, name, rep):
        path = self.out / name
        path.write_text(rep.to_json() + "\n")
        self.written.append(path)


def _json_default(o):
    try:
        return float(o)
    except (TypeError, ValueError):
        return str(o)


def emit_ltc_curve(ctx: _Ctx) -> None:
    """``t,empirical_L,theoretical_L[,learned_L]`` on a log-spaced time grid."""
    import numpy as np

    from .metrics import GridSpec
    from .score_learn import LearnedScore, learned_lipschitz
    from .vp import VpScoreModel, empirical_L, lipschitz_bound

    target = ctx.target()
    model = VpScoreModel(target)
    tg = ctx.cfg.get("t_grid", {})
    lo, hi, n = tg.get("lo", 1e-3), tg.get("hi", 5.0), tg.get("count", 50)
    ts = list(np.geomspace(lo, hi, n))
    if tg.get("include_zero", False):
        ts = [0.0] + ts
    bound = lipschitz_bound(target, T=hi)
    default = GridSpec.uniform(1, -5.0, 5.0, 201) if target.dim == 1 else GridSpec.uniform(2, -4.0, 4.0, 41)
    pts = ctx.grid(target.dim, default).points()
    ckpt = ctx.cfg.get("checkpoints", {}).get("learned_score")
    learned = LearnedScore.load(_resolve(ckpt, "/checkpoints/learned_score")) if ckpt else None
    rows = []
    for t in ts:
        emp = empirical_L(model, t, pts) if (t > 0 or model.smooth_at_zero) else math.nan
        theo = bound(t) if bound.valid(t) else math.nan
        row = [t, emp, theo]
        if learned is not None:
            row.append(learned_lipschitz(learned, t, pts) if t > 0 else math.nan)
        rows.append(row)
    header = ["t", "empirical_L", "theoretical_L"] + (["learned_L"] if learned is not None else [])
    ctx.csv("lipschitz_curve.csv", header, rows)


def _resolve(path: str, pointer: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint {path!r} does not exist", pointer)
    return p


def run_transport(ctx: _Ctx) -> None:
    import numpy as np

    from .flow import FlowField, std_normal_logpdf, transport
    from .vp import VpScoreModel

    target = ctx.target()
    tm = ctx.cfg["time"]
    delta, T = tm.get("delta", 1e-6), tm["T"]
    field_ = FlowField.from_model(VpScoreModel(target))
    pts = ctx.grid(target.dim).points()
    res = transport(field_, delta, T, pts, ctx.integrator)
    cols = _point_columns(target.dim)
    ctx.csv(
        "transport.csv",
        cols + [f"y{i}" for i in range(target.dim)] + ["logdet"],
        [list(x) + list(y) + [ld] for x, y, ld in zip(pts, res.endpoint, res.logdet)],
    )
    logp = std_normal_logpdf(res.endpoint) + res.logdet
    ctx.csv("pullback.csv", cols + ["logp"], [list(x) + [lp] for x, lp in zip(pts, logp)])
    for i, p in enumerate(ctx.cfg.get("trajectory_points", [])):
        if len(p) != target.dim:
            raise ConfigError("trajectory point dimension does not match the target", f"/trajectory_points/{i}")
        tr = transport(field_, delta, T, np.asarray([p], float), ctx.integrator, record=True)
        rows = [[t] + list(x[0]) + [ld[0]] for t, x, ld in zip(tr.trajectory_t, tr.trajectory_x, tr.trajectory_logdet)]
        ctx.csv(f"trajectory_{i}.csv", ["t"] + cols + ["logdet"], rows)
    n_samples = int(ctx.cfg.get("n_samples", 1000))
    draws = target.sample(n_samples, ctx.seed)
    write_points(ctx.out / "samples.csv", draws)
    write_points(ctx.out / "pushed.csv", transport(field_, delta, T, draws, ctx.integrator).endpoint)
    ctx.written += [ctx.out / "samples.csv", ctx.out / "pushed.csv"]
    ctx.json(
        "transport_summary.json",
        {"delta": delta, "T": T, "steps_accepted": res.steps_accepted, "steps_rejected": res.steps_rejected,
         "max_step_error": res.max_step_error, "n_points": len(pts)},
    )


def run_converge(ctx: _Ctx) -> None:
    from .metrics import CONVERGENCE_COLUMNS, bound_suite, convergence_table
    from .vp import VpScoreModel

    target = ctx.target()
    model = VpScoreModel(target)
    sweep = ctx.cfg.get("sweep", DEFAULT_SWEEP)
    grid = ctx.grid(target.dim)
    rows = convergence_table(target, model, [(p["delta"], p["T"]) for p in sweep], grid, ctx.integrator)
    ctx.csv("convergence.csv", CONVERGENCE_COLUMNS, [[r[c] for c in CONVERGENCE_COLUMNS] for r in rows])
    reports = [json.loads(bound_suite(target, model, T, grid).to_json()) for T in ctx.cfg.get("T_values", [1.0, 2.0, 3.0, 4.0])]
    ctx.json("bound_suite.json", reports)


def _dsm_config(ctx: _Ctx, T: float):
    from .score_learn import DsmConfig

    return DsmConfig(T=T, seed=ctx.seed, **ctx.cfg.get("training", {}))


def _learned_score(ctx: _Ctx, target, T: float, tag: str = "", force_train: bool = False):
    from .score_learn import LearnedScore, train_dsm

    ckpt = ctx.cfg.get("checkpoints", {}).get("learned_score")
    if ckpt and not force_train:
        return LearnedScore.load(_resolve(ckpt, "/checkpoints/learned_score"))
    score, log = train_dsm(target, _dsm_config(ctx, T))
    score.save(ctx.out / f"score_checkpoint{tag}.json")
    ctx.written.append(ctx.out / f"score_checkpoint{tag}.json")
    ctx.csv(f"train_log{tag}.csv", ["step", "loss_ema"], log)
    return score


def run_train_score(ctx: _Ctx) -> None:
    from .score_learn import score_error
    from .vp import VpScoreModel

    target = ctx.target()
    tm = ctx.cfg["time"]
    delta, T = tm.get("delta", 0.01), tm["T"]
    score = _learned_score(ctx, target, T, force_train=True)
    se = ctx.cfg.get("score_error", {})
    err = score_error(score, VpScoreModel(target), delta, T, se.get("n_mc", 100_000), ctx.seed, se.get("n_times", 1000))
    ctx.json("report.json", {"E_dT": err.value, "E_dT_se": err.std_error, "n_mc": err.n_mc,
                             "resampled": err.resampled, "delta": delta, "T": T})


def _mle_configs(ctx: _Ctx):
    from .iresnet import MleConfig

    block = dict(ctx.cfg.get("iresnet", {}))
    L_values = block.pop("L_values", [0.25, 0.75, 0.95])
    return [MleConfig(L=L, seed=ctx.seed, **block) for L in L_values]


def _iresnet(ctx: _Ctx, target, mcfg, tag: str):
    from .iresnet import IResNet, train_mle

    key = f"{target.name}@{mcfg.L:g}"
    ckpt = ctx.cfg.get("checkpoints", {}).get("iresnet", {}).get(key)
    if ckpt:
        net = IResNet.load(_resolve(ckpt, f"/checkpoints/iresnet/{key}"))
        net.project(certify=True)
        return net
    net, log = train_mle(target, mcfg)
    path = ctx.out / f"iresnet{tag}.json"
    net.save(path)
    ctx.written.append(path)
    ctx.csv(f"train_log{tag}.csv", ["step", "loss_ema"], log)
    return net


def run_train_iresnet(ctx: _Ctx) -> None:
    import numpy as np

    from .metrics import kl_divergence, l1_distance

    target = ctx.target()
    grid = ctx.grid(target.dim)
    pts = grid.points()
    pH = target.pdf(pts)
    summary = []
    for mcfg in _mle_configs(ctx):
        tag = f"_L{mcfg.L:g}"
        net = _iresnet(ctx, target, mcfg, tag)
        logp = net.logpdf(pts)
        q = np.exp(logp)
        ctx.csv(f"density{tag}.csv", _point_columns(target.dim) + ["logp"], [list(x) + [lp] for x, lp in zip(pts, logp)])
        cert = net.certificate()
        ctx.json(f"certificate{tag}.json", cert)
        summary.append({"L": mcfg.L, "k": mcfg.k, "l1": l1_distance(pH, q, grid), "kl": kl_divergence(pH, q, grid)})
    ctx.json("report.json", summary)


def run_compare(ctx: _Ctx) -> None:
    import numpy as np

    from .flow import FlowField, pullback_logpdf
    from .metrics import kl_divergence, l1_distance
    from .vp import VpScoreModel

    tm = ctx.cfg["time"]
    delta, T = tm.get("delta", 0.01), tm["T"]
    rows = []
    for ti, block in enumerate(ctx.cfg["targets"]):
        target = ctx.target(block)
        grid = ctx.grid(target.dim)
        pts = grid.points()
        pH = target.pdf(pts)

        def row(model_name, key, q):
            rows.append([target.name, model_name, key, l1_distance(pH, q, grid), kl_divergence(pH, q, grid)])

        for mcfg in _mle_configs(ctx):
            net = _iresnet(ctx, target, mcfg, f"_{target.name}_L{mcfg.L:g}")
            row("iresnet", mcfg.L, np.exp(net.logpdf(pts)))
        exact = FlowField.from_model(VpScoreModel(target))
        row("flow_exact", T, np.exp(pullback_logpdf(exact, delta, T, pts, ctx.integrator)))
        learned = _learned_score(ctx, target, T, tag=f"_{target.name}")
        row("flow_learned", T, np.exp(pullback_logpdf(learned.field(), delta, T, pts, ctx.integrator)))
    ctx.csv("compare.csv", ["target", "model", "L_or_T", "l1", "kl"], rows)


def run_girsanov(ctx: _Ctx) -> None:
    from .score_learn import girsanov_kl_check
    from .vp import VpScoreModel

    target = ctx.target()
    if target.dim != 1:
        raise ConfigError("girsanov_check needs a 1D target", "/target/name")
    tm = ctx.cfg["time"]
    delta, T = tm.get("delta", 0.01), tm["T"]
    score = _learned_score(ctx, target, T)
    se = ctx.cfg.get("score_error", {})
    rep = girsanov_kl_check(
        score, VpScoreModel(target), delta, T, ctx.grid(1), se.get("n_mc", 100_000), ctx.seed, ctx.integrator,
        decomposition=True,
    )
    ctx.report("report.json", rep)


RUNNERS = {
    "score_bounds": emit_ltc_curve,
    "transport": run_transport,
    "converge": run_converge,
    "train_score": run_train_score,
    "train_iresnet": run_train_iresnet,
    "compare": run_compare,
    "girsanov_check": run_girsanov,
}


def _numeric_errors() -> tuple[type[BaseException], ...]:
    from .flow import FlowError
    from .iresnet import CertificationError, InversionError
    from .metrics import MetricError
    from .nn import NetError
    from .score_learn import TrainingDiverged
    from .targets import TargetError
    from .vp import VpError

    return (FlowError, VpError, MetricError, NetError, TrainingDiverged, InversionError, CertificationError,
            TargetError, FloatingPointError, ArithmeticError, np_linalg_error())


def np_linalg_error():
    import numpy as np

    return np.linalg.LinAlgError


def _versions() -> dict:
    import numpy
    import scipy

    from . import __version__

    return {"python": platform.python_version(), "numpy": numpy.__version__, "scipy": scipy.__version__,
            "jsonschema": metadata.version("jsonschema"), "vpflow": __version__}


def _fail(code: int, kind: str, message: str, out: Path | None, pointer: str = "") -> int:
    record = {"status": "error", "exit_code": code, "kind": kind, "message": message}
    if pointer:
        record["pointer"] = pointer
    text = json.dumps(record, sort_keys=True)
    print(text, file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(text + "\n")
        except OSError:
            pass
    return code


def run(config_path, out: str | None = None, seed: int | None = None, threads: int | None = None) -> int:
    """Run one experiment; returns the process exit code."""
    out_dir = Path(out) if out else None
    try:
        try:
            cfg = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        if seed is not None:
            cfg["seed"] = seed
        validate_config(cfg)
        out_dir = out_dir or Path(cfg.get("output_dir", f"runs/{cfg['experiment']}"))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), out_dir, exc.pointer)

    if threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)
    numeric = _numeric_errors()
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        ctx = _Ctx(cfg, out_dir)
        RUNNERS[cfg["experiment"]](ctx)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), out_dir, exc.pointer)
    except numeric as exc:
        return _fail(EXIT_NUMERIC, "numerical", f"{type(exc).__name__}: {exc}", out_dir)
    manifest = {
        "experiment": cfg["experiment"],
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seed": int(cfg.get("seed", 0)),
        "threads": threads,
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - start,
        "outputs": {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in ctx.written},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vpflow", description="Probability-flow transport experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment from a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--threads", type=int, default=None, help="cap on BLAS threads (env VPFLOW_THREADS)")
    p_run.add_argument("--out", default=None, help="output directory (overrides config output_dir)")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    args = parser.parse_args(argv)
    threads = args.threads
    if threads is None and os.environ.get("VPFLOW_THREADS"):
        try:
            threads = int(os.environ["VPFLOW_THREADS"])
        except ValueError:
            return _fail(EXIT_CONFIG, "config", "VPFLOW_THREADS must be an integer", None)
    if threads is not None and threads < 1:
        return _fail(EXIT_CONFIG, "config", "--threads must be at least 1", None)
    return run(args.config, args.out, args.seed, threads)


if __name__ == "__main__":
    sys.exit(main())
