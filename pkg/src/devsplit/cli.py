"""``devsplit`` command line: solve, verify, compare, validate-config.

Exit codes: 0 success (converged / no violations), 1 errors (bad input,
failed validation, schema mismatch), 2 iteration limit reached before the
tolerance, 3 Lyapunov violations found by ``verify``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import km as km_mod
from .diagnostics import check_lyapunov, fit_linear_rate
from .fb import SolverAbort, solve
from .policies import POLICIES
from .primal_dual import inertial_solve, pd_solve
from .problems import TOY1D_SOLUTION, synthetic_fb, synthetic_pd, toy1d
from .schedules import Schedules, parse_zeta, rng_for, validate_schedules
from .svm import (THRESHOLDS, Reference, ReferenceRunError, LibsvmParseError, build_svm_problem,
                  bundled_dataset_path, iterations_table, parse_libsvm, reference_solution, run_algorithm,
                  scale_features)
from .trace import IterationTrace, TraceSchemaError, read_csv

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITER, EXIT_VIOLATIONS = 0, 1, 2, 3

ALGORITHMS = ("fb", "pd", "km", "inertial_pd")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    algorithm: str = "fb"
    svm: str | None = None
    synthetic: int | None = None
    toy1d: bool = False
    dim: int = 10
    xi: float = 0.1
    lam: float = 1.0
    gamma: float | None = None
    epsilon: float = 1e-6
    zeta: str = "zero"
    max_iter: int = 10000
    residual_tol: float = 1e-10
    a_max: float = 10.0
    out: str | None = None
    reference: str | None = None
    policy: str = "zero"
    seed: int = 0
    scale_features: bool = False
    keep_iterates: bool = False

    @property
    def source(self) -> str:
        chosen = [name for name, on in (("svm", self.svm is not None), ("synthetic", self.synthetic is not None),
                                        ("toy1d", self.toy1d)) if on]
        if len(chosen) != 1:
            raise ConfigError("choose exactly one problem source: --svm PATH, --synthetic SEED or --toy1d")
        return chosen[0]


_KEY_TO_FIELD = {"lambda": "lam"}
_BOOL_FIELDS = {"toy1d", "scale_features", "keep_iterates"}


def _field_types() -> dict[str, type]:
    conv = {"int": int, "float": float, "str": str, "bool": bool}
    out = {}
    for f in fields(RunConfig):
        t = str(f.type).split("|")[0].strip()
        out[f.name] = conv.get(t, str)
    return out


def _coerce(name: str, text: str):
    t = _field_types()[name]
    if name in _BOOL_FIELDS:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    try:
        return t(text.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot read {text!r} as {t.__name__}") from None


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys are flag names without dashes."""
    out = {}
    known = {f.name for f in fields(RunConfig)}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key = key.strip().replace("-", "_")
        key = _KEY_TO_FIELD.get(key, key)
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    # defaults are None so that only flags given on the command line override the config file
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--svm", metavar="PATH", help="LIBSVM file, or 'bundled' for the packaged liver-disorders copy")
    p.add_argument("--synthetic", type=int, metavar="SEED", help="random instance from SEED")
    p.add_argument("--toy1d", action="store_const", const=True, help="one-dimensional toy with known solution 0")
    p.add_argument("--dim", type=int, help="dimension of synthetic instances")
    p.add_argument("--xi", type=float, help="l1 weight of the SVM")
    p.add_argument("--lambda", dest="lam", type=float, help="relaxation parameter")
    p.add_argument("--gamma", type=float, help="step size (fb and km; primal-dual runs use tau)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--zeta", help="zero | const:<c> | uniform:<seed>")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--residual-tol", dest="residual_tol", type=float)
    p.add_argument("--a-max", dest="a_max", type=float, help="cap on the inertial scaling")
    p.add_argument("--out", help="CSV trace path; a .npz record is written next to it")
    p.add_argument("--reference", help="reference solution .npz; computed and saved if missing")
    p.add_argument("--policy", choices=sorted(POLICIES), help="deviation policy for fb, pd and km")
    p.add_argument("--seed", type=int, help="seed for policies and the power iteration")
    p.add_argument("--scale-features", dest="scale_features", action="store_const", const=True,
                   help="map every SVM feature onto [-1, 1]")
    p.add_argument("--keep-iterates", dest="keep_iterates", action="store_const", const=True,
                   help="store all iterates in the .npz record")


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(ns, "config", None):
        values.update(read_config_file(ns.config))
    for f in fields(RunConfig):
        v = getattr(ns, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {cfg.algorithm!r}; expected one of {', '.join(ALGORITHMS)}")
    if cfg.policy not in POLICIES:
        raise ConfigError(f"unknown policy {cfg.policy!r}; expected one of {', '.join(sorted(POLICIES))}")
    if cfg.max_iter < 1:
        raise ConfigError("max_iter must be >= 1")
    return cfg


# -- building runs ----------------------------------------------------------

def _load_dataset(cfg: RunConfig):
    path = bundled_dataset_path() if cfg.svm == "bundled" else Path(cfg.svm)
    data = parse_libsvm(path)
    return scale_features(data) if cfg.scale_features else data


@dataclass
class PreparedRun:
    cfg: RunConfig
    kind: str
    problem: object
    schedules: Schedules
    beta: float
    x0: np.ndarray
    mu0: np.ndarray | None = None
    extra: object = None

    def validate(self):
        return validate_schedules(self.schedules, self.beta, self.cfg.max_iter)


def _km_map(cfg: RunConfig):
    if cfg.toy1d:
        return km_mod.FunctionMap(lambda x: -x), 1
    rng = rng_for(cfg.synthetic, "problem.km")
    d = cfg.dim
    a = rng.standard_normal(d)
    center = rng.standard_normal(d)
    # the ball and the half-space intersect: the centre lies on the boundary plane
    T = km_mod.Composition([km_mod.BallProjection(center, 1.0),
                            km_mod.HalfspaceProjection(a, float(a @ center))])
    return T, d


def prepare(cfg: RunConfig) -> PreparedRun:
    src = cfg.source
    zeta = parse_zeta(cfg.zeta)
    alg = cfg.algorithm
    if alg == "fb":
        if src == "svm":
            raise ConfigError("the SVM instance is a primal-dual problem; use --algorithm pd or inertial_pd")
        if src == "toy1d":
            prob, x0, gamma = toy1d(), np.array([5.0]), 1.0
        else:
            sp = synthetic_fb(cfg.synthetic, cfg.dim)
            prob, x0, gamma = sp.problem, np.zeros(sp.dim), 1.9 / sp.problem.beta
        gamma = cfg.gamma if cfg.gamma is not None else gamma
        s = Schedules.build(cfg.epsilon, gamma, cfg.lam, zeta)
        return PreparedRun(cfg, "fb", prob, s, prob.beta, x0)
    if alg == "km":
        if src == "svm":
            raise ConfigError("--algorithm km works on --toy1d or --synthetic maps")
        T, d = _km_map(cfg)
        x0 = np.full(d, 5.0) if src == "toy1d" else np.zeros(d)
        s = Schedules.build(cfg.epsilon, cfg.gamma if cfg.gamma is not None else 1.0, cfg.lam, zeta)
        return PreparedRun(cfg, "km", T, s, 0.0, x0)
    # primal-dual algorithms
    if src == "toy1d":
        raise ConfigError(f"--algorithm {alg} needs --svm or --synthetic")
    if src == "svm":
        svm = build_svm_problem(_load_dataset(cfg), xi=cfg.xi, seed=cfg.seed)
        prob, extra = svm.pd, svm
        x0, mu0 = np.zeros(svm.n_primal), np.zeros(svm.n_dual)
    else:
        k = max(1, cfg.dim // 2)
        sp = synthetic_pd(cfg.synthetic, n_primal=k, n_dual=max(1, cfg.dim - k), with_C=(alg == "pd"))
        prob, extra = sp.problem, sp
        x0, mu0 = np.zeros(prob.n_primal), np.zeros(prob.L.out_dim)
    s = prob.schedules(Schedules.build(cfg.epsilon, prob.tau, cfg.lam, zeta))
    beta = prob.beta if alg == "pd" else 0.0
    return PreparedRun(cfg, alg, prob, s, beta, x0, mu0, extra)


def _compute_reference(run: PreparedRun) -> np.ndarray:
    cfg = run.cfg
    if run.kind == "fb":
        if cfg.toy1d:
            return TOY1D_SOLUTION.copy()
        return synthetic_fb(cfg.synthetic, cfg.dim).solution()
    if run.kind == "km":
        if cfg.toy1d:
            return np.zeros(run.x0.size)
        s = Schedules.build(1e-6, 1.0, 1.0, 0.0)
        tr = km_mod.km_solve(run.problem, s, run.x0, max_iter=200_000, residual_tol=1e-14)
        return tr.final_x.copy()
    if cfg.svm is not None:
        ref = reference_solution(run.extra)
        return ref.w
    s = Schedules.build(1e-6, run.problem.tau, 1.0, 0.0)
    tr = pd_solve(run.problem, s, run.x0, run.mu0, max_iter=200_000, residual_tol=1e-14)
    return tr.final_x.copy()


def _reference_for(run: PreparedRun) -> np.ndarray | None:
    path = run.cfg.reference
    if path is None:
        # the toy's solution is known exactly, so its traces always carry distances
        return _compute_reference(run) if run.cfg.toy1d else None
    p = Path(path)
    k = run.x0.size
    if p.exists():
        ref = Reference.load(p)
        w = ref.w if ref.mu.size else ref.x
        expected = k + (0 if run.mu0 is None else run.mu0.size)
        if w.size != expected:
            raise ConfigError(f"reference {p} has {w.size} entries, the problem needs {expected}")
        return w
    w = _compute_reference(run)
    p.parent.mkdir(parents=True, exist_ok=True)
    Reference(w[:k].copy(), w[k:].copy(), 0, float("nan")).save(p)
    return w


def execute(run: PreparedRun, reference=None) -> IterationTrace:
    cfg = run.cfg
    policy = None
    if cfg.policy != "zero":
        cls = POLICIES[cfg.policy]
        policy = cls(a_max=cfg.a_max) if cfg.policy == "momentum" else cls(seed=cfg.seed)
    common = dict(max_iter=cfg.max_iter, residual_tol=cfg.residual_tol, reference=reference,
                  keep_iterates=cfg.keep_iterates)
    if run.kind == "fb":
        return solve(run.problem, run.schedules, run.x0, policy=policy, **common)
    if run.kind == "km":
        return km_mod.km_solve(run.problem, run.schedules, run.x0, policy=policy, **common)
    if run.kind == "pd":
        return pd_solve(run.problem, run.schedules, run.x0, run.mu0, policy=policy, **common)
    return inertial_solve(run.problem, run.schedules, run.x0, run.mu0, a_max=cfg.a_max, **common)


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".npz")


def _err(msg: str) -> int:
    print(f"devsplit: error: {msg}", file=sys.stderr)
    return EXIT_ERROR


# -- verbs ------------------------------------------------------------------

def cmd_validate(ns) -> int:
    try:
        run = prepare(config_from_args(ns))
    except (ConfigError, ValueError, OSError) as exc:
        return _err(str(exc))
    rep = run.validate()
    if not rep:
        return _err(rep.message)
    print(f"ok: {run.kind} schedules satisfy the parameter conditions for n = 0..{run.cfg.max_iter} "
          f"(beta = {run.beta:.6g})")
    return EXIT_OK


def cmd_solve(ns) -> int:
    try:
        cfg = config_from_args(ns)
        run = prepare(cfg)
        rep = run.validate()
        if not rep:
            return _err(rep.message)
        ref = _reference_for(run)
        trace = execute(run, ref)
    except SolverAbort as exc:
        if exc.trace is not None and ns.out:
            exc.trace.to_csv(ns.out)
        return _err(str(exc))
    except (ConfigError, LibsvmParseError, ReferenceRunError, ValueError, OSError) as exc:
        return _err(str(exc))
    trace.meta["algorithm"] = run.kind
    if cfg.out:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        trace.to_csv(cfg.out)
        trace.save(sidecar_path(cfg.out))
    else:
        sys.stdout.write(trace.to_csv())
    last = trace.steps["residual"][-1]
    print(f"{run.kind}: {trace.status} after {len(trace)} iterations, residual bound {last:.3e}", file=sys.stderr)
    return EXIT_OK if trace.converged else EXIT_MAX_ITER


def verify_trace(csv_path, reference=None, slack: float = 1e-9) -> dict:
    """Lyapunov audit and tail-rate fit of one saved run; raises :class:`TraceSchemaError` on bad input."""
    cols = read_csv(csv_path)
    side = sidecar_path(csv_path)
    if not side.exists():
        raise TraceSchemaError(f"{csv_path}: missing record {side}")
    trace = IterationTrace.load(side)
    K = len(trace)
    if cols["iter"].size != K + 1:
        raise TraceSchemaError(f"{csv_path}: {cols['iter'].size} rows but the record has {K + 1} iterates")
    # the CSV is authoritative for the columns it carries
    trace.steps["ell_sq"] = list(cols["ell_sq"][:K])
    trace.steps["residual"] = list(cols["residual_bound"][:K])
    have_iterates = bool(trace.iterates["x"])
    x_star = None
    if reference is not None:
        x_star = np.asarray(reference, dtype=float)
        if not have_iterates:
            if trace.reference is None or trace.reference.shape != x_star.shape or not np.allclose(
                    trace.reference, x_star, rtol=1e-12, atol=1e-12):
                raise TraceSchemaError(f"{csv_path}: distances were recorded against a different reference; "
                                       "rerun solve with this reference or with --keep-iterates")
            x_star = None
    elif not trace.dist_sq and not have_iterates:
        raise TraceSchemaError(f"{csv_path}: no distances recorded; pass --reference")
    report = check_lyapunov(trace, x_star=x_star, recompute=have_iterates, slack=slack)
    out = {"trace": str(csv_path), "steps": K, **report.summary()}
    d = trace.array("primal_dist")
    out["q_hat"] = out["r_squared"] = None
    if d.size >= 20 and np.all(np.isfinite(d)):
        fit = fit_linear_rate(d, floor=1e-14 * max(d[0], 1e-300))
        out["q_hat"], out["r_squared"], out["fit_flag"] = fit.q_hat, fit.r_squared, fit.flag
    return out


def cmd_verify(ns) -> int:
    ref = None
    if ns.reference:
        try:
            r = Reference.load(ns.reference)
        except (OSError, ValueError, KeyError) as exc:
            return _err(f"cannot read reference {ns.reference}: {exc}")
        ref = r.w if r.mu.size else r.x
    results = []
    for path in ns.traces:
        try:
            results.append(verify_trace(path, ref))
        except (TraceSchemaError, OSError) as exc:
            return _err(str(exc))
    total = 0
    for res in results:
        total += res["violations"]
        line = f"{res['trace']}: {res['steps']} steps, {res['violations']} Lyapunov violations"
        if res["violations"]:
            line += f" (first at n={res['first_violation']}, max excess {res['max_violation']:.3e}, {res['by_check']})"
        if res["q_hat"] is not None:
            line += f"; tail fit q_hat={res['q_hat']:.6g} r2={res['r_squared']:.4f}"
        print(line)
    summary = {"violations": total, "traces": results}
    if ns.json:
        Path(ns.json).write_text(json.dumps(summary, indent=2, default=float) + "\n")
    print(json.dumps({"violations": total, "q_hat": [r["q_hat"] for r in results],
                      "r_squared": [r["r_squared"] for r in results]}, default=float))
    return EXIT_OK if total == 0 else EXIT_VIOLATIONS


def _parse_run_spec(text: str) -> tuple[str, float]:
    alg, _, lam = text.partition(":")
    if alg not in ("cp", "alg4"):
        raise ConfigError(f"bad run {text!r}; expected cp[:lambda] or alg4[:lambda]")
    try:
        return alg, float(lam) if lam else 1.0
    except ValueError:
        raise ConfigError(f"bad lambda in run {text!r}") from None


def worker_count(n_jobs: int) -> int:
    env = os.environ.get("DEVSPLIT_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ConfigError(f"DEVSPLIT_THREADS must be a positive integer, got {env!r}") from None
    return max(1, min(cap, n_jobs))


def cmd_compare(ns) -> int:
    try:
        runs = [_parse_run_spec(r) for r in (ns.run or ["cp", "alg4"])]
        data = parse_libsvm(bundled_dataset_path() if ns.svm == "bundled" else Path(ns.svm))
        if ns.scale_features:
            data = scale_features(data)
        svm = build_svm_problem(data, xi=ns.xi, seed=ns.seed)
        zeta_seed = _zeta_seed(ns.zeta)
        for alg, lam in runs:
            if not (ns.epsilon <= lam <= 2.0 - ns.epsilon / 2.0):
                raise ConfigError(f"parameter condition (iii): epsilon <= lambda <= 2 - epsilon/2 violated "
                                  f"(lambda={lam:g}) in run {alg}:{lam:g}")
        if ns.reference and Path(ns.reference).exists():
            ref = Reference.load(ns.reference)
        else:
            ref = reference_solution(svm, tol=ns.ref_tol)
            if ns.reference:
                Path(ns.reference).parent.mkdir(parents=True, exist_ok=True)
                ref.save(ns.reference)
    except (ConfigError, LibsvmParseError, ValueError, OSError) as exc:
        return _err(str(exc))
    except ReferenceRunError as exc:
        return _err(f"reference run failed, nothing compared: {exc}")

    def job(spec):
        alg, lam = spec
        return run_algorithm(svm, alg, ref, lam=lam, zeta_seed=zeta_seed, max_iter=ns.max_iter,
                             a_max=ns.a_max, epsilon=ns.epsilon)

    with ThreadPoolExecutor(max_workers=worker_count(len(runs))) as pool:
        traces = list(pool.map(job, runs))
    names = [f"{alg}:{lam:g}" for alg, lam in runs]
    table = iterations_table(dict(zip(names, traces)))
    header = ["run", "algorithm", "lambda", "status"] + [f"iters_{t:g}" for t in THRESHOLDS]
    lines = [",".join(header)]
    for name, (alg, lam), tr in zip(names, runs, traces):
        row = [name, alg, repr(lam), tr.status] + ["" if table[name][t] is None else str(table[name][t])
                                                  for t in THRESHOLDS]
        lines.append(",".join(row))
        if ns.trace_dir:
            d = Path(ns.trace_dir)
            d.mkdir(parents=True, exist_ok=True)
            stem = name.replace(":", "_lambda")
            tr.to_csv(d / f"{stem}.csv")
            tr.save(d / f"{stem}.npz")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if ns.out:
        Path(ns.out).write_bytes(text.encode("ascii"))
    return EXIT_OK if all(tr.converged for tr in traces) else EXIT_MAX_ITER


def _zeta_seed(text: str) -> int:
    kind, _, arg = text.partition(":")
    if kind != "uniform" or not arg:
        raise ConfigError("compare samples zeta uniformly; pass --zeta uniform:<seed>")
    return int(arg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="devsplit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("solve", help="run one solver and write its trace")
    _add_run_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("validate-config", help="check a configuration against the parameter conditions")
    _add_run_flags(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("verify", help="audit saved traces for Lyapunov violations and fit the tail rate")
    p.add_argument("traces", nargs="+", help="CSV traces written by solve (the .npz record must sit next to each)")
    p.add_argument("--reference", help="reference solution .npz")
    p.add_argument("--json", metavar="PATH", help="write the full machine-readable report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("compare", help="iterations-to-accuracy table for SVM runs against one reference")
    p.add_argument("--svm", default="bundled", metavar="PATH")
    p.add_argument("--scale-features", dest="scale_features", action="store_true")
    p.add_argument("--run", action="append", metavar="ALG[:LAMBDA]", help="cp or alg4, repeatable")
    p.add_argument("--xi", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--zeta", default="uniform:0")
    p.add_argument("--max-iter", dest="max_iter", type=int, default=400_000)
    p.add_argument("--a-max", dest="a_max", type=float, default=10.0)
    p.add_argument("--reference", help="reference .npz; computed and saved if missing")
    p.add_argument("--ref-tol", dest="ref_tol", type=float, default=1e-13)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the table here")
    p.add_argument("--trace-dir", dest="trace_dir", help="write each run's CSV and .npz here")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except ConfigError as exc:
        return _err(str(exc))


if __name__ == "__main__":
    sys.exit(main())
