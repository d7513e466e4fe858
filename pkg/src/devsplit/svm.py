"""LIBSVM ingestion, the l1-regularized hinge-loss SVM, and the comparison experiment."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from .metric import operator_norm_estimate
from .operators import L1Resolvent, MatrixMap, prox_hinge_sum, prox_l1
from .primal_dual import InertialState, PdProblem, inertial_step, pd_advance, pd_deviate, pd_initial
from .schedules import Schedules, UniformZeta
from .trace import IterationTrace

THRESHOLDS = (1e-2, 1e-4, 1e-6)


class LibsvmParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class Dataset:
    features: np.ndarray   # (N, d), dense
    labels: np.ndarray     # (N,), entries in {-1, +1}

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def parse_libsvm(stream, strict: bool = False, n_features: int | None = None) -> Dataset:
    """Read ``<label> <idx>:<val> ...`` lines (1-based indices).

    Blank lines and ``#`` comments are skipped. Positive labels map to +1,
    the rest to -1; ``strict`` accepts only -1, 0, 1 and +1.
    """
    if isinstance(stream, (str, Path)) and not hasattr(stream, "read"):
        with open(stream) as fh:
            return parse_libsvm(fh, strict=strict, n_features=n_features)
    labels: list[float] = []
    rows: list[dict[int, float]] = []
    dmax = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *pairs = line.split()
        try:
            lab = float(head)
        except ValueError:
            raise LibsvmParseError(lineno, f"label {head!r} is not a number") from None
        if not np.isfinite(lab):
            raise LibsvmParseError(lineno, f"label {head!r} is not finite")
        if strict and lab not in (-1.0, 0.0, 1.0):
            raise LibsvmParseError(lineno, f"label {head!r} not in {{-1, 0, +1}}")
        feats: dict[int, float] = {}
        for pair in pairs:
            idx_s, sep, val_s = pair.partition(":")
            if not sep:
                raise LibsvmParseError(lineno, f"expected <index>:<value>, got {pair!r}")
            try:
                idx = int(idx_s)
            except ValueError:
                raise LibsvmParseError(lineno, f"index {idx_s!r} is not an integer") from None
            if idx < 1:
                raise LibsvmParseError(lineno, f"index {idx} must be >= 1")
            try:
                val = float(val_s)
            except ValueError:
                raise LibsvmParseError(lineno, f"value {val_s!r} is not a real number") from None
            if not np.isfinite(val):
                raise LibsvmParseError(lineno, f"value {val_s!r} is not finite")
            feats[idx - 1] = val
            dmax = max(dmax, idx)
        labels.append(1.0 if lab > 0 else -1.0)
        rows.append(feats)
    d = dmax if n_features is None else n_features
    X = np.zeros((len(rows), d))
    for i, feats in enumerate(rows):
        for j, val in feats.items():
            if j < d:
                X[i, j] = val
    return Dataset(X, np.asarray(labels))


def bundled_dataset_path(scaled: bool = True) -> Path:
    """Path of the bundled 145-sample, 5-feature liver-disorders training file.

    ``scaled`` selects the copy with every feature mapped affinely onto
    ``[-1, 1]`` (what ``svm-scale`` produces); otherwise the raw values.
    """
    name = "liver-disorders_scale.libsvm" if scaled else "liver-disorders.libsvm"
    return Path(str(resources.files("devsplit") / "data" / name))


def load_liver_disorders(scaled: bool = True) -> Dataset:
    return parse_libsvm(bundled_dataset_path(scaled))


def scale_features(data: Dataset, lower: float = -1.0, upper: float = 1.0) -> Dataset:
    """Map each feature affinely onto ``[lower, upper]``; constant features become ``lower``."""
    X = data.features
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return Dataset(lower + (upper - lower) * (X - lo) / span, data.labels.copy())


@dataclass
class SvmProblem:
    """``minimize sum(max(0, 1 - L x)) + xi |omega|_1`` with ``x = (omega, b)``."""

    L: MatrixMap
    xi: float
    norm_L: float
    pd: PdProblem

    @property
    def n_primal(self) -> int:
        return self.L.in_dim

    @property
    def n_dual(self) -> int:
        return self.L.out_dim

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(np.maximum(0.0, 1.0 - self.L.apply(x)).sum() + self.xi * np.abs(x[:-1]).sum())

    def kkt_residual(self, x, mu) -> float:
        """Distance from satisfying ``-L* mu in xi d|omega|_1`` and ``mu in d hinge(L x)``."""
        x, mu = np.asarray(x, float), np.asarray(mu, float)
        d = x.shape[0] - 1
        r1 = x - prox_l1(x - self.L.adjoint_apply(mu), self.xi, np.arange(d))
        # mu in d f(Lx) <=> Lx = prox_f(Lx + mu)
        Lx = self.L.apply(x)
        r2 = Lx - prox_hinge_sum(Lx + mu, 1.0)
        return float(np.sqrt(r1 @ r1 + r2 @ r2))


def data_matrix(data: Dataset) -> np.ndarray:
    """Rows ``phi_i * (theta_i, 1)``."""
    return data.labels[:, None] * np.hstack([data.features, np.ones((data.n_samples, 1))])


def build_svm_problem(data: Dataset, xi: float = 0.1, step_factor: float = 0.99, seed: int = 0) -> SvmProblem:
    """Assemble the SVM with ``tau = sigma = step_factor / |L|``."""
    if data.n_samples < 1 or data.n_features < 1:
        raise ValueError("need at least one sample and one feature")
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    L = MatrixMap(data_matrix(data))
    norm_L = operator_norm_estimate(L, seed=seed)
    tau = sigma = step_factor / norm_L
    A = L1Resolvent(xi, np.arange(data.n_features))
    pd = PdProblem(A=A, f_prox=prox_hinge_sum, L=L, tau=tau, sigma=sigma, norm_L=norm_L)
    return SvmProblem(L=L, xi=xi, norm_L=norm_L, pd=pd)


@dataclass
class Reference:
    x: np.ndarray
    mu: np.ndarray
    iterations: int
    residual: float

    @property
    def w(self) -> np.ndarray:
        return np.concatenate([self.x, self.mu])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, x=self.x, mu=self.mu, iterations=self.iterations, residual=self.residual)

    @classmethod
    def load(cls, path) -> "Reference":
        z = np.load(path)
        mu = z["mu"] if "mu" in z.files else np.zeros(0)
        return cls(z["x"], mu, int(z["iterations"]) if "iterations" in z.files else 0,
                   float(z["residual"]) if "residual" in z.files else float("nan"))


class ReferenceRunError(RuntimeError):
    """The reference run stopped before reaching its tolerance."""


def reference_solution(prob: SvmProblem, tol: float = 1e-13, max_iter: int = 2_000_000, x0=None, mu0=None
                       ) -> Reference:
    """Long zero-deviation Chambolle--Pock run; raises unless ``tol`` is reached."""
    x0 = np.zeros(prob.n_primal) if x0 is None else x0
    mu0 = np.zeros(prob.n_dual) if mu0 is None else mu0
    s = Schedules.build(1e-6, prob.pd.tau, 1.0, 0.0)
    state = pd_initial(x0, mu0)
    last = float("nan")
    for _ in range(max_iter):
        state = pd_advance(state, prob.pd, s)
        last = state.last.residual
        if last <= tol:
            k = prob.n_primal
            return Reference(state.x[:k].copy(), state.x[k:].copy(), state.n, last)
        state = pd_deviate(state, prob.pd, s, None)
    raise ReferenceRunError(f"reference run stopped at residual {last:.3e} > {tol:g} after {state.n} iterations")


@dataclass
class ExperimentResult:
    traces: dict[str, IterationTrace]
    reference: Reference
    table: dict[str, dict[float, int | None]] = field(default_factory=dict)

    def objective_gaps(self, prob: SvmProblem) -> dict[str, float]:
        """Relative objective gap of each run's final primal iterate to the reference."""
        f_star = prob.objective(self.reference.x)
        out = {}
        for name, tr in self.traces.items():
            f = prob.objective(tr.final_x[: prob.n_primal])
            out[name] = abs(f - f_star) / max(1.0, abs(f_star))
        return out


class DistanceCertificate:
    """Stop once the primal distance to the reference provably stays below ``target``.

    Along every run ``|w_n - w*|_M^2 + ell_{n-1}^2`` is nonincreasing, and
    ``|x|^2 <= |(x, mu)|_M^2 / (1 - sqrt(sigma tau) |L|)``. Once the
    right-hand side drops below ``target^2`` it stays there.
    """

    def __init__(self, prob: SvmProblem, target: float):
        M = prob.pd.metric
        self.factor = 1.0 / (1.0 - np.sqrt(M.contraction))
        self.target_sq = target * target

    def __call__(self, trace: IterationTrace) -> bool:
        bound = (trace.dist_sq[-1] + trace.steps["ell_sq"][-1]) * self.factor
        return bound <= self.target_sq


def run_algorithm(prob: SvmProblem, alg: str, ref: Reference, lam: float = 1.0, zeta_seed: int = 0,
                  max_iter: int = 400_000, stop_rel: float | None = 1e-6, a_max: float = 10.0,
                  epsilon: float = 1e-6, keep_iterates: bool = False) -> IterationTrace:
    """Run ``cp`` (zero deviations) or ``alg4`` (inertial) from the origin.

    With ``stop_rel`` set, the run ends as soon as the relative primal
    distance to the reference is certified to stay at or below ``stop_rel``
    for all later iterations (see :class:`DistanceCertificate`); otherwise it runs
    for ``max_iter`` steps.
    """
    x0, mu0 = np.zeros(prob.n_primal), np.zeros(prob.n_dual)
    d0 = float(np.linalg.norm(x0 - ref.x))
    stop = None if stop_rel is None else DistanceCertificate(prob, stop_rel * d0)
    trace_kw = dict(metric=prob.pd.metric, reference=ref.w, keep_iterates=keep_iterates)
    if alg == "cp":
        s = Schedules.build(epsilon, prob.pd.tau, lam, 0.0)
        state = pd_initial(x0, mu0)
        trace = IterationTrace(kind="pd", beta=prob.pd.beta, **trace_kw)
        trace.start(state.x)
        for _ in range(max_iter):
            state = pd_advance(state, prob.pd, s)
            trace.record(state.last, state.x)
            if stop is not None and stop(trace):
                return trace.finish("converged")
            state = pd_deviate(state, prob.pd, s, None)
        return trace.finish("max_iter")
    if alg == "alg4":
        s = Schedules.build(epsilon, prob.pd.tau, lam, UniformZeta(zeta_seed))
        state = InertialState.initial(x0, mu0)
        trace = IterationTrace(kind="inertial_pd", beta=0.0, **trace_kw)
        trace.start(state.w)
        status = "max_iter"
        for _ in range(max_iter):
            state = inertial_step(state, prob.pd, s, a_max=a_max)
            trace.record(state.last, state.w, a=state.last.a)
            if stop is not None and stop(trace):
                status = "converged"
                break
        trace.meta["direct_evals"] = state.direct_evals
        trace.meta["cached_evals"] = state.cached_evals
        return trace.finish(status)
    raise ValueError(f"unknown algorithm {alg!r}; expected 'cp' or 'alg4'")


def iterations_table(traces: dict[str, IterationTrace], thresholds: Iterable[float] = THRESHOLDS):
    """Iterations after which each run's relative primal distance stays below each threshold."""
    return {name: {t: tr.iterations_to(t) for t in thresholds} for name, tr in traces.items()}


def run_experiment(prob: SvmProblem, algs=("cp", "alg4"), lam: float = 1.0, zeta_seed: int = 0,
                   max_iter: int = 400_000, ref_tol: float = 1e-13, stop_rel: float = 1e-6,
                   a_max: float = 10.0, reference: Reference | None = None) -> ExperimentResult:
    """Reference run, then each algorithm from the origin against that reference."""
    ref = reference if reference is not None else reference_solution(prob, tol=ref_tol)
    traces = {alg: run_algorithm(prob, alg, ref, lam=lam, zeta_seed=zeta_seed, max_iter=max_iter,
                                 stop_rel=stop_rel, a_max=a_max) for alg in algs}
    return ExperimentResult(traces, ref, iterations_table(traces))
