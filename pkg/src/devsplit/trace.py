"""Per-iteration records of a run, with CSV and ``.npz`` persistence."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .metric import IdentityMetric, Metric, PdPoint, PrimalDualMetric

CSV_HEADER = ("iter", "primal_dist_rel", "dual_dist_rel", "scaling_a", "residual_bound", "ell_sq")

_STEP_FIELDS = ("gamma", "lam", "zeta", "ell_sq", "residual", "weight_u", "weight_v",
                "u_norm_sq", "v_norm_sq", "scaling_a", "delta")


class TraceSchemaError(ValueError):
    pass


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v))


class IterationTrace:
    """Scalars for every step ``n`` plus distances for every iterate ``x_0..x_K``.

    Step scalars have length ``K`` (number of steps); iterate quantities
    have length ``K + 1``. With ``keep_iterates`` the vectors ``x_n, p_n,
    u_n, v_n`` are kept as well, which lets the diagnostics recompute every
    quantity from scratch.
    """

    def __init__(self, kind: str = "fb", beta: float = 0.0, metric: Metric | None = None, reference=None,
                 keep_iterates: bool = False):
        self.kind = kind
        self.beta = float(beta)
        self.metric = metric if metric is not None else IdentityMetric()
        if isinstance(reference, PdPoint):
            reference = reference.stack()
        self.reference = None if reference is None else np.asarray(reference, dtype=float)
        self.keep_iterates = keep_iterates
        self.status = "running"
        self.steps = {k: [] for k in _STEP_FIELDS}
        self.dist_sq: list[float] = []
        self.primal_dist: list[float] = []
        self.dual_dist: list[float] = []
        self.iterates: dict[str, list] = {"x": [], "p": [], "u": [], "v": []}
        self.final_x: np.ndarray | None = None
        self.meta: dict = {}

    # -- recording ----------------------------------------------------------

    @property
    def n_primal(self) -> int | None:
        return self.metric.n_primal if isinstance(self.metric, PrimalDualMetric) else None

    def _record_point(self, x):
        self.final_x = x
        if self.keep_iterates:
            self.iterates["x"].append(np.array(x))
        if self.reference is None:
            return
        d = x - self.reference
        self.dist_sq.append(self.metric.norm_sq(d))
        k = self.n_primal
        if k is None:
            self.primal_dist.append(float(np.linalg.norm(d)))
        else:
            self.primal_dist.append(float(np.linalg.norm(d[:k])))
            self.dual_dist.append(float(np.linalg.norm(d[k:])))

    def start(self, x0):
        self._record_point(np.asarray(x0, dtype=float))

    def record(self, info, x_next, delta=None, a=None):
        st = self.steps
        st["gamma"].append(float(info.gamma))
        st["lam"].append(float(info.lam))
        st["zeta"].append(float(info.zeta))
        st["ell_sq"].append(float(info.ell_sq))
        st["weight_u"].append(float(info.weight_u))
        st["weight_v"].append(float(info.weight_v))
        st["residual"].append(float(info.residual))
        un = getattr(info, "u_norm_sq", None)
        vn = getattr(info, "v_norm_sq", None)
        if un is None:
            un = self.metric.norm_sq(info.u) if info.weight_u and np.any(info.u) else 0.0
        if vn is None:
            vn = self.metric.norm_sq(info.v) if np.any(info.v) else 0.0
        st["u_norm_sq"].append(float(un))
        st["v_norm_sq"].append(float(vn))
        st["scaling_a"].append(np.nan if a is None else float(a))
        st["delta"].append(np.nan if delta is None else float(delta))
        if self.keep_iterates:
            self.iterates["p"].append(np.array(info.p))
            self.iterates["u"].append(np.array(info.u))
            self.iterates["v"].append(np.array(info.v))
        self._record_point(np.asarray(x_next, dtype=float))

    def finish(self, status: str) -> "IterationTrace":
        self.status = status
        return self

    # -- views --------------------------------------------------------------

    def __len__(self):
        return len(self.steps["ell_sq"])

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def array(self, name: str) -> np.ndarray:
        if name in self.steps:
            return np.asarray(self.steps[name], dtype=float)
        if name in ("dist_sq", "primal_dist", "dual_dist"):
            return np.asarray(getattr(self, name), dtype=float)
        raise KeyError(name)

    def rel(self, which: str = "primal") -> np.ndarray:
        d = self.array(f"{which}_dist")
        if d.size == 0:
            return d
        return d / d[0] if d[0] > 0 else d

    def iterations_to(self, threshold: float, which: str = "primal", sustained: bool = True) -> int | None:
        """Iterate index from which the relative distance is at or below ``threshold``.

        With ``sustained`` (the default) this is the first index after which
        every recorded iterate satisfies the threshold, so brief dips of an
        oscillating sequence do not count. Otherwise it is the first hit.
        ``None`` when the threshold is never reached (or not held at the end).
        """
        r = self.rel(which)
        if not sustained:
            hit = np.nonzero(r <= threshold)[0]
            return int(hit[0]) if hit.size else None
        if r.size == 0 or r[-1] > threshold:
            return None
        above = np.nonzero(r > threshold)[0]
        return int(above[-1]) + 1 if above.size else 0

    # -- persistence --------------------------------------------------------

    def csv_rows(self):
        K = len(self)
        pr, du = self.rel("primal"), self.rel("dual")
        for n in range(K + 1):
            step = n < K
            yield (
                str(n),
                _fmt(pr[n]) if n < pr.size else "",
                _fmt(du[n]) if n < du.size else "",
                _fmt(self.steps["scaling_a"][n]) if step else "",
                _fmt(self.steps["residual"][n]) if step else "",
                _fmt(self.steps["ell_sq"][n]) if step else "",
            )

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.csv_rows())
        text = buf.getvalue()
        if path is not None:
            Path(path).write_bytes(text.encode("ascii"))
        return text

    def save(self, path) -> None:
        """Full record as ``.npz`` (scalars, metadata and any kept iterates)."""
        data = {f"step_{k}": np.asarray(v, dtype=float) for k, v in self.steps.items()}
        data["dist_sq"] = np.asarray(self.dist_sq, dtype=float)
        data["primal_dist"] = np.asarray(self.primal_dist, dtype=float)
        data["dual_dist"] = np.asarray(self.dual_dist, dtype=float)
        data["kind"] = np.array(self.kind)
        data["status"] = np.array(self.status)
        data["beta"] = np.array(self.beta)
        if self.reference is not None:
            data["reference"] = self.reference
        if self.final_x is not None:
            data["final_x"] = self.final_x
        if isinstance(self.metric, PrimalDualMetric):
            data["metric_tau"] = np.array(self.metric.tau)
            data["metric_sigma"] = np.array(self.metric.sigma)
            data["metric_norm_L"] = np.array(self.metric.norm_L)
            data["metric_L"] = self.metric.L.toarray()
        for k, v in self.iterates.items():
            if v:
                data[f"iter_{k}"] = np.vstack(v)
        with open(path, "wb") as fh:
            np.savez_compressed(fh, **data)

    @classmethod
    def load(cls, path) -> "IterationTrace":
        from .operators import MatrixMap

        try:
            z = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise TraceSchemaError(f"cannot read trace record {path}: {exc}") from exc
        required = {"kind", "status", "beta", "dist_sq"} | {f"step_{k}" for k in _STEP_FIELDS}
        missing = required - set(z.files)
        if missing:
            raise TraceSchemaError(f"trace record {path} lacks fields: {sorted(missing)}")
        if "metric_L" in z.files:
            metric = PrimalDualMetric(float(z["metric_tau"]), float(z["metric_sigma"]), MatrixMap(z["metric_L"]),
                                      norm_L=float(z["metric_norm_L"]))
        else:
            metric = IdentityMetric()
        keep = any(f"iter_{k}" in z.files for k in ("x", "p", "u", "v"))
        t = cls(kind=str(z["kind"]), beta=float(z["beta"]), metric=metric,
                reference=z["reference"] if "reference" in z.files else None, keep_iterates=keep)
        t.status = str(z["status"])
        for k in _STEP_FIELDS:
            t.steps[k] = list(z[f"step_{k}"])
        t.dist_sq = list(z["dist_sq"])
        t.primal_dist = list(z["primal_dist"]) if "primal_dist" in z.files else []
        t.dual_dist = list(z["dual_dist"]) if "dual_dist" in z.files else []
        for k in ("x", "p", "u", "v"):
            if f"iter_{k}" in z.files:
                t.iterates[k] = list(z[f"iter_{k}"])
        if "final_x" in z.files:
            t.final_x = z["final_x"]
        return t


def read_csv(path) -> dict[str, np.ndarray]:
    """Read a trace CSV, checking the header. Empty fields become NaN."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise TraceSchemaError(f"{path}: header must be {','.join(CSV_HEADER)}")
    cols = {h: [] for h in CSV_HEADER}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_HEADER):
            raise TraceSchemaError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        for h, val in zip(CSV_HEADER, row):
            try:
                cols[h].append(float(val) if val != "" else np.nan)
            except ValueError as exc:
                raise TraceSchemaError(f"{path}:{lineno}: bad value {val!r} in column {h}") from exc
    return {h: np.asarray(v) for h, v in cols.items()}
