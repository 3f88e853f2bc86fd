"""Residual-driven online enrichment of the coarse space.

Each neighborhood contributes a residual functional; its Riesz
representative on the local zero-trace space is both the error indicator
fuel and, once added as a column, the enrichment itself. Marking is a
greedy mass rule over non-overlapping neighborhoods. The driver loop
re-solves the coarse problem after every batch and keeps the whole
trajectory for reporting.
"""

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse import hstack as sparse_hstack

from .offline import solve_coarse
from .solvers import LocalStokesSolver
from .spaces import LocalSpace

PHI_DROP_TOL = 1e-13


@dataclass
class LocalResidual:
    """One neighborhood's Riesz data at a given state."""

    ordinal: int
    phi: np.ndarray
    norm: float
    dual_norm: float
    ls: object


@dataclass
class ResidualReport:
    """Residual norms, indicator values, and the marked set."""

    indicator: str
    theta: float
    norms: np.ndarray
    dual_norms: np.ndarray
    next_lambda: np.ndarray
    eta: np.ndarray
    order: np.ndarray
    marked: list
    shortfall: bool

    @property
    def sum_eta(self):
        return float(self.eta.sum())

    @property
    def theta_diagnostic(self):
        """Marked residual mass over total, in the theorem's two norms."""
        total = float((self.dual_norms ** 2).sum())
        if total == 0.0:
            return 0.0
        got = float(sum(self.norms[i] ** 2 for i in self.marked))
        return got / total


@dataclass
class TrajectoryPoint:
    level: int
    dof: int
    marked_count: int
    report: ResidualReport
    state: object
    errors: object = None

    @property
    def sum_eta(self):
        return self.report.sum_eta


@dataclass
class OnlineSchedule:
    max_iters: int = 0
    tol: float = 0.0
    theta: float = 0.7
    indicator: str = "ind2"
    adaptive: bool = True


def next_eigenvalues(off, state):
    """Per-neighborhood next unused eigenvalue; +inf once exhausted."""
    lam = np.full(len(off.neighborhoods), np.inf)
    for i, eig in enumerate(off.eigenvalues):
        idx = int(off.counts[i]) + state.online_count(i)
        if idx < len(eig):
            lam[i] = eig[idx]
    return lam


def indicators(norms, next_lambda, kind="ind2"):
    """Indicator values; saturated neighborhoods are forced to zero."""
    sq = np.asarray(norms, dtype=float) ** 2
    saturated = ~np.isfinite(next_lambda)
    if kind == "ind1":
        eta = sq.copy()
    elif kind == "ind2":
        with np.errstate(divide="ignore", invalid="ignore"):
            eta = sq / next_lambda
        eta[sq == 0.0] = 0.0
    else:
        raise ValueError("unknown indicator %r" % (kind,))
    eta[saturated] = 0.0
    return eta


def mark(eta, element_sets, theta):
    """Greedy descending walk accepting non-overlapping neighborhoods.

    Stops once the accepted mass reaches theta times the total mass of
    all neighborhoods, overlapping or not. Returns the accepted ordinals
    in acceptance order and a flag set when non-overlap exhausted the
    candidates short of the target mass.

    An infinite indicator (a vanishing next eigenvalue leaves no decay
    guarantee) is mandatory: every such neighborhood is accepted ahead of
    the walk, and the mass rule then runs over the finite remainder.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    eta = np.asarray(eta, dtype=float)
    finite = np.isfinite(eta)
    total = float(eta[finite].sum())
    if total <= 0.0 and finite.all():
        return [], False
    order = np.argsort(-eta, kind="stable")
    target = theta * total
    used = set()
    accepted = []
    mass = 0.0
    for i in order:
        i = int(i)
        if eta[i] <= 0.0:
            break
        cells = set(map(int, element_sets[i]))
        if cells & used:
            continue
        accepted.append(i)
        used |= cells
        if np.isfinite(eta[i]):
            mass += float(eta[i])
            if mass >= target:
                return accepted, False
    return accepted, total > 0.0 and mass < target


def sweep_batches(neighborhoods, num_elements):
    """Greedy coloring of the overlap graph, ordinal order within colors."""
    batches = []
    covered = []
    for nb in neighborhoods:
        cells = np.zeros(num_elements, dtype=bool)
        cells[nb.elements] = True
        for batch, mask in zip(batches, covered):
            if not (mask & cells).any():
                batch.append(nb.ordinal)
                mask |= cells
                break
        else:
            batches.append([nb.ordinal])
            covered.append(cells)
    return batches


class OnlineEngine:
    """Caches per-neighborhood local spaces and factorized Riesz solvers.

    The local saddle matrices never change across enrichment levels, so
    one factorization per neighborhood serves the whole run.
    """

    def __init__(self, spec, off, threads=1):
        self.spec = spec
        self.off = off
        self.threads = max(1, int(threads))
        self._local = {}
        self._riesz = {}
        self._plain = {}

    def local_space(self, ordinal):
        ls = self._local.get(ordinal)
        if ls is None:
            nb = self.off.neighborhoods[ordinal]
            ls = LocalSpace(self.off.space, nb.tri_ids)
            self._local[ordinal] = ls
        return ls

    def _solver(self, ordinal, cache, pressure_space):
        sol = cache.get(ordinal)
        if sol is None:
            sol = LocalStokesSolver(self.spec, self.local_space(ordinal),
                                    pressure_space)
            cache[ordinal] = sol
        return sol

    def riesz_solver(self, ordinal):
        # Divergence-free per fine cell: the added column keeps the basis
        # inside the piecewise-constant-divergence family, so the coarse
        # constraint still pins the fine divergence of the solution.
        mode = "fine-p0" if self.spec.kind == "stokes" else "none"
        return self._solver(ordinal, self._riesz, mode)

    def plain_solver(self, ordinal):
        if self.spec.kind != "stokes":
            return self.riesz_solver(ordinal)
        return self._solver(ordinal, self._plain, "none")

    def residual_vector(self, state):
        off = self.off
        r = off.F - off.A @ state.u.values
        if self.spec.kind == "stokes":
            r = r - off.C.T @ state.q_coarse
        return r

    def local_residual(self, state, ordinal, r=None):
        if r is None:
            r = self.residual_vector(state)
        return self._local_residual(r, ordinal)

    def _local_residual(self, r, ordinal):
        ls = self.local_space(ordinal)
        r_loc = r[ls.l2g_dofs]
        zeros = np.zeros(ls.ndof)
        phi, _ = self.riesz_solver(ordinal).solve(zeros, rhs=r_loc,
                                                 check_compat=False)
        norm = float(np.sqrt(max(phi @ r_loc, 0.0)))
        if self.spec.kind == "stokes":
            psi, _ = self.plain_solver(ordinal).solve(zeros, rhs=r_loc,
                                                      check_compat=False)
            dual = float(np.sqrt(max(psi @ r_loc, 0.0)))
        else:
            dual = norm
        return LocalResidual(ordinal=ordinal, phi=phi, norm=norm,
                             dual_norm=dual, ls=ls)

    def all_residuals(self, state, ordinals=None):
        r = self.residual_vector(state)
        if ordinals is None:
            ordinals = range(len(self.off.neighborhoods))
        ordinals = list(ordinals)
        if self.threads > 1 and len(ordinals) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(
                    lambda i: self._local_residual(r, i), ordinals))
        return [self._local_residual(r, i) for i in ordinals]

    def report(self, state, theta=0.7, indicator="ind2"):
        """Full residual analysis of one state, marking included."""
        locs = self.all_residuals(state)
        norms = np.array([lr.norm for lr in locs])
        duals = np.array([lr.dual_norm for lr in locs])
        lam = next_eigenvalues(self.off, state)
        eta = indicators(norms, lam, kind=indicator)
        sets = [nb.elements for nb in self.off.neighborhoods]
        marked, shortfall = mark(eta, sets, theta)
        rep = ResidualReport(indicator=indicator, theta=theta, norms=norms,
                             dual_norms=duals, next_lambda=lam, eta=eta,
                             order=np.argsort(-eta, kind="stable"),
                             marked=marked, shortfall=shortfall)
        return rep, locs


def _column_from(ls, phi, ndof):
    nz = np.flatnonzero(phi)
    rows = ls.l2g_dofs[nz]
    return csc_matrix((phi[nz], (rows, np.zeros(len(nz), dtype=np.int64))),
                      shape=(ndof, 1))


def enrich(spec, state, marked, locs, engine=None, level=None):
    """Add one Riesz column per marked neighborhood and re-solve.

    Numerically vanishing representatives are skipped with a note; the
    level counter advances either way.
    """
    off = state.off
    by_ordinal = {lr.ordinal: lr for lr in locs}
    ndof = off.columns.shape[0]
    cols = []
    meta = []
    lvl = state.level + 1 if level is None else level
    for i in marked:
        lr = by_ordinal[i]
        if lr.norm <= PHI_DROP_TOL:
            warnings.warn("online column for neighborhood %d is numerically "
                          "zero; skipped" % i)
            continue
        cols.append(_column_from(lr.ls, lr.phi, ndof))
        meta.append(("on", i, lvl))
    if not cols:
        return solve_coarse(spec, off, online=state.online,
                            online_meta=state.online_meta, level=lvl)
    new = sparse_hstack(cols, format="csc")
    if state.online is not None:
        new = sparse_hstack([state.online, new], format="csc")
    return solve_coarse(spec, off, online=new,
                        online_meta=state.online_meta + meta, level=lvl)


def _advance_adaptive(spec, engine, state, schedule):
    rep, locs = engine.report(state, theta=schedule.theta,
                              indicator=schedule.indicator)
    nxt = None
    if rep.marked and rep.sum_eta > schedule.tol:
        nxt = enrich(spec, state, rep.marked, locs, engine)
    return rep, len(rep.marked), nxt


def _advance_sweep(spec, engine, state, schedule, batches):
    rep, _ = engine.report(state, theta=schedule.theta,
                           indicator=schedule.indicator)
    if rep.sum_eta <= schedule.tol:
        return rep, 0, None
    added = 0
    cur = state
    lvl = state.level + 1
    for batch in batches:
        locs = engine.all_residuals(cur, ordinals=batch)
        live = [lr.ordinal for lr in locs if lr.norm > PHI_DROP_TOL]
        if not live:
            continue
        cur = enrich(spec, cur, live, locs, engine, level=lvl)
        added += len(live)
    if added == 0:
        return rep, 0, None
    return rep, added, cur


def run_online(spec, off, schedule=None, track=None, threads=1, engine=None):
    """Drive the enrichment loop and return the trajectory.

    track, when given, is called on every state and its result stored on
    the trajectory point (error reports, typically). The first point is
    the pure offline solution; max_iters bounds the number of enrichment
    rounds after it.
    """
    schedule = schedule or OnlineSchedule()
    engine = engine or OnlineEngine(spec, off, threads=threads)
    state = solve_coarse(spec, off)
    batches = None
    if not schedule.adaptive:
        batches = sweep_batches(off.neighborhoods, off.grid.num_elements)
    points = []
    while True:
        if len(points) >= schedule.max_iters:
            rep, _ = engine.report(state, theta=schedule.theta,
                                   indicator=schedule.indicator)
            count, nxt = 0, None
        elif schedule.adaptive:
            rep, count, nxt = _advance_adaptive(spec, engine, state, schedule)
        else:
            rep, count, nxt = _advance_sweep(spec, engine, state, schedule,
                                             batches)
        errors = track(state) if track is not None else None
        points.append(TrajectoryPoint(level=state.level, dof=state.dof,
                                      marked_count=count, report=rep,
                                      state=state, errors=errors))
        if nxt is None:
            return points
        state = nxt


TRAJECTORY_COLUMNS = ("level", "dof", "marked_count", "sum_eta",
                      "e_L2", "e_H1", "e_p")


def trajectory_rows(points):
    """CSV-ready rows; error cells stay blank without a tracker."""
    rows = []
    for pt in points:
        row = [pt.level, pt.dof, pt.marked_count, "%.12e" % pt.sum_eta]
        for name in ("e_L2", "e_H1", "e_p"):
            val = getattr(pt.errors, name, None) if pt.errors else None
            row.append("" if val is None else "%.12e" % val)
        rows.append(row)
    return rows


def write_trajectory_csv(path, points):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        writer.writerows(trajectory_rows(points))
