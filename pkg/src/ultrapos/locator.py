"""Pseudo-range trilateration.

Unknowns are the receiver position and a clock term ``beta`` (metres) that
absorbs the common, unknown emission epoch. The model for anchor ``i`` is

    c * (t_i - t_s) = |U_i - P| + beta
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .channel import SPEED_OF_SOUND
from .errors import DegenerateGeometryError, InsufficientAnchorsError

FIXES_SCHEMA = "fixes/1"
FIX_COLUMNS = ["x", "y", "z", "beta", "residual_rms", "converged"]

COND_LIMIT = 1e8
SPREAD_TOL = 1e-6
OUTLIER_FLOOR = 0.05   # metres; residuals below this are never outliers


@dataclass
class PseudoRangeSet:
    anchors: np.ndarray          # (n, 3)
    toas: np.ndarray             # (n,) seconds
    c: float = SPEED_OF_SOUND
    t_s: float = 0.0
    ids: list | None = None

    def __post_init__(self):
        self.anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        self.toas = np.asarray(self.toas, dtype=float).reshape(-1)
        if self.anchors.shape[0] != len(self.toas) or self.anchors.shape[1] != 3:
            raise ValueError("anchors must be (n, 3) with one ToA each")
        if self.ids is None:
            self.ids = list(range(len(self.toas)))

    @classmethod
    def from_entries(cls, entries, c: float = SPEED_OF_SOUND, t_s: float = 0.0) -> "PseudoRangeSet":
        entries = list(entries)
        return cls(np.array([e[0] for e in entries], float).reshape(-1, 3),
                   np.array([e[1] for e in entries], float), c, t_s)

    @classmethod
    def from_toas(cls, toas, anchor_map: dict, c: float = SPEED_OF_SOUND) -> "PseudoRangeSet":
        """Pair ``(id, t)`` tuples with known anchor positions; unknown ids are skipped."""
        pairs = [(i, t) for i, t in toas if i in anchor_map]
        return cls(np.array([anchor_map[i] for i, _ in pairs], float).reshape(-1, 3),
                   np.array([t for _, t in pairs], float), c, 0.0, [i for i, _ in pairs])

    def __len__(self) -> int:
        return len(self.toas)

    @property
    def ranges(self) -> np.ndarray:
        return self.c * (self.toas - self.t_s)

    def subset(self, keep: np.ndarray) -> "PseudoRangeSet":
        return PseudoRangeSet(self.anchors[keep], self.toas[keep], self.c, self.t_s,
                              [i for i, k in zip(self.ids, keep) if k])


@dataclass
class PositionFix:
    position: np.ndarray
    clock_term: float
    residual_rms: float
    iterations: int
    converged: bool
    used_ids: list = field(default_factory=list)
    dropped_ids: list = field(default_factory=list)


def _unpack(theta: np.ndarray, dims: int, z_fixed: float) -> tuple[np.ndarray, float]:
    if dims == 3:
        return theta[:3], theta[3]
    return np.array([theta[0], theta[1], z_fixed]), theta[2]


def residuals(prs: PseudoRangeSet, position, beta: float) -> np.ndarray:
    d = np.linalg.norm(prs.anchors - np.asarray(position, float), axis=1)
    return prs.ranges - beta - d


def jacobian(prs: PseudoRangeSet, position, dims: int = 3) -> np.ndarray:
    """d residual / d (position[:dims], beta)."""
    diff = np.asarray(position, float) - prs.anchors
    d = np.maximum(np.linalg.norm(diff, axis=1), 1e-12)
    return np.column_stack([-diff[:, :dims] / d[:, None], -np.ones(len(prs))])


def check_geometry(anchors: np.ndarray, dims: int) -> None:
    """Reject collinear anchors (2D) or coplanar anchors (3D)."""
    a = np.asarray(anchors, float)[:, :dims]
    if len(a) < dims:
        raise DegenerateGeometryError("too few anchors to span the space")
    s = np.linalg.svd(a - a.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[dims - 1] / s[0] < SPREAD_TOL:
        shape = "collinear" if dims == 2 else "coplanar"
        raise DegenerateGeometryError(f"anchors are {shape}; position is not observable")


def gdop(prs: PseudoRangeSet, at, dims: int = 3) -> float:
    check_geometry(prs.anchors, dims)
    h = -jacobian(prs, at, dims)
    if np.linalg.cond(h) > COND_LIMIT:
        raise DegenerateGeometryError("geometry matrix is singular at this point")
    return float(np.sqrt(np.trace(np.linalg.inv(h.T @ h))))


def _lm(prs: PseudoRangeSet, theta: np.ndarray, dims: int, z_fixed: float,
        max_iter: int, tol: float) -> tuple[np.ndarray, int, bool]:
    lam = 1e-3
    p, b = _unpack(theta, dims, z_fixed)
    r = residuals(prs, p, b)
    cost = r @ r
    for it in range(1, max_iter + 1):
        j = jacobian(prs, p, dims)
        jtj, jtr = j.T @ j, j.T @ r
        while True:
            step = np.linalg.solve(jtj + lam * np.eye(len(theta)), -jtr)
            cand = theta + step
            pc, bc = _unpack(cand, dims, z_fixed)
            rc = residuals(prs, pc, bc)
            cc = rc @ rc
            if cc <= cost:
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
            if lam > 1e12:
                return theta, it, bool(np.linalg.norm(jtr) < 1e-9)
        theta, p, b, r, cost = cand, pc, bc, rc, cc
        if np.linalg.norm(step) < tol:
            return theta, it, True
    return theta, max_iter, False


def linear_init(prs: PseudoRangeSet, dims: int, z_fixed: float) -> np.ndarray | None:
    """Closed-form start from the squared range equations.

    Expanding (rho_i - beta)^2 = |U_i - P|^2 gives equations linear in P,
    beta and w = |P|^2 - beta^2; least squares ignoring the tie between w
    and the others. Returns None when there are too few anchors.
    """
    u, rho = prs.anchors, prs.ranges
    if dims == 3:
        a = np.column_stack([-2 * u, 2 * rho, np.ones(len(u))])
        rhs = rho ** 2 - np.sum(u ** 2, axis=1)
    else:
        a = np.column_stack([-2 * u[:, :2], 2 * rho, np.ones(len(u))])
        rhs = rho ** 2 - np.sum(u ** 2, axis=1) + 2 * u[:, 2] * z_fixed
    if len(u) < a.shape[1]:
        return None
    sol = np.linalg.lstsq(a, rhs, rcond=None)[0]
    return sol[:dims] if np.all(np.isfinite(sol)) else None


def _starts(prs, dims, z_fixed, init) -> list[np.ndarray]:
    if init is not None:
        return [np.asarray(init, float).reshape(-1)[:dims]]
    centre = prs.anchors.mean(axis=0)[:dims]
    starts = [centre]
    lin = linear_init(prs, dims, z_fixed)
    if lin is not None:
        starts.insert(0, lin)
    # mirror points across the anchor spread catch the usual wrong basin
    spread = prs.anchors[:, :dims].std(axis=0)
    for k in range(dims):
        for sgn in (-1, 1):
            e = np.zeros(dims)
            e[k] = sgn * max(spread[k], 1.0)
            starts.append(centre + e)
    return starts


def _solve(prs, dims, init, z_fixed, max_iter, tol):
    best = None
    for start in _starts(prs, dims, z_fixed, init):
        theta, iters, ok = _lm(prs, np.append(start, 0.0), dims, z_fixed, max_iter, tol)
        p, b = _unpack(theta, dims, z_fixed)
        cost = float(np.sum(residuals(prs, p, b) ** 2))
        if best is None or cost < best[0]:
            best = (cost, theta, iters, ok)
        if cost < 1e-20:
            break
    _, theta, iters, ok = best
    p, b = _unpack(theta, dims, z_fixed)
    if np.linalg.cond(jacobian(prs, p, dims)) > COND_LIMIT:
        raise DegenerateGeometryError("Jacobian is ill-conditioned at the solution")
    r = residuals(prs, p, b)
    return PositionFix(p, float(b), float(np.sqrt(np.mean(r ** 2))), iters, ok and bool(np.all(np.isfinite(r))),
                       list(prs.ids))


def trilaterate(prs: PseudoRangeSet, dims: int = 3, init=None, z_fixed: float | None = None,
                reject_outliers: bool = True, max_iter: int = 100, tol: float = 1e-9) -> PositionFix:
    """Levenberg-Marquardt fit of position and clock term.

    In 2D the receiver height is held at ``z_fixed`` (default: mean anchor
    height). Without ``init`` several starts are tried (a closed-form
    linear estimate, the anchor centroid and points around it) and the
    lowest-cost fit wins. With ``reject_outliers`` one pass drops entries whose residual
    exceeds three times the median (and ``OUTLIER_FLOOR``) and refits.
    """
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    if len(prs) < dims + 1:
        raise InsufficientAnchorsError(f"{len(prs)} anchors; {dims}D needs at least {dims + 1}")
    check_geometry(prs.anchors, dims)
    if z_fixed is None:
        z_fixed = float(prs.anchors[:, 2].mean())
    fix = _solve(prs, dims, init, z_fixed, max_iter, tol)
    if not reject_outliers or len(prs) <= dims + 1:
        return fix
    r = np.abs(residuals(prs, fix.position, fix.clock_term))
    bad = r > max(3 * np.median(r), OUTLIER_FLOOR)
    # an exactly determined remainder always fits, so it cannot confirm the drop
    if not bad.any() or len(prs) - bad.sum() < dims + 2:
        return fix
    keep = ~bad
    try:
        check_geometry(prs.anchors[keep], dims)
    except DegenerateGeometryError:
        return fix
    refit = _solve(prs.subset(keep), dims, fix.position, z_fixed, max_iter, tol)
    refit.dropped_ids = [i for i, k in zip(prs.ids, keep) if not k]
    return refit


def write_fixes_csv(path, fixes) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {FIXES_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(FIX_COLUMNS)
        for f in fixes:
            x, y, z = f.position
            w.writerow([f"{x:.6f}", f"{y:.6f}", f"{z:.6f}", f"{f.clock_term:.6f}",
                        f"{f.residual_rms:.6f}", int(f.converged)])
