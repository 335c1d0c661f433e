"""Fly-by initialization of stationary anchors from meshed ranges.

Pipeline per unknown anchor:

1. pair selection and a linear least-squares solve for position and per-reference
   constant biases from differences of squared ranges,
2. Levenberg-Marquardt refinement of position, constant and scale biases,
3. optionally RANSAC around step 1 to reject outliers before refining.

Reference devices whose position barely changes over the collection window
(known anchors) contribute no rows to step 1: with a fixed reference every
squared-range difference vanishes. Their constant bias is recovered once the
anchor position is known, with the scale bias held at one.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import ContractError

log = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    pass


class UnobservableGeometryError(CalibrationError):
    def __init__(self, message: str, null_direction: np.ndarray | None = None) -> None:
        super().__init__(message)
        self.null_direction = null_direction


class DegenerateRefinementError(CalibrationError):
    pass


class InsufficientInliersError(CalibrationError):
    pass


@dataclass(frozen=True)
class CalibrationSample:
    t: float
    reference_id: int
    reference_position: np.ndarray
    z: float
    sigma_p: float = 0.0
    sigma_d: float = 0.1

    def __post_init__(self) -> None:
        p = np.asarray(self.reference_position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ContractError("reference position must be finite")
        if not self.z > 0.0:
            raise ContractError("range must be positive")
        object.__setattr__(self, "reference_position", p)


@dataclass
class CalibrationProblem:
    """Samples for one unknown anchor, grouped by reference device."""

    anchor_id: int
    samples: list[CalibrationSample]
    min_samples_per_group: int = 2
    min_spread: float = 0.5  # m; below this a reference counts as static

    def __post_init__(self) -> None:
        self.samples = sorted(self.samples, key=lambda s: (s.t, s.reference_id))
        self.t = np.array([s.t for s in self.samples], dtype=float)
        self.refs = np.array([s.reference_position for s in self.samples], dtype=float).reshape(-1, 3)
        self.z = np.array([s.z for s in self.samples], dtype=float)
        self.ref_ids = np.array([s.reference_id for s in self.samples], dtype=np.int64)
        self.mobile_groups: list[int] = []
        self.static_groups: list[int] = []
        for rid in sorted(set(self.ref_ids.tolist())):
            mask = self.ref_ids == rid
            if mask.sum() < self.min_samples_per_group:
                continue
            pts = self.refs[mask]
            spread = np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1))
            (self.mobile_groups if spread >= self.min_spread else self.static_groups).append(rid)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_groups(self) -> int:
        return len(self.mobile_groups)

    @property
    def n_unknowns(self) -> int:
        """Unknowns of the linear system: position plus one bias per mobile group."""
        return 3 + self.n_groups

    def group_index(self, idx: np.ndarray | None = None) -> np.ndarray:
        """Mobile group index per sample, ``-1`` for samples outside mobile groups."""
        lut = {rid: g for g, rid in enumerate(self.mobile_groups)}
        ids = self.ref_ids if idx is None else self.ref_ids[idx]
        return np.array([lut.get(int(r), -1) for r in ids], dtype=np.int64)


@dataclass
class LinearSolution:
    position: np.ndarray
    gamma: np.ndarray  # per mobile group
    singular_values: np.ndarray
    n_rows: int

    @property
    def condition_number(self) -> float:
        return float(self.singular_values[0] / self.singular_values[-1])


@dataclass
class CalibrationResult:
    anchor_id: int
    position: np.ndarray
    gamma: dict[int, float]
    beta: dict[int, float]
    covariance: np.ndarray  # over [p, gamma_mobile, beta_mobile]
    inlier_mask: np.ndarray
    residual_rms: float
    mobile_groups: list[int] = field(default_factory=list)
    converged: bool = True
    iterations: int = 0
    cost_history: list[float] = field(default_factory=list)

    @property
    def position_covariance(self) -> np.ndarray:
        return self.covariance[:3, :3]

    @property
    def inlier_count(self) -> int:
        return int(np.count_nonzero(self.inlier_mask))

    def biases(self) -> dict[int, tuple[float, float]]:
        return {rid: (self.gamma[rid], self.beta[rid]) for rid in self.gamma}


# ---------------------------------------------------------------------------
# pair selection


def select_optimal_pairs(positions: np.ndarray, times: np.ndarray | None = None) -> np.ndarray:
    """Greedy disjoint pairing by decreasing reference separation.

    Returns an ``(k, 2)`` index array into ``positions``. Ties are broken by
    the earlier timestamps.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = positions.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    times = np.arange(n, dtype=float) if times is None else np.asarray(times, dtype=float)
    ii, jj = np.triu_indices(n, k=1)
    # order each candidate so the earlier sample comes first
    swap = times[jj] < times[ii]
    ii, jj = np.where(swap, jj, ii), np.where(swap, ii, jj)
    diff = positions[ii] - positions[jj]
    dist = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((times[jj], times[ii], -dist))
    return kernels.greedy_pairs(ii[order], jj[order], n)


# ---------------------------------------------------------------------------
# linear solve


def _build_rows(problem: CalibrationProblem, idx: np.ndarray, groups: list[int]):
    rows_A, rows_b = [], []
    G = len(groups)
    for g, rid in enumerate(groups):
        sel = idx[problem.ref_ids[idx] == rid]
        if sel.size < 2:
            continue
        pairs = select_optimal_pairs(problem.refs[sel], problem.t[sel])
        if pairs.size == 0:
            continue
        i1, i2 = sel[pairs[:, 0]], sel[pairs[:, 1]]
        p1, p2 = problem.refs[i1], problem.refs[i2]
        z1, z2 = problem.z[i1], problem.z[i2]
        A = np.zeros((len(i1), 3 + G))
        A[:, 0:3] = -2.0 * (p1 - p2)
        A[:, 3 + g] = 2.0 * (z1 - z2)
        b = z1 * z1 - z2 * z2 - np.einsum("ij,ij->i", p1, p1) + np.einsum("ij,ij->i", p2, p2)
        rows_A.append(A)
        rows_b.append(b)
    if not rows_A:
        return np.zeros((0, 3 + G)), np.zeros(0)
    return np.vstack(rows_A), np.concatenate(rows_b)


def solve_linear(
    problem: CalibrationProblem,
    idx: np.ndarray | None = None,
    rcond_gate: float = 1e-6,
) -> LinearSolution:
    """Position and per-group constant biases from squared-range differences."""
    idx = np.arange(len(problem)) if idx is None else np.asarray(idx, dtype=np.int64)
    groups = problem.mobile_groups
    if not groups:
        raise UnobservableGeometryError("no reference device moved during collection")
    A, b = _build_rows(problem, idx, groups)
    n_unknowns = 3 + len(groups)
    if A.shape[0] < n_unknowns:
        raise UnobservableGeometryError(
            f"{A.shape[0]} rows for {n_unknowns} unknowns"
        )
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[-1] <= rcond_gate * s[0]:
        raise UnobservableGeometryError(
            f"rank-deficient geometry (sigma_min/sigma_max = {s[-1] / s[0]:.3g})",
            null_direction=Vt[-1],
        )
    x = Vt.T @ ((U.T @ b) / s)
    return LinearSolution(x[:3].copy(), x[3:].copy(), s, A.shape[0])


def static_group_biases(
    problem: CalibrationProblem,
    position: np.ndarray,
    idx: np.ndarray | None = None,
    robust: bool = False,
) -> dict[int, float]:
    idx = np.arange(len(problem)) if idx is None else np.asarray(idx, dtype=np.int64)
    out = {}
    for rid in problem.static_groups:
        sel = idx[problem.ref_ids[idx] == rid]
        if sel.size == 0:
            continue
        e = problem.z[sel] - np.linalg.norm(problem.refs[sel] - position, axis=1)
        out[rid] = float(np.median(e) if robust else np.mean(e))
    return out


# ---------------------------------------------------------------------------
# nonlinear refinement


@dataclass
class LMOptions:
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_iterations: int = 100
    rel_tol: float = 1e-9
    abs_tol: float = 1e-24
    max_condition: float = 1e13


def refine_nonlinear(
    problem: CalibrationProblem,
    initial_position: np.ndarray,
    initial_gamma: np.ndarray,
    idx: np.ndarray | None = None,
    options: LMOptions | None = None,
    initial_beta: np.ndarray | None = None,
) -> CalibrationResult:
    """Levenberg-Marquardt over ``[p, gamma, beta]`` for the mobile groups.

    Scale biases start at one unless ``initial_beta`` is given.
    """
    opts = options or LMOptions()
    idx = np.arange(len(problem)) if idx is None else np.asarray(idx, dtype=np.int64)
    groups = problem.mobile_groups
    G = len(groups)
    gidx = problem.group_index(idx)
    keep = gidx >= 0
    sel, gsel = idx[keep], gidx[keep]
    refs, z = problem.refs[sel], problem.z[sel]
    n_par = 3 + 2 * G
    if sel.size < n_par:
        raise DegenerateRefinementError(f"{sel.size} samples for {n_par} parameters")
    beta0 = np.ones(G) if initial_beta is None else np.asarray(initial_beta, float)
    x = np.concatenate(
        [np.asarray(initial_position, float).reshape(3), np.asarray(initial_gamma, float), beta0]
    )
    if not np.all(np.isfinite(x)):
        raise ContractError("initial guess must be finite")

    def evaluate(params):
        return kernels.range_model(refs, gsel, z, params[:3], params[3:3 + G], params[3 + G:])

    r, J = evaluate(x)
    cost = 0.5 * float(r @ r)
    costs = [cost]
    lam = opts.lambda_init
    converged = cost <= opts.abs_tol
    it = 0
    while not converged and it < opts.max_iterations:
        it += 1
        JtJ = J.T @ J
        if np.linalg.cond(JtJ) > opts.max_condition:
            raise DegenerateRefinementError("normal matrix is singular")
        g = J.T @ r
        D = np.diag(np.diag(JtJ))
        accepted = False
        while lam < 1e16:
            step = np.linalg.solve(JtJ + lam * D, g)
            x_new = x + step
            if np.all(x_new[3 + G:] > 0.0):
                r_new, J_new = evaluate(x_new)
                cost_new = 0.5 * float(r_new @ r_new)
                if cost_new <= cost:
                    accepted = True
                    break
            lam *= opts.lambda_up
        if not accepted:
            converged = True  # no descent direction left at machine precision
            break
        rel = (cost - cost_new) / cost if cost > 0.0 else 0.0
        x, r, J, cost = x_new, r_new, J_new, cost_new
        costs.append(cost)
        lam = max(lam / opts.lambda_down, 1e-12)
        if rel < opts.rel_tol or cost <= opts.abs_tol:
            converged = True
    if not converged:
        log.warning("LM did not converge for anchor %d after %d iterations", problem.anchor_id, it)

    JtJ = J.T @ J
    if np.linalg.cond(JtJ) > opts.max_condition:
        raise DegenerateRefinementError("normal matrix is singular at the solution")
    sigma2 = float(r @ r) / r.size
    cov = sigma2 * np.linalg.inv(JtJ)
    cov = 0.5 * (cov + cov.T)

    p = x[:3].copy()
    gamma = {rid: float(x[3 + g]) for g, rid in enumerate(groups)}
    beta = {rid: float(x[3 + G + g]) for g, rid in enumerate(groups)}
    for rid, gs in static_group_biases(problem, p, idx).items():
        gamma[rid] = gs
        beta[rid] = 1.0
    mask = np.zeros(len(problem), dtype=bool)
    mask[idx] = True
    return CalibrationResult(
        anchor_id=problem.anchor_id,
        position=p,
        gamma=gamma,
        beta=beta,
        covariance=cov,
        inlier_mask=mask,
        residual_rms=math.sqrt(sigma2),
        mobile_groups=list(groups),
        converged=converged,
        iterations=it,
        cost_history=costs,
    )


def sample_residuals(problem: CalibrationProblem, result: CalibrationResult) -> np.ndarray:
    """``z - (beta d + gamma)`` for every sample; NaN where the group has no estimate."""
    d = np.linalg.norm(problem.refs - result.position, axis=1)
    gamma = np.array([result.gamma.get(int(r), np.nan) for r in problem.ref_ids])
    beta = np.array([result.beta.get(int(r), np.nan) for r in problem.ref_ids])
    return problem.z - (beta * d + gamma)


def calibrate(problem: CalibrationProblem, options: LMOptions | None = None) -> CalibrationResult:
    """Linear initialization followed by nonlinear refinement on all samples."""
    lin = solve_linear(problem)
    return refine_nonlinear(problem, lin.position, lin.gamma, options=options)


# ---------------------------------------------------------------------------
# RANSAC


def ransac_rows(n_groups: int) -> int:
    """Rows drawn per RANSAC hypothesis: unknown count plus a margin of two."""
    return 3 + n_groups + 2


def ransac_iterations(eps: float, success_prob: float, sample_size: int) -> int:
    if not 0.0 <= eps < 1.0:
        raise ContractError("expected outlier fraction must lie in [0, 1)")
    if not 0.0 < success_prob < 1.0:
        raise ContractError("success probability must lie in (0, 1)")
    p_clean = (1.0 - eps) ** sample_size
    if p_clean >= 1.0:
        return 1
    return max(1, math.ceil(math.log(1.0 - success_prob) / math.log(1.0 - p_clean)))


def _draw_hypothesis(problem: CalibrationProblem, rng: np.random.Generator, n_rows: int) -> np.ndarray:
    groups = problem.mobile_groups
    members = [np.flatnonzero(problem.ref_ids == rid) for rid in groups]
    caps = np.array([m.size // 2 for m in members])
    # two rows per group pin its bias down when the budget allows, else one
    base = 2 if 2 * len(groups) <= n_rows else 1
    rows = np.minimum(base, caps)
    extra = n_rows - rows.sum()
    weights = caps - rows
    while extra > 0 and weights.sum() > 0:
        g = rng.choice(len(groups), p=weights / weights.sum())
        rows[g] += 1
        weights[g] -= 1
        extra -= 1
    picks = [rng.choice(m, size=2 * k, replace=False) for m, k in zip(members, rows) if k > 0]
    return np.sort(np.concatenate(picks)) if picks else np.zeros(0, dtype=np.int64)


def _hypothesis_result(problem: CalibrationProblem, sol: LinearSolution) -> CalibrationResult:
    """Wrap a linear hypothesis (scale biases one) so it can be scored like a refined result."""
    groups = problem.mobile_groups
    gamma = dict(zip(groups, (float(g) for g in sol.gamma)))
    beta = {rid: 1.0 for rid in groups}
    for rid, g0 in static_group_biases(problem, sol.position, robust=True).items():
        gamma[rid] = g0
        beta[rid] = 1.0
    n = len(groups)
    return CalibrationResult(problem.anchor_id, sol.position.copy(), gamma, beta,
                             np.full((3 + 2 * n, 3 + 2 * n), np.nan), np.zeros(len(problem), dtype=bool),
                             math.nan, list(groups))


def ransac_calibrate(
    problem: CalibrationProblem,
    eps_expected: float = 0.1,
    success_prob: float = 0.99,
    sigma_d: float = 0.1,
    sigma_p: float = 0.1,
    rng: np.random.Generator | int | None = None,
    options: LMOptions | None = None,
    max_iterations: int = 10_000,
    max_refits: int = 10,
    min_iterations: int = 200,
    robust_scale: float | None = 3.0,
) -> CalibrationResult:
    """Robust calibration: best-cost linear hypothesis, threshold, refit inliers.

    Small linear hypotheses are noisy, so the inlier set is re-classified
    against each refined model and refit until it no longer changes (at most
    ``max_refits`` rounds). The inlier threshold is ``sigma_d + sigma_p``,
    widened to ``robust_scale`` robust standard deviations (scaled median
    absolute residual) of the current model when that is larger; ``None``
    keeps the fixed threshold. The textbook iteration count assumes every
    outlier-free draw yields a usable model, which noisy minimal sets do not;
    ``min_iterations`` sets a floor.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    G = problem.n_groups
    if G == 0:
        raise UnobservableGeometryError("no reference device moved during collection")
    n_rows = ransac_rows(G)
    m = 2 * n_rows
    if len(problem) <= m:
        raise InsufficientInliersError(f"{len(problem)} samples, need more than {m}")
    n_iter = min(max_iterations, max(min_iterations, ransac_iterations(eps_expected, success_prob, m)))
    gidx = problem.group_index()
    mobile = gidx >= 0
    refs, z = problem.refs[mobile], problem.z[mobile]
    gm = gidx[mobile]

    best = None
    best_cost = math.inf
    for _ in range(n_iter):
        idx = _draw_hypothesis(problem, rng, n_rows)
        try:
            sol = solve_linear(problem, idx)
        except UnobservableGeometryError:
            continue
        r = kernels.range_residuals(refs, gm, z, sol.position, sol.gamma, np.ones(G))
        cost = float(r @ r)
        if cost < best_cost:
            best, best_cost = sol, cost
    if best is None:
        raise InsufficientInliersError("no observable hypothesis drawn")

    d_thres = sigma_d + sigma_p

    def classify(model: CalibrationResult) -> np.ndarray:
        r = np.abs(np.nan_to_num(sample_residuals(problem, model), nan=np.inf))
        thr = d_thres
        if robust_scale is not None:
            thr = max(thr, robust_scale * 1.4826 * float(np.median(r)))
        return r <= thr

    inliers = classify(_hypothesis_result(problem, best))
    if inliers.sum() < m:
        raise InsufficientInliersError(f"{int(inliers.sum())} inliers, need {m}")
    idx = np.flatnonzero(inliers)
    lin = solve_linear(problem, idx)
    result = refine_nonlinear(problem, lin.position, lin.gamma, idx=idx, options=options)
    for _ in range(max_refits):
        new = classify(result)
        if np.array_equal(new, inliers) or new.sum() < m:
            break
        inliers = new
        gam = np.array([result.gamma[rid] for rid in problem.mobile_groups])
        bet = np.array([result.beta[rid] for rid in problem.mobile_groups])
        result = refine_nonlinear(problem, result.position, gam, idx=np.flatnonzero(inliers),
                                  options=options, initial_beta=bet)
    result.inlier_mask = inliers
    return result


def bias_count_bound(n_devices: int) -> int:
    """Upper bound on distinct pairwise biases among ``n_devices`` nodes."""
    return n_devices * (n_devices - 1) // 2
