"""Application-layer analytics: balance tests, plot data, variance splits,
counterfactual paths.

These consume the same unit/subunit records as the estimators and emit plain
data (bin tables, coefficient pairs, report objects) for external tooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .design import DesignConfig, SubunitRecord, UnitRecord, unit_exposures
from .errors import ConfigurationError, EstimationError
from .estimators import INTERCEPT, _control_columns, _sorted_units
from .regress import RegressionProblem, wls_fit

Z_CRITICAL_5PCT = float(stats.norm.ppf(0.975))


@dataclass
class CovariateRow:
    coefficient: float
    robust_se: float
    significant: bool


@dataclass
class BalanceReport:
    covariates: Dict[str, CovariateRow]
    n_significant: int
    partial_r2: float
    partial_f: float
    partial_f_pvalue: float
    control_set: str
    n_obs: int
    n_dropped: int
    dropped_columns: List[str] = field(default_factory=list)


def balance_test(
    units: Sequence[UnitRecord],
    subunits: Sequence[SubunitRecord],
    config: DesignConfig,
    target: str = "instrument",
    covariates: Optional[Sequence[str]] = None,
    classical_f: bool = False,
) -> BalanceReport:
    """Regress the treatment or the instrument on unit covariates.

    Analysis-weighted WLS of the target on the covariates, the configured
    aggregated controls, and an intercept. Units missing any requested
    covariate are dropped (count reported). The partial R^2 is the share of
    the controls-only residual sum of squares explained by adding the
    covariates; the partial F is the robust Wald statistic for their joint
    nullity divided by their count, with a chi-square tail p-value
    (``classical_f=True`` switches to the RSS-based F with an F tail).
    """
    if target not in ("treatment", "instrument"):
        raise ConfigurationError("target must be 'treatment' or 'instrument'")
    order = _sorted_units(units)
    if covariates is None:
        covariates = sorted({k for u in order for k in u.extra_controls})
    covariates = list(covariates)
    if not covariates:
        raise ConfigurationError("no covariates to test")

    keep = [
        u
        for u in order
        if all(lab in u.extra_controls and np.isfinite(u.extra_controls[lab]) for lab in covariates)
    ]
    n_dropped = len(order) - len(keep)
    if len(keep) < len(covariates) + 2:
        raise EstimationError("too few complete observations for the balance test")

    keep_ids = {u.unit_id for u in keep}
    subunits = [s for s in subunits if s.unit_id in keep_ids]
    exp = unit_exposures(keep, subunits, config)
    y = exp.treatment if target == "treatment" else exp.instrument
    w = np.array([u.analysis_weight for u in keep])
    cov_mat = np.column_stack(
        [[float(u.extra_controls[lab]) for u in keep] for lab in covariates]
    )
    ctrl_labels, ctrl = _control_columns(config, exp.controls)
    ones = np.ones(len(keep))

    full = wls_fit(
        RegressionProblem(
            response=y,
            regressors=np.column_stack([cov_mat, ctrl, ones]),
            labels=covariates + ctrl_labels + [INTERCEPT],
            weights=w,
        )
    )
    controls_only = wls_fit(
        RegressionProblem(
            response=y,
            regressors=np.column_stack([ctrl, ones]),
            labels=ctrl_labels + [INTERCEPT],
            weights=w,
        )
    )
    rss_restricted = controls_only.weighted_rss
    partial_r2 = (
        (rss_restricted - full.weighted_rss) / rss_restricted if rss_restricted > 0 else 0.0
    )

    kept_covs = [lab for lab in covariates if lab in full.kept_labels]
    k = len(kept_covs)
    if k == 0:
        partial_f = 0.0
        pvalue = 1.0
    elif classical_f:
        partial_f = ((rss_restricted - full.weighted_rss) / k) / (
            full.weighted_rss / full.dof
        )
        pvalue = float(stats.f.sf(partial_f, k, full.dof))
    else:
        idx = [full.kept_labels.index(lab) for lab in kept_covs]
        b = np.array([full.coefficients[lab] for lab in kept_covs])
        V = full.robust_cov[np.ix_(idx, idx)]
        try:
            wald = float(b @ np.linalg.solve(V, b))
        except np.linalg.LinAlgError:
            wald = float(b @ np.linalg.pinv(V) @ b)
        partial_f = wald / k
        pvalue = float(stats.chi2.sf(wald, k))

    rows: Dict[str, CovariateRow] = {}
    n_significant = 0
    for lab in covariates:
        coef = full.coefficients.get(lab, float("nan"))
        se = full.robust_se.get(lab, float("nan"))
        sig = bool(np.isfinite(coef) and np.isfinite(se) and se > 0 and abs(coef / se) > Z_CRITICAL_5PCT)
        n_significant += int(sig)
        rows[lab] = CovariateRow(coefficient=coef, robust_se=se, significant=sig)
    return BalanceReport(
        covariates=rows,
        n_significant=n_significant,
        partial_r2=float(partial_r2),
        partial_f=float(partial_f),
        partial_f_pvalue=pvalue,
        control_set=config.control_set,
        n_obs=full.n_obs,
        n_dropped=n_dropped,
        dropped_columns=[lab for lab in full.dropped_columns if lab in covariates],
    )


@dataclass
class RdPlotBin:
    side: str  # "left" or "right"
    running: float
    value: float
    weight: float
    n_obs: int


@dataclass
class RdPlotData:
    bins: List[RdPlotBin]
    left_line: Tuple[float, float]  # intercept, slope at r < 0
    right_line: Tuple[float, float]  # intercept, slope at r >= 0
    jump: float
    notices: List[str] = field(default_factory=list)


def points_from_stack(rows, value: str = "outcome") -> List[Tuple[float, float, float, str]]:
    """(running, value, weight, id) tuples from stacked rows.

    ``value`` picks the plotted column: 'outcome', 'treatment', or
    'instrument'. Row weight is importance times kernel weight.
    """
    if value not in ("outcome", "treatment", "instrument"):
        raise ConfigurationError("value must be outcome, treatment, or instrument")
    return [
        (row.q[1], getattr(row, value), row.weight * row.kernel_weight, row.subunit_id)
        for row in rows
    ]


def _greedy_bins(order: np.ndarray, weights: np.ndarray, n_bins: int) -> np.ndarray:
    """Assign sorted points to bins, cutting at cumulative-weight targets."""
    total = float(weights[order].sum())
    target = total / n_bins
    assignment = np.empty(len(order), dtype=np.intp)
    cum = 0.0
    b = 0
    for pos, idx in enumerate(order):
        assignment[pos] = b
        cum += float(weights[idx])
        if b < n_bins - 1 and cum >= (b + 1) * target:
            b += 1
    return assignment


def rd_plot_data(
    points: Sequence,
    n_bins_per_side: int = 20,
    cutoff_rule: str = "geq",
) -> RdPlotData:
    """Weight-balanced binned means plus local-linear lines on each side.

    ``points`` holds (running, value, weight) or (running, value, weight, id)
    tuples. Per side, points are sorted by running value (ties by id) and
    grouped into contiguous bins with near-equal weight sums; each bin
    reports its weight-averaged running value and outcome. If a side has
    fewer points than bins, that side's bin count shrinks (with a notice).
    """
    if n_bins_per_side < 1:
        raise ConfigurationError("n_bins_per_side must be positive")
    parsed = []
    for p in points:
        if len(p) == 3:
            r, v, w = p
            pid = ""
        else:
            r, v, w, pid = p
        parsed.append((float(r), float(v), float(w), str(pid)))
    if not parsed:
        raise EstimationError("no points to bin")
    r = np.array([p[0] for p in parsed])
    v = np.array([p[1] for p in parsed])
    w = np.array([p[2] for p in parsed])
    ids = [p[3] for p in parsed]
    if cutoff_rule == "geq":
        right = r >= 0.0
    else:
        right = r > 0.0
    if not right.any() or right.all():
        raise EstimationError("need observations on both sides of the cutoff")

    notices: List[str] = []
    bins: List[RdPlotBin] = []
    for side, mask in (("left", ~right), ("right", right)):
        idx = np.flatnonzero(mask)
        order = idx[np.lexsort(([ids[i] for i in idx], r[idx]))]
        n_bins = min(n_bins_per_side, len(order))
        if n_bins < n_bins_per_side:
            notices.append(
                f"{side} side has {len(order)} observations; using {n_bins} bins"
            )
        assignment = _greedy_bins(order, w, n_bins)
        for b in range(n_bins):
            members = order[assignment == b]
            ww = w[members]
            wsum = float(ww.sum())
            scale = wsum if wsum > 0 else float(len(members))
            r_mean = float((r[members] * ww).sum() / scale) if wsum > 0 else float(r[members].mean())
            v_mean = float((v[members] * ww).sum() / scale) if wsum > 0 else float(v[members].mean())
            bins.append(RdPlotBin(side, r_mean, v_mean, wsum, len(members)))

    z = right.astype(np.float64)
    fit = wls_fit(
        RegressionProblem(
            response=v,
            regressors=np.column_stack([np.ones(len(r)), r, r * z, z]),
            labels=[INTERCEPT, "running", "running_pos", "crossing"],
            weights=w,
        )
    )
    b0 = fit.coefficients.get(INTERCEPT, float("nan"))
    b_r = fit.coefficients.get("running", float("nan"))
    b_rp = fit.coefficients.get("running_pos", 0.0)
    b_z = fit.coefficients.get("crossing", float("nan"))
    if not np.isfinite(b_rp):
        b_rp = 0.0
    return RdPlotData(
        bins=bins,
        left_line=(b0, b_r),
        right_line=(b0 + b_z, b_r + b_rp),
        jump=b_z,
        notices=notices,
    )


@dataclass
class VarianceDecomposition:
    total: float
    within: float
    between: float


def variance_decomposition(records: Sequence[Tuple]) -> VarianceDecomposition:
    """Split the weighted variance of micro records into cell components.

    ``records`` holds (cell_key, value, weight) triples. Within is the
    weighted mean of within-cell variances, between the weighted variance of
    cell means; the two add up to the total exactly (population weighting,
    no small-sample correction).
    """
    if not records:
        raise ConfigurationError("variance_decomposition requires at least one record")
    cells = [str(c) for c, _, _ in records]
    v = np.array([float(x) for _, x, _ in records])
    w = np.array([float(x) for _, _, x in records])
    if np.any(w < 0):
        raise ConfigurationError("weights must be nonnegative")
    total_w = float(w.sum())
    if total_w <= 0:
        raise ConfigurationError("total weight must be positive")
    grand = float((v * w).sum() / total_w)
    total = float((w * (v - grand) ** 2).sum() / total_w)

    codes_map: Dict[str, int] = {}
    codes = np.array([codes_map.setdefault(c, len(codes_map)) for c in cells])
    n_cells = len(codes_map)
    wsum = np.bincount(codes, weights=w, minlength=n_cells)
    vsum = np.bincount(codes, weights=w * v, minlength=n_cells)
    means = vsum / np.where(wsum > 0, wsum, 1.0)
    within = float((w * (v - means[codes]) ** 2).sum() / total_w)
    between = float((wsum * (means - grand) ** 2).sum() / total_w)
    return VarianceDecomposition(total=total, within=within, between=between)


@dataclass
class CounterfactualPath:
    actual: List[float]
    counterfactual: List[float]
    ci_lo: List[float]
    ci_hi: List[float]
    cumulative_shortfall: List[float]
    beta: float
    beta_ci: Tuple[float, float]
    contribution: Optional[float]
    contribution_ci: Optional[Tuple[float, float]]
    notes: List[str] = field(default_factory=list)


def counterfactual_path(
    actual: Sequence[float],
    shortfall: Sequence[float],
    beta: float,
    beta_ci: Tuple[float, float],
    cumulative: bool = True,
) -> CounterfactualPath:
    """Actual series plus effect times cumulative treatment shortfall.

    CF_t = actual_t + beta * cumulative_shortfall_t, an exact identity.
    Interval endpoints re-run the identity at the interval endpoints of beta.
    The headline share is one minus the counterfactual change divided by the
    actual change over the full series; a zero actual change leaves it
    undefined (reported as None with a note).
    """
    a = np.array([float(x) for x in actual])
    s = np.array([float(x) for x in shortfall])
    if a.shape != s.shape:
        raise ConfigurationError("actual and shortfall series must have equal length")
    if a.size == 0:
        raise ConfigurationError("empty series")
    cum = s if cumulative else np.cumsum(s)
    cf = a + beta * cum
    lo_path = a + beta_ci[0] * cum
    hi_path = a + beta_ci[1] * cum
    ci_lo = np.minimum(lo_path, hi_path)
    ci_hi = np.maximum(lo_path, hi_path)

    notes: List[str] = []
    actual_change = a[-1] - a[0]
    if actual_change == 0:
        contribution = None
        contribution_ci = None
        notes.append("actual change over the series is zero; contribution undefined")
    else:
        contribution = float(1.0 - (cf[-1] - a[0]) / actual_change)
        ends = [
            1.0 - (lo_path[-1] - a[0]) / actual_change,
            1.0 - (hi_path[-1] - a[0]) / actual_change,
        ]
        contribution_ci = (float(min(ends)), float(max(ends)))
    return CounterfactualPath(
        actual=a.tolist(),
        counterfactual=cf.tolist(),
        ci_lo=ci_lo.tolist(),
        ci_hi=ci_hi.tolist(),
        cumulative_shortfall=cum.tolist(),
        beta=float(beta),
        beta_ci=(float(beta_ci[0]), float(beta_ci[1])),
        contribution=contribution,
        contribution_ci=contribution_ci,
        notes=notes,
    )
