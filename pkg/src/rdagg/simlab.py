"""Monte Carlo laboratory: generators, replication sweeps, and the estimand oracle.

Running variables are drawn as r_j = rho * zeta_i(j) + sqrt(1 - rho^2) * xi_j
with zeta and xi i.i.d. standard normal, so within-unit correlation is rho^2
and the marginal of r is standard normal. Aggregated treatment is the
importance-weighted share of subunits strictly above the cutoff. Outcome
generators cover a linear confound, a symmetric quadratic, a kinked
quadratic, a single-subunit confound, and heterogeneous linear effects with
known potential outcomes for the oracle.

Reproducibility: every stream comes from SeedSequence(seed, spawn_key=...),
so datasets depend only on (seed, replication_index) and summaries do not
depend on scheduling or thread count.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .design import DesignConfig, SubunitRecord, UnitRecord
from .errors import ConfigurationError, EstimationError
from .estimators import estimate_lower, estimate_upper

IMPORTANCE_SCHEMES = ("equal", "dirichlet_random", "unit_sum_one")
OUTCOME_KINDS = (
    "linear",
    "symmetric_quadratic",
    "kinked_quadratic",
    "single_subunit",
    "heterogeneous_effects",
)
MC_ESTIMATORS = ("upper", "lower", "benchmark")

# 0.25, 0.35, ..., 1.25
DEFAULT_H_GRID = tuple(k / 100 for k in range(25, 126, 10))

# Shape of the localized confound in the heterogeneous-effects generator.
HET_KINK_SCALE = 4.0
HET_KINK_SUPPORT = 0.6


@dataclass(frozen=True)
class DgpSpec:
    """Generator parameters for one simulated design."""

    n_units: int = 1000
    n_subunits_per_unit: int = 5
    j_range: Optional[Tuple[int, int]] = None  # overrides the fixed count when set
    importance_scheme: str = "equal"
    rho: float = 0.5
    outcome_kind: str = "linear"
    noise_sd: float = 0.0
    effect_mean: float = 1.0
    effect_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_units < 1 or self.n_subunits_per_unit < 1:
            raise ConfigurationError("counts must be at least 1")
        if not (0.0 <= self.rho <= 1.0):
            raise ConfigurationError("rho must lie in [0, 1]")
        if self.importance_scheme not in IMPORTANCE_SCHEMES:
            raise ConfigurationError(f"importance_scheme must be one of {IMPORTANCE_SCHEMES}")
        if self.outcome_kind not in OUTCOME_KINDS:
            raise ConfigurationError(f"outcome_kind must be one of {OUTCOME_KINDS}")
        if self.noise_sd < 0:
            raise ConfigurationError("noise_sd must be nonnegative")
        if self.j_range is not None:
            lo, hi = self.j_range
            if lo < 1 or hi < lo:
                raise ConfigurationError("j_range must satisfy 1 <= lo <= hi")


@dataclass
class DgpTruth:
    """Ground truth attached to a generated dataset."""

    true_beta: Optional[float]
    unit_effects: Optional[Dict[str, float]] = None


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def _draw_design(spec: DgpSpec, rng: np.random.Generator):
    """Draw sizes, running variables, and importance weights.

    Returns (counts per unit, unit index per subunit, running values,
    importance weights, unit factors zeta). Draw order is fixed; changing it
    would silently break reproducibility.
    """
    n = spec.n_units
    if spec.j_range is not None:
        counts = rng.integers(spec.j_range[0], spec.j_range[1] + 1, size=n)
    else:
        counts = np.full(n, spec.n_subunits_per_unit, dtype=np.int64)
    total = int(counts.sum())
    unit_idx = np.repeat(np.arange(n), counts)
    zeta = rng.standard_normal(n)
    xi = rng.standard_normal(total)
    r = spec.rho * zeta[unit_idx] + np.sqrt(1.0 - spec.rho**2) * xi
    if spec.importance_scheme == "equal":
        s = 1.0 / counts[unit_idx].astype(np.float64)
    elif spec.importance_scheme == "unit_sum_one":
        s = np.ones(total)
    else:  # dirichlet_random: heterogeneous within unit, summing to one
        s = np.empty(total)
        start = 0
        for c in counts:
            c = int(c)
            s[start : start + c] = rng.dirichlet(np.ones(c))
            start += c
    return counts, unit_idx, r, s, zeta


def _unit_sums(values: np.ndarray, unit_idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    np.add.at(out, unit_idx, values)
    return out


def generate_dgp(
    spec: DgpSpec, replication_index: int = 0
) -> Tuple[List[UnitRecord], List[SubunitRecord], DgpTruth]:
    """One simulated dataset, fully determined by (spec.seed, replication_index)."""
    rng = _rng(spec.seed, 0, replication_index)
    counts, unit_idx, r, s, _zeta = _draw_design(spec, rng)
    n = spec.n_units
    z = (r > 0.0).astype(np.float64)
    x = _unit_sums(s * z, unit_idx, n)

    unit_effects = None
    if spec.outcome_kind == "linear":
        y = _unit_sums(s * r, unit_idx, n)
        truth = 0.0
    elif spec.outcome_kind == "symmetric_quadratic":
        y = _unit_sums(s * r * r, unit_idx, n)
        truth = 0.0
    elif spec.outcome_kind == "kinked_quadratic":
        y = _unit_sums(s * r * r * z, unit_idx, n)
        truth = 0.0
    elif spec.outcome_kind == "single_subunit":
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        picks = offsets + rng.integers(0, counts)
        y = r[picks]
        truth = 0.0
    else:
        # heterogeneous_effects: unit-specific slopes on top of a kinked
        # baseline confound localized near the cutoff (support (0, 0.6],
        # curvature scale 4), so bandwidth bias is visible without flooding
        # small-bandwidth estimates with far-subunit noise.
        beta_i = spec.effect_mean + spec.effect_sd * rng.standard_normal(n)
        g = HET_KINK_SCALE * r * r * z * (r <= HET_KINK_SUPPORT)
        y = _unit_sums(s * g, unit_idx, n) + beta_i * x
        truth = None
        unit_effects = beta_i
    if spec.noise_sd > 0:
        y = y + spec.noise_sd * rng.standard_normal(n)

    width = max(5, len(str(n - 1)))
    unit_ids = [f"u{i:0{width}d}" for i in range(n)]
    units = [UnitRecord(unit_id=unit_ids[i], outcome=float(y[i])) for i in range(n)]
    subunits = []
    pos = 0
    for i in range(n):
        for k in range(int(counts[i])):
            subunits.append(
                SubunitRecord(
                    subunit_id=f"{unit_ids[i]}-s{k}",
                    unit_id=unit_ids[i],
                    running=float(r[pos]),
                    importance=float(s[pos]),
                )
            )
            pos += 1
    effects = (
        {unit_ids[i]: float(unit_effects[i]) for i in range(n)}
        if unit_effects is not None
        else None
    )
    return units, subunits, DgpTruth(true_beta=truth, unit_effects=effects)


def dataset_digest(units: Sequence[UnitRecord], subunits: Sequence[SubunitRecord]) -> str:
    """Stable content hash of a dataset, for common-random-number checks."""
    h = hashlib.sha256()
    for u in sorted(units, key=lambda u: u.unit_id):
        h.update(f"{u.unit_id}|{u.outcome!r}|{u.analysis_weight!r}".encode())
    for s in sorted(subunits, key=lambda s: s.subunit_id):
        h.update(f"{s.subunit_id}|{s.unit_id}|{s.running!r}|{s.importance!r}".encode())
    return h.hexdigest()


def mc_design_config(h: float, control_set: str) -> DesignConfig:
    """Estimation settings used in simulation sweeps (strict cutoff rule)."""
    return DesignConfig(
        bandwidth=h,
        kernel="uniform",
        cutoff_rule="strict_gt",
        tie_policy="keep",
        control_set=control_set,
    )


def _run_estimator(name: str, units, subunits, h: float) -> float:
    if name == "upper":
        return estimate_upper(units, subunits, mc_design_config(h, "all_three_rda")).beta
    if name == "benchmark":
        return estimate_upper(units, subunits, mc_design_config(h, "total_weight_only")).beta
    if name == "lower":
        return estimate_lower(units, subunits, mc_design_config(h, "all_three_rda")).beta
    raise ConfigurationError(f"unknown estimator '{name}' (choose from {MC_ESTIMATORS})")


def bootstrap_median_ci(
    values, n_boot: int = 300, level: float = 0.95, seed: int = 0
) -> Tuple[float, float]:
    """Percentile bootstrap interval for the sample median."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigurationError("bootstrap_median_ci requires a nonempty sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(n_boot, v.size))
    medians = np.median(v[idx], axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(medians, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def _bootstrap_sd_se(values: np.ndarray, n_boot: int, seed: int) -> float:
    if values.size < 2:
        return float("nan")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_boot, values.size))
    sds = np.std(values[idx], axis=1, ddof=1)
    return float(sds.std(ddof=1))


@dataclass
class McCell:
    estimator: str
    h: float
    median_bias: float
    ci_lo: float
    ci_hi: float
    sd: float
    sd_boot_se: float
    n_ok: int
    n_fail: int


@dataclass
class McSummary:
    cells: List[McCell]
    n_replications: int
    estimates: Dict[Tuple[str, float], np.ndarray]
    dataset_digests: List[str] = field(default_factory=list)
    high_failure: bool = False

    def cell(self, estimator: str, h: float) -> McCell:
        for c in self.cells:
            if c.estimator == estimator and c.h == h:
                return c
        raise KeyError((estimator, h))

    def to_csv(self) -> str:
        lines = ["estimator,h,median_bias,ci_lo,ci_hi,sd,n_ok,n_fail"]
        for c in self.cells:
            lines.append(
                f"{c.estimator},{c.h!r},{c.median_bias!r},{c.ci_lo!r},{c.ci_hi!r},"
                f"{c.sd!r},{c.n_ok},{c.n_fail}"
            )
        return "\n".join(lines) + "\n"


def run_monte_carlo(
    spec: DgpSpec,
    estimators: Sequence[str] = MC_ESTIMATORS,
    h_grid: Sequence[float] = DEFAULT_H_GRID,
    n_replications: int = 100,
    n_bootstrap: int = 300,
    seed: int = 0,
    level: float = 0.95,
    threads: int = 1,
    keep_digests: bool = False,
) -> McSummary:
    """Replication sweep over bandwidths with common random numbers.

    Each replication draws one dataset and every (estimator, bandwidth) pair
    is evaluated on that same dataset. Replication failures are recorded, not
    fatal; the summary flags runs where more than 1% of cells failed. The
    true effect must be known (zero for the built-in confound outcomes), so
    heterogeneous-effects specs go through late_gap_check instead.
    """
    if n_replications < 2:
        raise ConfigurationError("n_replications must be at least 2")
    spec = replace(spec, seed=seed)
    probe = generate_dgp(spec, 0)[2]
    if probe.true_beta is None:
        raise ConfigurationError(
            "run_monte_carlo needs a known true effect; use late_gap_check for "
            "heterogeneous-effects specs"
        )
    true_beta = probe.true_beta
    estimators = list(estimators)
    h_grid = [float(h) for h in h_grid]

    def one_replication(rep: int):
        units, subunits, _ = generate_dgp(spec, rep)
        out = {}
        for name in estimators:
            for h in h_grid:
                try:
                    beta = _run_estimator(name, units, subunits, h)
                except Exception:
                    beta = float("nan")
                out[(name, h)] = beta
        digest = dataset_digest(units, subunits) if keep_digests else ""
        return rep, out, digest

    results: List[Optional[dict]] = [None] * n_replications
    digests: List[str] = [""] * n_replications
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for rep, out, digest in pool.map(one_replication, range(n_replications)):
                results[rep] = out
                digests[rep] = digest
    else:
        for rep in range(n_replications):
            rep, out, digest = one_replication(rep)
            results[rep] = out
            digests[rep] = digest

    cells: List[McCell] = []
    estimates: Dict[Tuple[str, float], np.ndarray] = {}
    total_fail = 0
    cell_index = 0
    for name in estimators:
        for h in h_grid:
            vals = np.array([results[rep][(name, h)] for rep in range(n_replications)])
            ok = np.isfinite(vals)
            n_fail = int((~ok).sum())
            total_fail += n_fail
            finite = vals[ok]
            estimates[(name, h)] = finite
            if finite.size:
                biases = finite - true_beta
                lo, hi = bootstrap_median_ci(
                    biases, n_bootstrap, level, seed=_derived_seed(seed, 1, cell_index)
                )
                cells.append(
                    McCell(
                        estimator=name,
                        h=h,
                        median_bias=float(np.median(biases)),
                        ci_lo=lo,
                        ci_hi=hi,
                        sd=float(finite.std(ddof=1)) if finite.size > 1 else float("nan"),
                        sd_boot_se=_bootstrap_sd_se(
                            finite, n_bootstrap, _derived_seed(seed, 2, cell_index)
                        ),
                        n_ok=int(finite.size),
                        n_fail=n_fail,
                    )
                )
            else:
                cells.append(
                    McCell(name, h, float("nan"), float("nan"), float("nan"),
                           float("nan"), float("nan"), 0, n_fail)
                )
            cell_index += 1
    n_cells = len(estimators) * len(h_grid) * n_replications
    return McSummary(
        cells=cells,
        n_replications=n_replications,
        estimates=estimates,
        dataset_digests=digests if keep_digests else [],
        high_failure=total_fail > 0.01 * n_cells,
    )


@dataclass
class OracleEstimand:
    """Numerical value of the limiting estimand with its own Monte Carlo SE."""

    beta0: float
    se: float
    n_slice: int


def estimand_oracle(
    spec: DgpSpec,
    epsilon: float = 0.01,
    n_units: int = 400_000,
    seed: Optional[int] = None,
) -> OracleEstimand:
    """Brute-force evaluation of the cutoff-slice estimand.

    Draws a large design, restricts to subunits with |r| < epsilon, and
    toggles each subunit's cutoff indicator analytically: the estimand is the
    ratio of the mean reweighted outcome response to the mean reweighted
    treatment response on the slice. The built-in outcome kinds all have
    analytic responses (zero for the pure-confound kinds; beta_i times the
    importance weight under heterogeneous effects).
    """
    if spec.outcome_kind not in OUTCOME_KINDS:
        raise EstimationError(
            f"no analytic potential outcomes for outcome kind '{spec.outcome_kind}'"
        )
    rng = _rng(spec.seed if seed is None else seed, 3)
    big = replace(spec, n_units=n_units)
    counts, unit_idx, r, s, _zeta = _draw_design(big, rng)
    if spec.outcome_kind == "heterogeneous_effects":
        beta_i = spec.effect_mean + spec.effect_sd * rng.standard_normal(n_units)
        outcome_response = s * beta_i[unit_idx] * s  # s_j * (beta_i * s_j)
    else:
        outcome_response = np.zeros_like(s)
    treatment_response = s * s  # s_j * (X(1) - X(0)) with X linear in z

    mask = np.abs(r) < epsilon
    num = outcome_response[mask]
    den = treatment_response[mask]
    m = int(mask.sum())
    if m == 0:
        raise EstimationError("empty oracle slice; increase n_units or epsilon")
    a, b = float(num.mean()), float(den.mean())
    beta0 = a / b
    var_a = float(num.var(ddof=1)) if m > 1 else 0.0
    var_b = float(den.var(ddof=1)) if m > 1 else 0.0
    cov_ab = float(np.cov(num, den, ddof=1)[0, 1]) if m > 1 else 0.0
    var_ratio = (var_a / b**2 + a**2 * var_b / b**4 - 2 * a * cov_ab / b**3) / m
    return OracleEstimand(beta0=beta0, se=float(np.sqrt(max(var_ratio, 0.0))), n_slice=m)


def close_importance_weights(
    subunits: Sequence[SubunitRecord], bandwidth: float
) -> Dict[str, float]:
    """Per-unit estimand weight: sum of squared importance over close subunits.

    Under heterogeneous linear effects this is the total weight the limiting
    estimand places on a unit's effect, so it ranks which units the design
    listens to most.
    """
    out: Dict[str, float] = {}
    for s in subunits:
        if abs(s.running) <= bandwidth:
            out[s.unit_id] = out.get(s.unit_id, 0.0) + s.importance**2
    return out
