"""Data model and construction of every aggregated-discontinuity ingredient.

Subunits are discontinuity events (a running variable, an importance weight,
optionally an observed win flag); units carry the outcome. From these the
module builds close-event sets, the shift-share instrument, the three
aggregated local-linear controls, aggregated treatments, stacked lower-level
samples, kernel weights, and spillover exposures over a bipartite graph.

Construction is pure and deterministic: outputs are ordered by id and depend
only on the inputs.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, IntegrityError

KERNELS = ("uniform", "triangular")
CUTOFF_RULES = ("geq", "strict_gt")
TIE_POLICIES = ("keep", "drop_exact_zero")
TREATMENT_BASES = ("cutoff_crossing", "win_flag")
CONTROL_SETS = ("all_three_rda", "total_weight_only", "none")

AGG_WEIGHT = "agg_weight"
AGG_RUNNING = "agg_running"
AGG_RUNNING_POS = "agg_running_pos"


@dataclass(frozen=True)
class SubunitRecord:
    """One discontinuity event, owned by (or linked to) a unit."""

    subunit_id: str
    unit_id: str
    running: float
    importance: float
    win_flag: Optional[bool] = None
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.running):
            raise ConfigurationError(f"subunit '{self.subunit_id}': running variable not finite")
        if not (self.importance > 0):
            raise ConfigurationError(f"subunit '{self.subunit_id}': importance must be positive")


@dataclass(frozen=True)
class UnitRecord:
    """One outcome observation at the aggregated level."""

    unit_id: str
    outcome: float
    extra_controls: dict = field(default_factory=dict)
    fe_keys: dict = field(default_factory=dict)
    analysis_weight: float = 1.0
    treatment_override: Optional[float] = None

    def __post_init__(self):
        if self.analysis_weight < 0:
            raise ConfigurationError(f"unit '{self.unit_id}': analysis_weight must be nonnegative")


_OPS = {
    ">=": operator.ge,
    "<=": operator.le,
    ">": operator.gt,
    "<": operator.lt,
    "==": operator.eq,
    "!=": operator.ne,
}


@dataclass(frozen=True)
class AttributeFilter:
    """Threshold predicate over a subunit attribute; callable on a record.

    A missing attribute fails the filter. ``absolute`` compares |value|.
    """

    attribute: str
    op: str
    value: float
    absolute: bool = False

    def __post_init__(self):
        if self.op not in _OPS:
            raise ConfigurationError(f"unknown filter operator '{self.op}'")

    def __call__(self, subunit: SubunitRecord) -> bool:
        raw = subunit.attributes.get(self.attribute)
        if raw is None:
            return False
        x = abs(float(raw)) if self.absolute else float(raw)
        return bool(_OPS[self.op](x, self.value))

    def describe(self) -> str:
        prefix = "abs:" if self.absolute else ""
        return f"{prefix}{self.attribute}{self.op}{self.value:g}"


def parse_filter(text: str) -> AttributeFilter:
    """Parse 'votes>=20' or 'abs:margin>=2' into an AttributeFilter."""
    body = text.strip()
    absolute = body.startswith("abs:")
    if absolute:
        body = body[4:]
    for op in (">=", "<=", "==", "!=", ">", "<"):
        if op in body:
            name, _, raw = body.partition(op)
            name = name.strip()
            if not name:
                break
            try:
                value = float(raw.strip())
            except ValueError:
                raise ConfigurationError(f"filter '{text}': cannot parse threshold '{raw.strip()}'")
            return AttributeFilter(name, op, value, absolute)
    raise ConfigurationError(f"cannot parse filter '{text}' (expected e.g. 'votes>=20')")


@dataclass(frozen=True)
class DesignConfig:
    """Bandwidth, kernel, cutoff/tie policy, filters, and control selection."""

    bandwidth: float = 0.1
    kernel: str = "uniform"
    cutoff_rule: str = "geq"
    tie_policy: str = "keep"
    filters: Tuple[Callable[[SubunitRecord], bool], ...] = ()
    instrument_basis: str = "cutoff_crossing"
    control_set: str = "all_three_rda"
    fe_dimensions: Tuple[str, ...] = ()
    include_intercept: bool = True
    lower_unit_weights: bool = False
    fe_tol: float = 1e-10
    fe_max_iter: int = 10_000
    weak_f_threshold: float = 10.0

    def __post_init__(self):
        if not (self.bandwidth > 0):
            raise ConfigurationError("bandwidth must be positive")
        if self.kernel not in KERNELS:
            raise ConfigurationError(f"kernel must be one of {KERNELS}")
        if self.cutoff_rule not in CUTOFF_RULES:
            raise ConfigurationError(f"cutoff_rule must be one of {CUTOFF_RULES}")
        if self.tie_policy not in TIE_POLICIES:
            raise ConfigurationError(f"tie_policy must be one of {TIE_POLICIES}")
        if self.instrument_basis not in TREATMENT_BASES:
            raise ConfigurationError(f"instrument_basis must be one of {TREATMENT_BASES}")
        if self.control_set not in CONTROL_SETS:
            raise ConfigurationError(f"control_set must be one of {CONTROL_SETS}")


@dataclass(frozen=True)
class StackedRow:
    """One close subunit with its unit's outcome and treatment repeated."""

    subunit_id: str
    unit_id: str
    outcome: float
    treatment: float
    q: Tuple[float, float, float]
    instrument: float
    weight: float
    kernel_weight: float
    fe_keys: dict = field(default_factory=dict)
    extra_controls: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SpilloverGraph:
    """Bipartite links from outcome units to intervention subunits.

    A subunit may appear in many units' edge sets; each edge inherits the
    subunit's importance weight.
    """

    edges: Tuple[Tuple[str, str], ...]

    def incident_subunits(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for unit_id, subunit_id in self.edges:
            out.setdefault(unit_id, []).append(subunit_id)
        return out

    def incident_units(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for unit_id, subunit_id in self.edges:
            out.setdefault(subunit_id, []).append(unit_id)
        return out


def partition_graph(subunits: Sequence[SubunitRecord]) -> SpilloverGraph:
    """The graph linking every subunit only to its own unit."""
    return SpilloverGraph(tuple((s.unit_id, s.subunit_id) for s in subunits))


def cutoff_indicator(running: float, cutoff_rule: str) -> float:
    if cutoff_rule == "geq":
        return 1.0 if running >= 0.0 else 0.0
    return 1.0 if running > 0.0 else 0.0


def kernel_weight(running: float, bandwidth: float, kernel: str) -> float:
    """Kernel weight at |running| <= bandwidth: uniform 1, triangular 1-|r|/h."""
    if kernel not in KERNELS:
        raise ConfigurationError(f"kernel must be one of {KERNELS}")
    if abs(running) > bandwidth:
        raise ConfigurationError(
            f"running value {running:g} outside bandwidth {bandwidth:g}"
        )
    if kernel == "uniform":
        return 1.0
    return 1.0 - abs(running) / bandwidth


def is_close(subunit: SubunitRecord, config: DesignConfig) -> bool:
    """Bandwidth, tie policy, and every attribute filter, all at once."""
    if abs(subunit.running) > config.bandwidth:
        return False
    if config.tie_policy == "drop_exact_zero" and subunit.running == 0.0:
        return False
    for predicate in config.filters:
        if not predicate(subunit):
            return False
    return True


def running_values(subunits: Sequence[SubunitRecord]) -> np.ndarray:
    return np.fromiter((s.running for s in subunits), dtype=np.float64, count=len(subunits))


def importance_values(subunits: Sequence[SubunitRecord]) -> np.ndarray:
    return np.fromiter((s.importance for s in subunits), dtype=np.float64, count=len(subunits))


def cutoff_indicators(r: np.ndarray, cutoff_rule: str) -> np.ndarray:
    return (r >= 0.0).astype(np.float64) if cutoff_rule == "geq" else (r > 0.0).astype(np.float64)


def close_mask(
    subunits: Sequence[SubunitRecord], r: np.ndarray, config: DesignConfig
) -> np.ndarray:
    """Vectorized close-set membership; filters fall back to per-record calls."""
    mask = np.abs(r) <= config.bandwidth
    if config.tie_policy == "drop_exact_zero":
        mask &= r != 0.0
    if config.filters:
        for i in np.flatnonzero(mask):
            s = subunits[i]
            if not all(predicate(s) for predicate in config.filters):
                mask[i] = False
    return mask


def close_set(
    subunits: Sequence[SubunitRecord], config: DesignConfig
) -> Dict[str, List[SubunitRecord]]:
    """Map unit_id -> its close subunits, ordered by subunit_id.

    Units with no close subunit do not appear; callers use .get(uid, []).
    """
    grouped: Dict[str, List[SubunitRecord]] = {}
    for s in subunits:
        if is_close(s, config):
            grouped.setdefault(s.unit_id, []).append(s)
    return {
        uid: sorted(members, key=lambda s: s.subunit_id)
        for uid, members in sorted(grouped.items())
    }


def _treatment_values(
    subunits: Sequence[SubunitRecord], z: np.ndarray, config: DesignConfig
) -> np.ndarray:
    """Per-subunit treatment outcome t_j under the configured basis."""
    if config.instrument_basis == "win_flag":
        vals = np.empty(len(subunits))
        for i, s in enumerate(subunits):
            if s.win_flag is None:
                raise ConfigurationError(
                    f"instrument_basis=win_flag but subunit '{s.subunit_id}' has no win_flag"
                )
            vals[i] = 1.0 if s.win_flag else 0.0
        return vals
    return z


@dataclass
class UnitExposures:
    """Aggregates aligned to a fixed unit ordering (sorted by unit_id)."""

    unit_ids: List[str]
    treatment: np.ndarray
    instrument: np.ndarray
    controls: np.ndarray  # columns: total weight, sum s*r, sum s*r_plus


def _require_uniform_kernel(config: DesignConfig, what: str):
    if config.kernel != "uniform":
        raise ConfigurationError(
            f"{what} requires the uniform kernel; kernel weights do not apply here"
        )


def unit_exposures(
    units: Sequence[UnitRecord],
    subunits: Sequence[SubunitRecord],
    config: DesignConfig,
    graph: Optional[SpilloverGraph] = None,
) -> UnitExposures:
    """Treatment, instrument, and aggregated controls for every unit.

    Without a graph, each subunit contributes to its own unit. With a graph,
    contributions follow the edges and a subunit may reach many units. The
    treatment aggregates over all linked subunits; the instrument and the
    controls aggregate over close ones only. A unit-level treatment_override
    replaces the aggregate for that unit.
    """
    order = sorted(units, key=lambda u: u.unit_id)
    unit_ids = [u.unit_id for u in order]
    uindex = {uid: i for i, uid in enumerate(unit_ids)}
    if len(uindex) != len(unit_ids):
        raise IntegrityError("duplicate unit ids")
    n = len(order)

    if graph is None:
        pairs = [(s.unit_id, s) for s in subunits]
        for uid, s in pairs:
            if uid not in uindex:
                raise IntegrityError(
                    f"subunit '{s.subunit_id}' references unknown unit '{uid}'"
                )
    else:
        by_subunit = {s.subunit_id: s for s in subunits}
        if len(by_subunit) != len(subunits):
            raise IntegrityError("duplicate subunit ids")
        pairs = []
        for unit_id, subunit_id in graph.edges:
            if unit_id not in uindex:
                raise IntegrityError(f"edge references unknown unit '{unit_id}'")
            if subunit_id not in by_subunit:
                raise IntegrityError(f"edge references unknown subunit '{subunit_id}'")
            pairs.append((unit_id, by_subunit[subunit_id]))

    treatment = np.zeros(n)
    instrument = np.zeros(n)
    controls = np.zeros((n, 3))
    if pairs:
        rows = np.fromiter((uindex[uid] for uid, _ in pairs), dtype=np.intp, count=len(pairs))
        subs = [s for _, s in pairs]
        s_w = importance_values(subs)
        r = running_values(subs)
        z = cutoff_indicators(r, config.cutoff_rule)
        t = _treatment_values(subs, z, config)
        close = close_mask(subs, r, config)

        np.add.at(treatment, rows, s_w * t)
        crows = rows[close]
        np.add.at(instrument, crows, (s_w * z)[close])
        np.add.at(controls[:, 0], crows, s_w[close])
        np.add.at(controls[:, 1], crows, (s_w * r)[close])
        np.add.at(controls[:, 2], crows, (s_w * r * z)[close])

    for i, u in enumerate(order):
        if u.treatment_override is not None:
            treatment[i] = float(u.treatment_override)
    return UnitExposures(unit_ids, treatment, instrument, controls)


def build_instrument(
    units: Sequence[UnitRecord],
    subunits: Sequence[SubunitRecord],
    config: DesignConfig,
) -> Dict[str, float]:
    """Shift-share instrument: sum of s_j * z_j over each unit's close set.

    Units with an empty close set get 0 and stay in the sample. Requires the
    uniform kernel: kernel weighting has no place in this aggregation.
    """
    _require_uniform_kernel(config, "instrument construction")
    exp = unit_exposures(units, subunits, config)
    return dict(zip(exp.unit_ids, exp.instrument.tolist()))


def build_rda_controls(
    units: Sequence[UnitRecord],
    subunits: Sequence[SubunitRecord],
    config: DesignConfig,
) -> Dict[str, Tuple[float, float, float]]:
    """The aggregated control triple (sum s, sum s*r, sum s*r_plus) per unit."""
    _require_uniform_kernel(config, "aggregated-control construction")
    exp = unit_exposures(units, subunits, config)
    return {uid: tuple(row) for uid, row in zip(exp.unit_ids, exp.controls.tolist())}


def aggregate_treatment(
    units: Sequence[UnitRecord],
    subunits: Sequence[SubunitRecord],
    config: DesignConfig,
) -> Dict[str, float]:
    """Unit treatment: sum of s_j * t_j over ALL of the unit's subunits.

    t_j is the win flag under instrument_basis=win_flag (missing flags are an
    error naming the subunit), else the cutoff indicator. A unit's
    treatment_override wins over the aggregate.
    """
    exp = unit_exposures(units, subunits, config)
    return dict(zip(exp.unit_ids, exp.treatment.tolist()))


def stack_lower(
    units: Sequence[UnitRecord],
    subunits: Sequence[SubunitRecord],
    config: DesignConfig,
) -> List[StackedRow]:
    """One row per close subunit, repeating the owning unit's outcome and treatment.

    Rows are ordered by (unit_id, subunit_id). Total row count is the sum of
    close-set sizes; units with empty close sets contribute nothing.
    """
    by_unit = {u.unit_id: u for u in units}
    if len(by_unit) != len(units):
        raise IntegrityError("duplicate unit ids")
    treatment = aggregate_treatment(units, subunits, config)
    members = close_set(subunits, config)
    rows: List[StackedRow] = []
    for uid in sorted(members):
        unit = by_unit.get(uid)
        if unit is None:
            raise IntegrityError(f"subunit references unknown unit '{uid}'")
        for s in members[uid]:
            z = cutoff_indicator(s.running, config.cutoff_rule)
            rows.append(
                StackedRow(
                    subunit_id=s.subunit_id,
                    unit_id=uid,
                    outcome=unit.outcome,
                    treatment=treatment[uid],
                    q=(1.0, s.running, s.running * z),
                    instrument=z,
                    weight=s.importance,
                    kernel_weight=kernel_weight(s.running, config.bandwidth, config.kernel),
                    fe_keys=dict(unit.fe_keys),
                    extra_controls=dict(unit.extra_controls),
                )
            )
    return rows


def build_spillover_exposure(
    graph: SpilloverGraph,
    subunits: Sequence[SubunitRecord],
    units: Sequence[UnitRecord],
    config: DesignConfig,
) -> Dict[str, Tuple[float, float, Tuple[float, float, float]]]:
    """Per-unit (treatment, instrument, control triple) over graph edges.

    Same formulas as the non-spillover builders, with each unit's subunit set
    given by its edges; a subunit may contribute to many units. Units with no
    edges get zeros. Dangling edges raise.
    """
    _require_uniform_kernel(config, "instrument construction")
    exp = unit_exposures(units, subunits, config, graph=graph)
    return {
        uid: (float(x), float(z), tuple(q))
        for uid, x, z, q in zip(
            exp.unit_ids, exp.treatment, exp.instrument, exp.controls.tolist()
        )
    }


@dataclass(frozen=True)
class CollapsedRecord:
    """One close intervention subunit with its neighbors averaged out."""

    subunit_id: str
    mean_outcome: float
    mean_treatment: float
    n_units: int
    weight: float  # importance * number of neighbors
    running: float
    instrument: float
    q: Tuple[float, float, float]


def collapse_by_intervention(
    graph: SpilloverGraph,
    units: Sequence[UnitRecord],
    subunits: Sequence[SubunitRecord],
    config: DesignConfig,
) -> Tuple[List[CollapsedRecord], List[str]]:
    """Collapse the bilateral spillover sample to the intervention level.

    For each close subunit j, averages outcome and treatment over the units
    linked to j (unweighted means) and assigns weight s_j * N_j. Close
    subunits with no linked units are dropped; their ids come back in the
    second return value.
    """
    exposures = unit_exposures(units, subunits, config, graph=graph)
    xmap = dict(zip(exposures.unit_ids, exposures.treatment))
    ymap = {u.unit_id: u.outcome for u in units}
    incident = graph.incident_units()
    records: List[CollapsedRecord] = []
    dropped: List[str] = []
    for s in sorted(subunits, key=lambda s: s.subunit_id):
        if not is_close(s, config):
            continue
        neighbor_ids = incident.get(s.subunit_id, [])
        if not neighbor_ids:
            dropped.append(s.subunit_id)
            continue
        ys = [ymap[uid] for uid in neighbor_ids]
        xs = [xmap[uid] for uid in neighbor_ids]
        z = cutoff_indicator(s.running, config.cutoff_rule)
        n_units = len(neighbor_ids)
        records.append(
            CollapsedRecord(
                subunit_id=s.subunit_id,
                mean_outcome=float(np.mean(ys)),
                mean_treatment=float(np.mean(xs)),
                n_units=n_units,
                weight=s.importance * n_units,
                running=s.running,
                instrument=z,
                q=(1.0, s.running, s.running * z),
            )
        )
    return records, dropped
