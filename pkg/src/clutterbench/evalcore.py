"""Episode logs, outcome staging, benchmark metrics, curves and agreement.

Log files are UTF-8 JSON lines.  The first line is a format header; each
episode is one ``{"type": "episode", ...}`` line followed by its
``{"type": "step", ...}`` lines.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidInputError, ParseError
from .scenario import ScenarioRecord, assign_bins

LOG_FORMAT = "clutterbench-episodes"
LOG_VERSION = 1
DEFAULT_D_REACH = 0.05
DISPERSION_DISTANCE = 0.5
N_OCCLUSION_DECILES = 10
ER_CONVENTION = "ER averages steps_used / max_steps over successful episodes only"


class Stage(str, enum.Enum):
    SUCCESS = "SUCCESS"
    FAIL_REACH = "FAIL_REACH"
    FAIL_GRASP = "FAIL_GRASP"
    FAIL_AFTER_GRASP = "FAIL_AFTER_GRASP"


# --- logs ----------------------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    index: int
    ee_position: tuple[float, float, float]
    grasped: str | None = None
    contacts: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ee_position", tuple(float(v) for v in self.ee_position))
        object.__setattr__(self, "contacts", tuple(self.contacts))
        if len(self.ee_position) != 3 or not all(math.isfinite(v) for v in self.ee_position):
            raise InvalidInputError(f"step {self.index}: end-effector position must be 3 finite numbers")

    def to_dict(self) -> dict:
        return {
            "type": "step",
            "t": self.index,
            "ee": list(self.ee_position),
            "grasped": self.grasped,
            "contacts": list(self.contacts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        t = d.get("t")
        if isinstance(t, bool) or not isinstance(t, int):
            raise InvalidInputError(f"step index must be an integer, got {t!r}")
        ee = d.get("ee")
        if not isinstance(ee, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in ee):
            raise InvalidInputError(f"step {t}: 'ee' must be a list of numbers")
        grasped = d.get("grasped")
        if grasped is not None and not isinstance(grasped, str):
            raise InvalidInputError(f"step {t}: 'grasped' must be a string or null")
        contacts = d.get("contacts", [])
        if not isinstance(contacts, list) or not all(isinstance(c, str) for c in contacts):
            raise InvalidInputError(f"step {t}: 'contacts' must be a list of ids")
        return cls(t, tuple(ee), grasped, tuple(contacts))


@dataclass(frozen=True)
class EpisodeLog:
    scenario_id: str
    policy_id: str
    max_steps: int
    success: bool
    steps: tuple[StepRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if isinstance(self.max_steps, bool) or not isinstance(self.max_steps, int) or self.max_steps < 1:
            raise InvalidInputError(f"max_steps must be a positive integer, got {self.max_steps!r}")
        if len(self.steps) > self.max_steps:
            raise InvalidInputError(f"episode has {len(self.steps)} steps, more than max_steps={self.max_steps}")
        for prev, cur in zip(self.steps, self.steps[1:]):
            if cur.index <= prev.index:
                raise InvalidInputError(f"step indices must strictly increase ({prev.index} then {cur.index})")

    def header_dict(self) -> dict:
        return {
            "type": "episode",
            "scenario_id": self.scenario_id,
            "policy_id": self.policy_id,
            "max_steps": self.max_steps,
            "success": self.success,
            "n_steps": len(self.steps),
        }


def dumps_logs(logs: Iterable[EpisodeLog]) -> str:
    lines = [json.dumps({"format": LOG_FORMAT, "version": LOG_VERSION})]
    for log in logs:
        lines.append(json.dumps(log.header_dict(), separators=(",", ":")))
        lines.extend(json.dumps(s.to_dict(), separators=(",", ":")) for s in log.steps)
    return "\n".join(lines) + "\n"


def write_logs(logs: Iterable[EpisodeLog], path) -> None:
    Path(path).write_text(dumps_logs(logs), encoding="utf-8")


def loads_logs(text: str, path=None) -> list[EpisodeLog]:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file, expected a header line", 1, path)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc.msg}", 1, path) from exc
    if not isinstance(header, dict) or header.get("format") != LOG_FORMAT:
        raise ParseError(f"not a {LOG_FORMAT} file", 1, path)
    if header.get("version") != LOG_VERSION:
        raise ParseError(f"unsupported version {header.get('version')!r}", 1, path)

    logs: list[EpisodeLog] = []
    current = None  # (header dict, steps, line number of header)

    def close(lineno):
        if current is None:
            return
        head, steps, at = current
        if "n_steps" in head and head["n_steps"] != len(steps):
            raise ParseError(f"episode declares {head['n_steps']} steps, found {len(steps)}", at, path)
        try:
            logs.append(
                EpisodeLog(
                    scenario_id=_str_field(head, "scenario_id"),
                    policy_id=_str_field(head, "policy_id"),
                    max_steps=head.get("max_steps"),
                    success=_bool_field(head, "success"),
                    steps=steps,
                )
            )
        except InvalidInputError as exc:
            raise ParseError(str(exc), at, path) from exc

    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno, path) from exc
        kind = rec.get("type") if isinstance(rec, dict) else None
        if kind == "episode":
            close(lineno)
            current = (rec, [], lineno)
        elif kind == "step":
            if current is None:
                raise ParseError("step line before any episode line", lineno, path)
            try:
                current[1].append(StepRecord.from_dict(rec))
            except InvalidInputError as exc:
                raise ParseError(str(exc), lineno, path) from exc
        else:
            raise ParseError(f"unknown record type {kind!r}", lineno, path)
    close(len(lines))
    return logs


def read_logs(path) -> list[EpisodeLog]:
    return loads_logs(Path(path).read_text(encoding="utf-8"), path)


def _str_field(d, key):
    v = d.get(key)
    if not isinstance(v, str):
        raise InvalidInputError(f"field {key!r} must be a string, got {v!r}")
    return v


def _bool_field(d, key):
    v = d.get(key)
    if not isinstance(v, bool):
        raise InvalidInputError(f"field {key!r} must be true or false, got {v!r}")
    return v


# --- outcomes ------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeOutcome:
    scenario_id: str
    policy_id: str
    success: bool
    collided: bool
    grasped_target: bool
    steps_used: int
    max_steps: int
    min_target_distance: float
    stage: Stage

    def to_row(self) -> dict:
        d = math.inf if self.min_target_distance is None else self.min_target_distance
        return {
            "scenario_id": self.scenario_id,
            "policy_id": self.policy_id,
            "success": int(self.success),
            "collided": int(self.collided),
            "grasped_target": int(self.grasped_target),
            "steps_used": self.steps_used,
            "max_steps": self.max_steps,
            "min_target_distance": "" if math.isinf(d) else f"{d:.6f}",
            "stage": self.stage.value,
        }


def stage_for(success: bool, reached: bool, grasped: bool) -> Stage:
    if success:
        return Stage.SUCCESS
    if not reached:
        return Stage.FAIL_REACH
    if not grasped:
        return Stage.FAIL_GRASP
    return Stage.FAIL_AFTER_GRASP


def classify_outcome(log: EpisodeLog, scenario: ScenarioRecord, d_reach: float = DEFAULT_D_REACH) -> EpisodeOutcome:
    """Stage one episode; only contacts with the scenario's distractors count as collisions."""
    if log.scenario_id != scenario.id:
        raise InvalidInputError(f"log is for scenario {log.scenario_id!r}, not {scenario.id!r}")
    if not d_reach >= 0:
        raise InvalidInputError(f"d_reach must be >= 0, got {d_reach!r}")
    scene = scenario.scene
    target = scene.target_id
    distractor_ids = {o.id for o in scene.distractors}
    grasp_point = scene.target.center
    if log.steps:
        ee = np.array([s.ee_position for s in log.steps])
        min_d = float(np.min(np.linalg.norm(ee - grasp_point, axis=1)))
    else:
        min_d = math.inf
    collided = any(c in distractor_ids for s in log.steps for c in s.contacts)
    grasped = any(s.grasped == target for s in log.steps)
    return EpisodeOutcome(
        scenario_id=log.scenario_id,
        policy_id=log.policy_id,
        success=bool(log.success),
        collided=collided,
        grasped_target=grasped,
        steps_used=len(log.steps),
        max_steps=log.max_steps,
        min_target_distance=min_d,
        stage=stage_for(log.success, min_d <= d_reach, grasped),
    )


def classify_all(logs: Sequence[EpisodeLog], scenarios: Mapping[str, ScenarioRecord], d_reach=DEFAULT_D_REACH):
    out = []
    for log in logs:
        if log.scenario_id not in scenarios:
            raise InvalidInputError(f"log references unknown scenario {log.scenario_id!r}")
        out.append(classify_outcome(log, scenarios[log.scenario_id], d_reach))
    return out


# --- metrics -------------------------------------------------------------------


@dataclass(frozen=True)
class CurveRow:
    group: int
    lo: float | None
    hi: float | None
    n: int
    sr: float | None
    cr: float | None
    gfr: float | None

    def to_dict(self) -> dict:
        return {"group": self.group, "lo": self.lo, "hi": self.hi, "n": self.n, "sr": self.sr, "cr": self.cr, "gfr": self.gfr}


@dataclass(frozen=True)
class Curves:
    per_bin: list[CurveRow]
    per_set_size: list[CurveRow]
    per_occlusion: list[CurveRow]


@dataclass(frozen=True)
class MetricsReport:
    n_episodes: int
    n_success: int
    sr: float
    h_sr: float
    cr: float
    gfr: float
    er: float | None
    stage_histogram: dict[str, int]
    sr_noocc: float | None = None
    sr_occ: float | None = None
    per_bin: list[CurveRow] = field(default_factory=list)
    per_set_size: list[CurveRow] = field(default_factory=list)
    per_occlusion: list[CurveRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "n_success": self.n_success,
            "sr": self.sr,
            "h_sr": self.h_sr,
            "cr": self.cr,
            "gfr": self.gfr,
            "er": self.er,
            "er_convention": ER_CONVENTION,
            "sr_noocc": self.sr_noocc,
            "sr_occ": self.sr_occ,
            "stage_histogram": dict(self.stage_histogram),
            "per_bin": [r.to_dict() for r in self.per_bin],
            "per_set_size": [r.to_dict() for r in self.per_set_size],
            "per_occlusion": [r.to_dict() for r in self.per_occlusion],
        }


def _rates(group: Sequence[EpisodeOutcome]):
    n = len(group)
    if n == 0:
        return None, None, None
    return (
        sum(o.success for o in group) / n,
        sum(o.collided for o in group) / n,
        sum(not o.grasped_target for o in group) / n,
    )


def compute_metrics(
    outcomes: Sequence[EpisodeOutcome],
    scenarios: Mapping[str, ScenarioRecord] | None = None,
    n_bins: int = 8,
) -> MetricsReport:
    """Aggregate metrics; occlusion split and curves need the scenario records."""
    outcomes = list(outcomes)
    if not outcomes:
        raise InvalidInputError("compute_metrics needs at least one outcome")
    n = len(outcomes)
    successes = [o for o in outcomes if o.success]
    sr, cr, gfr = _rates(outcomes)
    h_sr = sum(o.success and not o.collided for o in outcomes) / n
    er = sum(o.steps_used / o.max_steps for o in successes) / len(successes) if successes else None
    hist = {s.value: 0 for s in Stage}
    for o in outcomes:
        hist[o.stage.value] += 1
    sr_noocc = sr_occ = None
    curves = Curves([], [], [])
    if scenarios is not None:
        recs = [_lookup(scenarios, o) for o in outcomes]
        # both are shares of all episodes, so sr_noocc + sr_occ == sr
        sr_noocc = sum(o.success and r.occlusion == 0 for o, r in zip(outcomes, recs)) / n
        sr_occ = sum(o.success and r.occlusion > 0 for o, r in zip(outcomes, recs)) / n
        curves = per_bin_curves(outcomes, scenarios, n_bins)
    return MetricsReport(
        n_episodes=n,
        n_success=len(successes),
        sr=sr,
        h_sr=h_sr,
        cr=cr,
        gfr=gfr,
        er=er,
        stage_histogram=hist,
        sr_noocc=sr_noocc,
        sr_occ=sr_occ,
        per_bin=curves.per_bin,
        per_set_size=curves.per_set_size,
        per_occlusion=curves.per_occlusion,
    )


def _lookup(scenarios, outcome):
    try:
        return scenarios[outcome.scenario_id]
    except KeyError:
        raise InvalidInputError(f"no scenario record for {outcome.scenario_id!r}") from None


def _grouped_rows(outcomes, keys, n_groups, bounds) -> list[CurveRow]:
    groups: list[list[EpisodeOutcome]] = [[] for _ in range(n_groups)]
    for o, k in zip(outcomes, keys):
        groups[k].append(o)
    rows = []
    for g, members in enumerate(groups):
        lo, hi = bounds(g)
        rows.append(CurveRow(g, lo, hi, len(members), *_rates(members)))
    return rows


def per_bin_curves(outcomes: Sequence[EpisodeOutcome], scenarios: Mapping[str, ScenarioRecord], n_bins: int = 8) -> Curves:
    """SR/CR/GFR per DvFC bin, per distractor count and per occlusion decile.

    DvFC bins are equal-width over the evaluated scenarios.  Empty groups are
    kept as rows with n = 0 and null rates.
    """
    outcomes = list(outcomes)
    if n_bins < 1:
        raise InvalidInputError("n_bins must be >= 1")
    if not outcomes:
        return Curves([], [], [])
    recs = [_lookup(scenarios, o) for o in outcomes]

    bins, edges = assign_bins([r.dvfc for r in recs], n_bins, "width")
    if len(edges) == n_bins + 1:
        bin_bounds = lambda g: (edges[g], edges[g + 1])
    else:
        bin_bounds = lambda g: (edges[0], edges[1]) if g == 0 else (None, None)
    per_bin = _grouped_rows(outcomes, bins, n_bins, bin_bounds)

    counts = [r.n_distractors for r in recs]
    lo_n = min(counts)
    per_size = _grouped_rows(
        outcomes, [c - lo_n for c in counts], max(counts) - lo_n + 1, lambda g: (lo_n + g, lo_n + g)
    )

    deciles = [min(int(math.floor(r.occlusion * N_OCCLUSION_DECILES)), N_OCCLUSION_DECILES - 1) for r in recs]
    per_occ = _grouped_rows(
        outcomes, deciles, N_OCCLUSION_DECILES, lambda g: (g / N_OCCLUSION_DECILES, (g + 1) / N_OCCLUSION_DECILES)
    )
    return Curves(per_bin, per_size, per_occ)


# --- agreement -----------------------------------------------------------------


@dataclass(frozen=True)
class Agreement:
    policies: tuple[str, ...]
    # region key: the set of policies that succeed there, and no others
    regions: dict[frozenset, float]
    region_counts: dict[frozenset, int]
    union_size: int
    union_sr: float
    # filled instead of ``regions`` when more than three policies are given
    pairwise: dict[tuple[str, str], "Agreement"] = field(default_factory=dict)


def _venn(names, sets, universe_size) -> Agreement:
    union = set().union(*sets)
    counts = {}
    for r in range(1, len(names) + 1):
        for combo in combinations(range(len(names)), r):
            inside = set.intersection(*(sets[i] for i in combo))
            outside = set().union(*(sets[i] for i in range(len(names)) if i not in combo))
            counts[frozenset(names[i] for i in combo)] = len(inside - outside)
    u = len(union)
    fractions = {k: (c / u if u else 0.0) for k, c in counts.items()}
    return Agreement(tuple(names), fractions, counts, u, u / universe_size)


def agreement(success_sets: Mapping[str, Iterable], universe_size: int) -> Agreement:
    """Venn-region shares of the union of successes, and the union success rate.

    With more than three policies only the pairwise diagrams are reported.
    """
    names = tuple(success_sets)
    sets = [set(success_sets[k]) for k in names]
    if len(names) < 2:
        raise InvalidInputError("agreement needs at least two policies")
    if universe_size < 1:
        raise InvalidInputError("universe_size must be >= 1")
    union = set().union(*sets)
    if len(union) > universe_size:
        raise InvalidInputError(f"{len(union)} successful scenarios exceed universe size {universe_size}")
    if len(names) <= 3:
        return _venn(names, sets, universe_size)
    pairs = {
        (names[i], names[j]): _venn((names[i], names[j]), [sets[i], sets[j]], universe_size)
        for i, j in combinations(range(len(names)), 2)
    }
    return Agreement(names, {}, {}, len(union), len(union) / universe_size, pairs)


# --- reach failures --------------------------------------------------------------


@dataclass(frozen=True)
class ReachFailures:
    entries: list[tuple[str, float]]
    median: float | None
    p90: float | None
    dispersed: bool


def reach_failure_distribution(outcomes: Iterable[EpisodeOutcome], threshold: float = DISPERSION_DISTANCE) -> ReachFailures:
    """Closest approach of each fail-to-reach episode; dispersed if any lies beyond ``threshold``."""
    entries = [(o.scenario_id, o.min_target_distance) for o in outcomes if o.stage is Stage.FAIL_REACH]
    finite = [d for _, d in entries if math.isfinite(d)]
    if not finite:
        return ReachFailures(entries, None, None, any(math.isinf(d) for _, d in entries))
    arr = np.array(finite)
    return ReachFailures(
        entries,
        float(np.median(arr)),
        float(np.percentile(arr, 90)),
        any(d > threshold for _, d in entries),
    )


# --- policy table ----------------------------------------------------------------

TABLE_COLUMNS = ("policy", "sr_base", "sr", "sr_noocc", "sr_occ", "h_sr", "cr", "gfr", "er")
_TABLE_HEADERS = ("Policy", "SR_base", "SR", "SR_noocc", "SR_occ", "h-SR", "CR", "GFR", "ER")


@dataclass(frozen=True)
class PolicyRow:
    policy: str
    sr_base: float | None
    sr: float | None
    sr_noocc: float | None
    sr_occ: float | None
    h_sr: float | None
    cr: float | None
    gfr: float | None
    er: float | None

    @classmethod
    def from_metrics(cls, policy: str, m: MetricsReport, base: MetricsReport | None = None) -> "PolicyRow":
        return cls(policy, base.sr if base else None, m.sr, m.sr_noocc, m.sr_occ, m.h_sr, m.cr, m.gfr, m.er)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolicyRow":
        unknown = set(d) - set(TABLE_COLUMNS)
        if unknown:
            raise InvalidInputError(f"unknown table fields: {sorted(unknown)}")
        if not isinstance(d.get("policy"), str):
            raise InvalidInputError("row needs a string 'policy'")
        vals = {}
        for col in TABLE_COLUMNS[1:]:
            v = d.get(col)
            if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float)) or not 0 <= v <= 1):
                raise InvalidInputError(f"{d['policy']}: {col} must be a fraction in [0, 1] or null, got {v!r}")
            vals[col] = None if v is None else float(v)
        return cls(d["policy"], **vals)

    def cells(self) -> list[str]:
        return [self.policy] + [_fmt(getattr(self, c)) for c in TABLE_COLUMNS[1:]]


def _fmt(v) -> str:
    return "" if v is None else f"{v:.3f}"


def table_csv(rows: Sequence[PolicyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def table_markdown(rows: Sequence[PolicyRow]) -> str:
    lines = [
        f"<!-- {ER_CONVENTION}; SR_noocc + SR_occ = SR -->",
        "| " + " | ".join(_TABLE_HEADERS) + " |",
        "|" + "|".join(["---"] + ["---:"] * (len(_TABLE_HEADERS) - 1)) + "|",
    ]
    for r in rows:
        lines.append("| " + " | ".join(c or "-" for c in r.cells()) + " |")
    return "\n".join(lines) + "\n"


def curves_csv(report: MetricsReport, policy: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "curve", "group", "lo", "hi", "n", "sr", "cr", "gfr"])
    for name, rows in (("dvfc_bin", report.per_bin), ("set_size", report.per_set_size), ("occlusion_decile", report.per_occlusion)):
        for r in rows:
            w.writerow([policy, name, r.group, _num(r.lo), _num(r.hi), r.n, _num(r.sr), _num(r.cr), _num(r.gfr)])
    return buf.getvalue()


def _num(v) -> str:
    return "" if v is None else str(v)
