"""Cluttered scenario generation, DvFC stratification and scenario files.

Randomness: every scenario draws from its own PCG64 stream seeded through
numpy's SeedSequence with entropy ``[seed, *index]``.  Results therefore do
not depend on generation order or on how work is split between processes.
"""

from __future__ import annotations

import csv
import enum
import importlib.resources
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .clutter import ClutterConfig, dvfc
from .errors import InvalidInputError, ParseError
from .scene import (
    CameraSpec,
    ObjectSpec,
    SceneSpec,
    Shape,
    footprint_gap,
    footprint_inside,
    has_grasp_affordance,
    render,
    render_labels,
)

FORMAT_NAME = "clutterbench-scenarios"
FORMAT_VERSION = 1
CATALOG_SIZE = 61
REAL_WORLD_COUNTS = (0, 1, 2, 4, 8, 16)
REAL_WORLD_ARRANGEMENTS = 9


class Skill(str, enum.Enum):
    PICK = "PICK"
    MOVE = "MOVE"
    STACK = "STACK"
    PUT = "PUT"


# --- catalog -------------------------------------------------------------------


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    shape: Shape
    dims: tuple[float, ...]
    color: tuple[float, float, float]

    def place(self, x: float, y: float, yaw: float, object_id: str | None = None) -> ObjectSpec:
        return ObjectSpec.on_table(object_id or self.name, self.shape, self.dims, self.color, x, y, yaw)

    @property
    def bounding_radius(self) -> float:
        if self.shape is Shape.BOX:
            return 0.5 * math.hypot(self.dims[0], self.dims[1])
        return self.dims[0]


@dataclass(frozen=True)
class DistractorCatalog:
    entries: tuple[CatalogEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise InvalidInputError("catalog names must be unique")

    def __len__(self):
        return len(self.entries)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def excluding(self, names: Iterable[str]) -> "DistractorCatalog":
        """Drop entries that share a name with a task object."""
        names = set(names)
        return DistractorCatalog(tuple(e for e in self.entries if e.name not in names))


def load_catalog(path=None) -> DistractorCatalog:
    """Load the bundled 61-object catalog, or a CSV with the same columns."""
    if path is None:
        text = importlib.resources.files("clutterbench").joinpath("data/ycb_catalog.csv").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    entries = []
    for row in csv.DictReader(text.splitlines()):
        shape = Shape(row["shape"])
        n = {Shape.BOX: 3, Shape.CYLINDER: 2, Shape.SPHERE: 1}[shape]
        dims = tuple(float(row[f"dim{i + 1}"]) for i in range(n))
        color = (float(row["r"]), float(row["g"]), float(row["b"]))
        entries.append(CatalogEntry(row["name"], shape, dims, color))
    catalog = DistractorCatalog(tuple(entries))
    if path is None and len(catalog) != CATALOG_SIZE:
        raise InvalidInputError(f"bundled catalog must hold {CATALOG_SIZE} entries, has {len(catalog)}")
    return catalog


# --- base scenes ---------------------------------------------------------------

_INSTRUCTIONS = {
    Skill.PICK: "pick coke can",
    Skill.MOVE: "move apple near sponge",
    Skill.STACK: "stack the green block on the yellow block",
    Skill.PUT: "put the spoon on the towel",
}


def default_cameras(extent) -> tuple[CameraSpec, CameraSpec]:
    """Oblique robot camera in front of the table and a top-down camera covering it."""
    xmin, xmax, ymin, ymax = extent
    cx, cy = (xmin + xmax) / 2, (ymin + ymax) / 2
    half = max(xmax - xmin, ymax - ymin) / 2
    robot = CameraSpec((cx, ymin - 0.75 * half, 1.2 * half), (cx, cy, 0.0), math.radians(55))
    top_height = 2.8 * half
    fov = 2 * math.atan(1.12 * half / top_height)
    top = CameraSpec((cx, cy, top_height), (cx, cy, 0.0), fov)
    return robot, top


def default_base_scene(skill: Skill | str, extent=(-0.45, 0.45, -0.35, 0.35)) -> SceneSpec:
    """Task objects for a skill on an otherwise empty table."""
    skill = Skill(skill)
    cy = extent[2] + 0.35 * (extent[3] - extent[2])
    if skill is Skill.PICK:
        objects = (ObjectSpec.on_table("coke_can", Shape.CYLINDER, (0.033, 0.12), (0.80, 0.08, 0.10), 0.0, cy),)
        target, anchors = "coke_can", ()
    elif skill is Skill.MOVE:
        objects = (
            ObjectSpec.on_table("apple", Shape.SPHERE, (0.037,), (0.75, 0.12, 0.10), -0.08, cy),
            ObjectSpec.on_table("sponge", Shape.BOX, (0.115, 0.075, 0.045), (0.40, 0.75, 0.30), 0.10, cy),
        )
        target, anchors = "apple", ("sponge",)
    elif skill is Skill.STACK:
        objects = (
            ObjectSpec.on_table("green_block", Shape.BOX, (0.04, 0.04, 0.04), (0.20, 0.70, 0.25), -0.07, cy),
            ObjectSpec.on_table("yellow_block", Shape.BOX, (0.04, 0.04, 0.04), (0.95, 0.85, 0.20), 0.07, cy),
        )
        target, anchors = "green_block", ("yellow_block",)
    else:
        objects = (
            ObjectSpec.on_table("spoon", Shape.BOX, (0.20, 0.03, 0.015), (0.25, 0.45, 0.90), -0.15, cy),
            ObjectSpec.on_table("towel", Shape.BOX, (0.18, 0.18, 0.008), (0.92, 0.92, 0.95), 0.15, cy),
        )
        target, anchors = "spoon", ("towel",)
    robot, top = default_cameras(extent)
    return SceneSpec(extent, objects, target, robot, top, anchor_ids=anchors)


def instruction_for(skill: Skill | str) -> str:
    return _INSTRUCTIONS[Skill(skill)]


# --- generation ----------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    n_distractors_range: tuple[int, int] = (1, 12)
    delta_gap: float = 0.01
    max_occlusion: float = 0.5
    clearance: float = 0.04
    max_placement_attempts: int = 100
    seed: int = 0
    n_bins: int = 8
    per_bin: int = 10

    def __post_init__(self):
        object.__setattr__(self, "n_distractors_range", tuple(self.n_distractors_range))
        errors = self.validate()
        if errors:
            raise InvalidInputError("invalid generator config: " + "; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        rng = self.n_distractors_range
        if len(rng) != 2 or not all(isinstance(v, (int, np.integer)) for v in rng):
            errors.append(f"n_distractors_range must be two integers (got {rng!r})")
        elif rng[0] < 0 or rng[0] > rng[1]:
            errors.append(f"n_distractors_range must be a nonempty range of counts >= 0 (got {rng!r})")
        if not self.delta_gap >= 0:
            errors.append(f"delta_gap must be >= 0 (got {self.delta_gap!r})")
        if not 0 <= self.max_occlusion < 1:
            errors.append(f"max_occlusion must be in [0, 1) (got {self.max_occlusion!r})")
        if not self.clearance >= 0:
            errors.append(f"clearance must be >= 0 (got {self.clearance!r})")
        if not isinstance(self.max_placement_attempts, int) or self.max_placement_attempts < 1:
            errors.append(f"max_placement_attempts must be an integer >= 1 (got {self.max_placement_attempts!r})")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            errors.append(f"seed must be an integer in [0, 2**64) (got {self.seed!r})")
        if not isinstance(self.n_bins, int) or self.n_bins < 1:
            errors.append(f"n_bins must be an integer >= 1 (got {self.n_bins!r})")
        if not isinstance(self.per_bin, int) or self.per_bin < 1:
            errors.append(f"per_bin must be an integer >= 1 (got {self.per_bin!r})")
        return errors


@dataclass(frozen=True)
class ScenarioRecord:
    id: str
    skill: Skill
    instruction: str
    scene: SceneSpec
    n_distractors: int
    occlusion: float
    dvfc: float
    bin: int | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "skill": self.skill.value,
            "instruction": self.instruction,
            "n_distractors": self.n_distractors,
            "occlusion": self.occlusion,
            "dvfc": self.dvfc,
            "bin": self.bin,
            "scene": self.scene.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioRecord":
        return cls(
            id=_typed(d, "id", str),
            skill=Skill(_typed(d, "skill", str)),
            instruction=_typed(d, "instruction", str),
            scene=SceneSpec.from_dict(_typed(d, "scene", dict)),
            n_distractors=_typed(d, "n_distractors", int),
            occlusion=_number(d, "occlusion"),
            dvfc=_number(d, "dvfc"),
            bin=None if d.get("bin") is None else _typed(d, "bin", int),
        )


@dataclass(frozen=True)
class Rejection:
    """A scenario draw that failed a constraint; a normal outcome, not an error."""

    index: tuple[int, ...]
    reason: str  # "placement", "affordance" or "occlusion"
    detail: str = ""


def scenario_rng(seed: int, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, index)])))


def _as_index(index) -> tuple[int, ...]:
    return tuple(int(i) for i in index) if isinstance(index, (tuple, list)) else (int(index),)


def occlusion_from_labels(full_labels: np.ndarray, scene: SceneSpec, cam: CameraSpec) -> float:
    idx = [o.id for o in scene.objects].index(scene.target_id)
    isolated = np.count_nonzero(render_labels(scene, cam, (scene.objects[idx],)) == 0)
    if isolated == 0:
        from .errors import DegenerateSceneError

        raise DegenerateSceneError(f"target {scene.target_id!r} is outside the robot camera view")
    return 1.0 - np.count_nonzero(full_labels == idx) / isolated


def place_distractors(base: SceneSpec, entries: Sequence[CatalogEntry], cfg: GeneratorConfig, rng):
    """Rejection-sample a pose per entry; None if any entry cannot be placed."""
    xmin, xmax, ymin, ymax = base.table_extent
    placed = list(base.objects)
    for entry in entries:
        r = entry.bounding_radius
        if 2 * r > min(xmax - xmin, ymax - ymin):
            return None
        for _ in range(cfg.max_placement_attempts):
            x = rng.uniform(xmin + r, xmax - r)
            y = rng.uniform(ymin + r, ymax - r)
            yaw = rng.uniform(0.0, 2 * math.pi)
            cand = entry.place(x, y, yaw)
            if footprint_inside(cand, base.table_extent) and all(
                footprint_gap(cand, other) >= cfg.delta_gap for other in placed
            ):
                placed.append(cand)
                break
        else:
            return None
    return placed


def generate(
    base: SceneSpec,
    skill: Skill | str,
    catalog: DistractorCatalog,
    cfg: GeneratorConfig,
    seed: int | None = None,
    index=0,
    clutter_cfg: ClutterConfig | None = None,
    record_id: str | None = None,
) -> ScenarioRecord | Rejection:
    """Draw one cluttered scenario from ``base``; returns a Rejection when a constraint fails."""
    skill = Skill(skill)
    seed = cfg.seed if seed is None else seed
    index = _as_index(index)
    rng = scenario_rng(seed, *index)
    pool = catalog.excluding(base.task_ids)
    lo, hi = cfg.n_distractors_range
    if hi > len(pool):
        raise InvalidInputError(f"cannot draw {hi} distinct distractors from {len(pool)} catalog entries")
    n = int(rng.integers(lo, hi + 1))
    chosen = [pool.entries[i] for i in rng.choice(len(pool), size=n, replace=False)]

    placed = place_distractors(base, chosen, cfg, rng)
    if placed is None:
        return Rejection(index, "placement", f"could not place {n} distractors")
    scene = base.with_objects(placed)
    if not has_grasp_affordance(scene, scene.target_id, cfg.clearance):
        return Rejection(index, "affordance", "clearance cylinder around the target is blocked")
    robot_view = render(scene, scene.robot_cam)
    occ = occlusion_from_labels(robot_view.labels, scene, scene.robot_cam)
    if occ > cfg.max_occlusion:
        return Rejection(index, "occlusion", f"target occlusion {occ:.3f} > {cfg.max_occlusion}")
    top_view = render(scene, scene.top_cam)
    score = dvfc(robot_view.color, top_view.color, clutter_cfg)
    rid = record_id or f"{skill.value.lower()}-{seed}-" + "-".join(f"{i:05d}" for i in index)
    return ScenarioRecord(
        id=rid,
        skill=skill,
        instruction=instruction_for(skill),
        scene=scene,
        n_distractors=len(scene.distractors),
        occlusion=float(occ),
        dvfc=float(score.value),
        bin=None,
    )


def _generate_task(args):
    return generate(*args)


def _map(fn, items, workers) -> list:
    """Ordered map, in-process or over a bounded process pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=1))


@dataclass
class GenerationResult:
    records: list[ScenarioRecord]
    rejections: Counter = field(default_factory=Counter)
    attempts: int = 0


def generate_many(
    base: SceneSpec,
    skill: Skill | str,
    catalog: DistractorCatalog,
    cfg: GeneratorConfig,
    n_accepted: int,
    seed: int | None = None,
    clutter_cfg: ClutterConfig | None = None,
    max_attempts: int | None = None,
    workers: int = 1,
    stream: int = 0,
) -> GenerationResult:
    """Accepted scenarios from indices (stream, 0), (stream, 1), ... in index order.

    Output is identical for any ``workers`` value.
    """
    seed = cfg.seed if seed is None else seed
    max_attempts = max_attempts or max(50 * n_accepted, 100)
    result = GenerationResult([])
    batch = max(1, 4 * workers)
    start = 0
    while len(result.records) < n_accepted and start < max_attempts:
        stop = min(start + batch, max_attempts)
        tasks = [(base, skill, catalog, cfg, seed, (stream, i), clutter_cfg) for i in range(start, stop)]
        for out in _map(_generate_task, tasks, workers):
            result.attempts += 1
            if isinstance(out, Rejection):
                result.rejections[out.reason] += 1
            else:
                result.records.append(out)
                if len(result.records) == n_accepted:
                    break
        start = stop
    return result


def preset_real_world(
    cfg: GeneratorConfig | None = None,
    catalog: DistractorCatalog | None = None,
    seed: int | None = None,
    counts: Sequence[int] = REAL_WORLD_COUNTS,
    arrangements: int = REAL_WORLD_ARRANGEMENTS,
    skills: Sequence[Skill] = tuple(Skill),
    extent=(-0.6, 0.6, -0.45, 0.45),
    clutter_cfg: ClutterConfig | None = None,
    max_retries: int = 500,
    workers: int = 1,
) -> list[ScenarioRecord]:
    """Skill x distractor-count x arrangement grid (4 x 6 x 9 = 216 by default).

    The larger default table reflects the wider reach used with 16 distractors.
    Each cell keeps drawing from its own stream until a scenario is accepted.
    """
    cfg = cfg or GeneratorConfig()
    catalog = catalog or load_catalog()
    seed = cfg.seed if seed is None else seed
    records = []
    for s_i, skill in enumerate(skills):
        base = default_base_scene(skill, extent)
        for count in counts:
            cell_cfg = replace(cfg, n_distractors_range=(count, count))
            for k in range(arrangements):
                rid = f"real-{Skill(skill).value.lower()}-n{count:02d}-v{k}"
                for attempt in range(0, max_retries, max(1, workers)):
                    tasks = [
                        (base, skill, catalog, cell_cfg, seed, (s_i, count, k, a), clutter_cfg, rid)
                        for a in range(attempt, min(attempt + max(1, workers), max_retries))
                    ]
                    accepted = next((r for r in _map(_generate_task, tasks, workers) if isinstance(r, ScenarioRecord)), None)
                    if accepted is not None:
                        records.append(accepted)
                        break
                else:
                    raise RuntimeError(f"no acceptable arrangement for {rid} after {max_retries} draws")
    return records


# --- binning and sampling ----------------------------------------------------


def assign_bins(values: Sequence[float], n_bins: int, mode: str = "width") -> tuple[list[int], list[float]]:
    """Bin indices and edges; ``mode`` is "width" (equal-width) or "population" (equal-count)."""
    if n_bins < 1:
        raise InvalidInputError("n_bins must be >= 1")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return [], []
    lo, hi = float(v.min()), float(v.max())
    if mode == "width":
        if hi == lo:
            return [0] * len(v), [lo, hi]
        edges = [lo + (hi - lo) * k / n_bins for k in range(n_bins)] + [hi]
        idx = np.floor((v - lo) / (hi - lo) * n_bins).astype(int)
        return [int(i) for i in np.clip(idx, 0, n_bins - 1)], edges
    if mode == "population":
        order = np.argsort(v, kind="stable")
        bins = np.empty(len(v), dtype=int)
        bins[order] = (np.arange(len(v)) * n_bins) // len(v)
        edges = [float(v[order[(k * len(v)) // n_bins]]) for k in range(n_bins)] + [hi]
        return [int(b) for b in bins], edges
    raise InvalidInputError(f"unknown binning mode {mode!r}")


@dataclass
class SampleResult:
    records: list[ScenarioRecord]
    shortfall: dict[int, int]  # bin -> records missing to reach per_bin
    edges: list[float]
    populations: dict[int, int]

    @property
    def complete(self) -> bool:
        return not self.shortfall


def bin_and_sample(
    records: Sequence[ScenarioRecord],
    n_bins: int,
    per_bin: int,
    seed: int,
    mode: str = "width",
) -> SampleResult:
    """Bin by DvFC and draw ``per_bin`` records per bin without replacement."""
    records = list(records)
    if not records:
        raise InvalidInputError("bin_and_sample needs at least one record")
    if per_bin < 1:
        raise InvalidInputError("per_bin must be >= 1")
    bins, edges = assign_bins([r.dvfc for r in records], n_bins, mode)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)])))
    out, shortfall, populations = [], {}, {}
    for b in range(n_bins):
        members = [i for i, bi in enumerate(bins) if bi == b]
        populations[b] = len(members)
        if len(members) <= per_bin:
            picked = members
            if len(members) < per_bin:
                shortfall[b] = per_bin - len(members)
        else:
            picked = sorted(int(members[j]) for j in rng.choice(len(members), size=per_bin, replace=False))
        out.extend(replace(records[i], bin=b) for i in picked)
    return SampleResult(out, shortfall, edges, populations)


# --- persistence -------------------------------------------------------------


def _typed(d: dict, key: str, kind):
    if key not in d:
        raise InvalidInputError(f"missing field {key!r}")
    v = d[key]
    if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise InvalidInputError(f"field {key!r} must be an integer, got {v!r}")
    if not isinstance(v, kind):
        raise InvalidInputError(f"field {key!r} must be {kind.__name__}, got {v!r}")
    return v


def _number(d: dict, key: str) -> float:
    if key not in d:
        raise InvalidInputError(f"missing field {key!r}")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise InvalidInputError(f"field {key!r} must be a finite number, got {v!r}")
    return float(v)


def dumps_records(records: Iterable[ScenarioRecord]) -> str:
    records = list(records)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "count": len(records)}
    lines = [json.dumps(header)] + [json.dumps(r.to_dict(), separators=(",", ":")) for r in records]
    return "\n".join(lines) + "\n"


def persist(records: Iterable[ScenarioRecord], path) -> None:
    Path(path).write_text(dumps_records(records), encoding="utf-8")


def loads_records(text: str, path=None) -> list[ScenarioRecord]:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file, expected a header line", 1, path)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc.msg}", 1, path) from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ParseError(f"not a {FORMAT_NAME} file", 1, path)
    if header.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported version {header.get('version')!r}", 1, path)
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(ScenarioRecord.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno, path) from exc
        except (InvalidInputError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(str(exc), lineno, path) from exc
    if "count" in header and header["count"] != len(records):
        raise ParseError(f"header declares {header['count']} records, found {len(records)}", 1, path)
    return records


def load(path) -> list[ScenarioRecord]:
    return loads_records(Path(path).read_text(encoding="utf-8"), path)
