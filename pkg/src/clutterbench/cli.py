"""Command-line entry point: score, render, generate, sample, evaluate, report.

Settings resolve as defaults < ``--config`` JSON file < ``CLUTTERBENCH_*``
environment variables < command-line flags.  Batch commands write their
outputs plus a ``manifest.json`` into ``--out-dir``.

Exit codes: 0 success, 1 runtime failure, 2 usage, config or missing-input error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
from pathlib import Path

from . import __version__
from .clutter import ClutterConfig, dvfc, feature_congestion
from .errors import DegenerateSceneError, InvalidInputError, ParseError
from .evalcore import (
    DEFAULT_D_REACH,
    ER_CONVENTION,
    PolicyRow,
    agreement,
    classify_all,
    compute_metrics,
    curves_csv,
    read_logs,
    reach_failure_distribution,
    table_csv,
    table_markdown,
)
from .imgproc import read_image
from .scene import load_scene, render, save_render
from .scenario import (
    GeneratorConfig,
    Skill,
    bin_and_sample,
    default_base_scene,
    dumps_records,
    generate_many,
    load,
    load_catalog,
    preset_real_world,
)

ENV_PREFIX = "CLUTTERBENCH_"
MANIFEST = "manifest.json"
EXTRA_DEFAULTS = {"d_reach": DEFAULT_D_REACH, "binning": "width"}


class UsageError(Exception):
    """Bad flags, config values or missing inputs (exit code 2)."""


def _field_defaults() -> dict:
    out = {}
    for cls in (ClutterConfig, GeneratorConfig):
        for f in dataclasses.fields(cls):
            out[f.name] = f.default
    out.update(EXTRA_DEFAULTS)
    return out


FIELD_DEFAULTS = _field_defaults()
CLUTTER_FIELDS = tuple(f.name for f in dataclasses.fields(ClutterConfig))
GENERATOR_FIELDS = tuple(f.name for f in dataclasses.fields(GeneratorConfig))


def _coerce(name, value, errors):
    """Convert a raw value to the type of the field's default."""
    default = FIELD_DEFAULTS[name]
    try:
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = json.loads(value) if value.strip().startswith("[") else value.replace(",", " ").split()
            kind = type(default[0])
            return tuple(_scalar(kind, v) for v in value)
        return _scalar(type(default), value)
    except (TypeError, ValueError):
        errors.append(f"{name}: cannot interpret {value!r} as {type(default).__name__}")
        return None


def _scalar(kind, v):
    if kind is bool or isinstance(v, bool):
        raise TypeError
    if kind is int:
        f = float(v)
        if not f.is_integer():
            raise ValueError
        return int(f)
    if kind is float:
        return float(v)
    return str(v)


def resolve_settings(args, names) -> tuple[dict, list[str]]:
    """Layer defaults, config file, environment and flags for the given fields."""
    errors = []
    values = {n: FIELD_DEFAULTS[n] for n in names}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc.msg} (line {exc.lineno})") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        for key in sorted(set(data) - set(FIELD_DEFAULTS)):
            errors.append(f"{key}: unknown config field in {path}")
        for key in names:
            if key in data:
                values[key] = _coerce(key, data[key], errors)
    for key in names:
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            values[key] = _coerce(key, env, errors)
    for key in names:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = _coerce(key, flag, errors)
    return values, errors


def build_configs(args, want_clutter=True, want_generator=False, extra=()):
    names = (CLUTTER_FIELDS if want_clutter else ()) + (GENERATOR_FIELDS if want_generator else ()) + tuple(extra)
    values, errors = resolve_settings(args, names)
    clutter_cfg = gen_cfg = None
    if not errors:
        if want_clutter:
            try:
                clutter_cfg = ClutterConfig(**{k: values[k] for k in CLUTTER_FIELDS})
            except InvalidInputError as exc:
                errors.append(str(exc))
        if want_generator:
            try:
                gen_cfg = GeneratorConfig(**{k: values[k] for k in GENERATOR_FIELDS})
            except InvalidInputError as exc:
                errors.append(str(exc))
        if "d_reach" in values and not values["d_reach"] >= 0:
            errors.append(f"d_reach must be >= 0 (got {values['d_reach']!r})")
        if "binning" in values and values["binning"] not in ("width", "population"):
            errors.append(f"binning must be 'width' or 'population' (got {values['binning']!r})")
    if errors:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(errors))
    return values, clutter_cfg, gen_cfg


# --- manifest and outputs ------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_ready(v):
    if isinstance(v, tuple):
        return [_json_ready(x) for x in v]
    if isinstance(v, dict):
        return {k: _json_ready(x) for k, x in v.items()}
    return v


class Outputs:
    """Collects files written to an output directory and writes the manifest."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.names: list[str] = []

    def write_text(self, name, text):
        (self.dir / name).write_text(text, encoding="utf-8", newline="\n")
        self.names.append(name)

    def add(self, name):
        self.names.append(name)

    def manifest(self, command, config, seed, inputs, stats=None):
        doc = {
            "tool": "clutterbench",
            "version": __version__,
            "command": command,
            "config": _json_ready(config),
            "seed": seed,
            "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in inputs],
            "outputs": [{"path": n, "sha256": sha256_file(self.dir / n)} for n in sorted(self.names)],
        }
        if stats is not None:
            doc["stats"] = _json_ready(stats)
        (self.dir / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(paths):
    for p in paths:
        if not Path(p).is_file():
            raise UsageError(f"input not found: {p}")


# --- subcommands ----------------------------------------------------------------

_SCENE_SUFFIXES = {".json"}


def _score_record(path, cfg):
    if Path(path).suffix.lower() in _SCENE_SUFFIXES:
        scene = load_scene(path)
        score = dvfc(render(scene, scene.robot_cam).color, render(scene, scene.top_cam).color, cfg)
        return {
            "input": str(path),
            "kind": "scene",
            "n_distractors": len(scene.distractors),
            "dvfc": score.value,
            "robot_view": score.robot_view.total,
            "top_view": score.top_view.total,
        }
    s = feature_congestion(read_image(path), cfg)
    return {"input": str(path), "kind": "image", "total": s.total, "color": s.color, "contrast": s.contrast, "orient": s.orient}


def cmd_score(args) -> int:
    values, cfg, _ = build_configs(args)
    _require(args.inputs)
    lines = "".join(json.dumps(_score_record(p, cfg), sort_keys=True) + "\n" for p in args.inputs)
    if args.out_dir:
        out = Outputs(args.out_dir)
        out.write_text("scores.jsonl", lines)
        out.manifest("score", values, None, args.inputs)
    else:
        sys.stdout.write(lines)
    return 0


def cmd_render(args) -> int:
    _require([args.scene])
    scene = load_scene(args.scene)
    out = Outputs(args.out_dir)
    for name, cam in (("robot", scene.robot_cam), ("top", scene.top_cam)):
        save_render(render(scene, cam), out.dir / f"{name}.ppm")
        out.add(f"{name}.ppm")
    out.manifest("render", {}, None, [args.scene])
    return 0


def cmd_generate(args) -> int:
    values, clutter_cfg, gen_cfg = build_configs(args, want_generator=True)
    catalog = load_catalog(args.catalog) if args.catalog else load_catalog()
    inputs = [args.catalog] if args.catalog else []
    stats = {}
    if args.preset == "real-world":
        records = preset_real_world(gen_cfg, catalog, clutter_cfg=clutter_cfg, workers=args.workers)
        stats["preset"] = "real-world"
    else:
        if args.base:
            _require([args.base])
            inputs.append(args.base)
            base = load_scene(args.base)
            skills = [Skill(args.skill or "PICK")]
        else:
            skills = list(Skill) if (args.skill or "ALL") == "ALL" else [Skill(args.skill)]
        records = []
        for s_i, skill in enumerate(skills):
            b = base if args.base else default_base_scene(skill)
            res = generate_many(b, skill, catalog, gen_cfg, args.count, clutter_cfg=clutter_cfg, workers=args.workers, stream=s_i)
            records.extend(res.records)
            stats[skill.value] = {"accepted": len(res.records), "attempts": res.attempts, "rejections": dict(sorted(res.rejections.items()))}
            if len(res.records) < args.count:
                print(f"warning: {skill.value}: only {len(res.records)} of {args.count} accepted", file=sys.stderr)
    out = Outputs(args.out_dir)
    out.write_text("scenarios.jsonl", dumps_records(records))
    config = dict(values, count=args.count, skill=args.skill, preset=args.preset)
    out.manifest("generate", config, gen_cfg.seed, inputs, stats)
    return 0


def cmd_sample(args) -> int:
    values, _, _ = build_configs(args, want_clutter=False, extra=("n_bins", "per_bin", "seed", "binning"))
    errors = [f"{k} must be >= 1 (got {values[k]})" for k in ("n_bins", "per_bin") if values[k] < 1]
    if errors:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(errors))
    _require([args.scenarios])
    records = load(args.scenarios)
    if not records:
        raise InvalidInputError(f"{args.scenarios}: no scenarios to sample")
    result = bin_and_sample(records, values["n_bins"], values["per_bin"], values["seed"], values["binning"])
    out = Outputs(args.out_dir)
    out.write_text("sampled.jsonl", dumps_records(result.records))
    stats = {
        "edges": result.edges,
        "populations": {str(k): v for k, v in result.populations.items()},
        "shortfall": {str(k): v for k, v in result.shortfall.items()},
        "sampled": len(result.records),
    }
    if result.shortfall:
        print(f"warning: bins short of per_bin: {stats['shortfall']}", file=sys.stderr)
    out.manifest("sample", values, values["seed"], [args.scenarios], stats)
    return 0


def _load_eval_inputs(args):
    _require([args.scenarios, *args.logs])
    scenarios = {r.id: r for r in load(args.scenarios)}
    logs = [log for p in args.logs for log in read_logs(p)]
    if not logs:
        raise InvalidInputError("no episodes in the given logs")
    return scenarios, logs


def _by_policy(outcomes):
    groups = {}
    for o in outcomes:
        groups.setdefault(o.policy_id, []).append(o)
    return groups


def cmd_evaluate(args) -> int:
    values, _, _ = build_configs(args, want_clutter=False, extra=("d_reach", "n_bins"))
    scenarios, logs = _load_eval_inputs(args)
    outcomes = classify_all(logs, scenarios, values["d_reach"])
    out = Outputs(args.out_dir)
    buf = io.StringIO()
    rows = [o.to_row() for o in outcomes]
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out.write_text("outcomes.csv", buf.getvalue())

    metrics, curves = {}, []
    for policy, group in _by_policy(outcomes).items():
        report = compute_metrics(group, scenarios, values["n_bins"])
        doc = report.to_dict()
        reach = reach_failure_distribution(group)
        doc["reach_failures"] = {
            "entries": [[sid, d if d != float("inf") else None] for sid, d in reach.entries],
            "median": reach.median,
            "p90": reach.p90,
            "dispersed": reach.dispersed,
        }
        metrics[policy] = doc
        curves.append(curves_csv(report, policy))
    out.write_text("metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    out.write_text("curves.csv", curves[0] + "".join(c.split("\n", 1)[1] for c in curves[1:]))
    out.manifest("evaluate", values, None, [args.scenarios, *args.logs])
    return 0


def cmd_report(args) -> int:
    values, _, _ = build_configs(args, want_clutter=False, extra=("d_reach", "n_bins"))
    out_stats = {"er_convention": ER_CONVENTION}
    if args.aggregates:
        _require([args.aggregates])
        try:
            data = json.loads(Path(args.aggregates).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno, args.aggregates) from exc
        if isinstance(data, dict):
            data = data.get("rows", data)
        if not isinstance(data, list):
            raise ParseError("aggregates must be a list of rows or {\"rows\": [...]}", 1, args.aggregates)
        rows = [PolicyRow.from_dict(r) for r in data]
        inputs = [args.aggregates]
    else:
        if not args.scenarios or not args.logs:
            raise UsageError("report needs --aggregates, or --scenarios with --logs")
        scenarios, logs = _load_eval_inputs(args)
        inputs = [args.scenarios, *args.logs]
        groups = _by_policy(classify_all(logs, scenarios, values["d_reach"]))
        base_groups = {}
        if args.base_logs:
            _require([args.base_logs])
            inputs.append(args.base_logs)
            base_groups = _by_policy(classify_all(read_logs(args.base_logs), scenarios, values["d_reach"]))
        rows = []
        for policy, group in groups.items():
            base = compute_metrics(base_groups[policy]) if policy in base_groups else None
            rows.append(PolicyRow.from_metrics(policy, compute_metrics(group, scenarios, values["n_bins"]), base))
        if len(groups) >= 2:
            ag = agreement({p: {o.scenario_id for o in g if o.success} for p, g in groups.items()}, len(scenarios))
            out_stats["agreement"] = {
                "union_sr": ag.union_sr,
                "regions": {"+".join(sorted(k)): v for k, v in ag.regions.items()},
            }
    out = Outputs(args.out_dir)
    out.write_text("table.csv", table_csv(rows))
    out.write_text("table.md", table_markdown(rows))
    out.manifest("report", values, None, inputs, out_stats)
    if not args.quiet:
        sys.stdout.write(table_csv(rows))
    return 0


# --- parser -------------------------------------------------------------------------


def _add_field_flags(p, names):
    for name in names:
        default = FIELD_DEFAULTS[name]
        flag = "--" + name.replace("_", "-")
        if isinstance(default, tuple):
            p.add_argument(flag, dest=name, nargs=len(default), type=type(default[0]), default=None, metavar="V")
        else:
            p.add_argument(flag, dest=name, type=type(default), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clutterbench", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of field defaults")

    p = sub.add_parser("score", help="clutter of images (.ppm/.png) or DvFC of scene files (.json)")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out-dir")
    common(p)
    _add_field_flags(p, CLUTTER_FIELDS)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("render", help="render robot and top views of a scene file")
    p.add_argument("scene")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("generate", help="generate cluttered scenarios")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--skill", choices=[s.value for s in Skill] + ["ALL"])
    p.add_argument("--count", type=int, default=10, help="accepted scenarios per skill")
    p.add_argument("--base", help="base scene file (uses its target; one skill)")
    p.add_argument("--catalog", help="distractor catalog CSV")
    p.add_argument("--preset", choices=["real-world"])
    p.add_argument("--workers", type=int, default=1)
    common(p)
    _add_field_flags(p, GENERATOR_FIELDS + CLUTTER_FIELDS)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sample", help="bin scenarios by DvFC and sample per bin")
    p.add_argument("scenarios")
    p.add_argument("--out-dir", required=True)
    common(p)
    _add_field_flags(p, ("n_bins", "per_bin", "seed", "binning"))
    p.set_defaults(func=cmd_sample)

    for name, func, help_ in (
        ("evaluate", cmd_evaluate, "classify episode logs and compute metrics and curves"),
        ("report", cmd_report, "policy table from logs or from aggregate rows"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--scenarios", required=name == "evaluate")
        p.add_argument("--logs", nargs="+", required=name == "evaluate", default=[])
        p.add_argument("--out-dir", required=True)
        if name == "report":
            p.add_argument("--aggregates", help="JSON list of table rows")
            p.add_argument("--base-logs", help="episode logs on the base scenarios (fills SR_base)")
            p.add_argument("--quiet", action="store_true")
        common(p)
        _add_field_flags(p, ("d_reach", "n_bins"))
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    if getattr(args, "count", 1) < 1:
        parser.error("--count must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"clutterbench {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ParseError, InvalidInputError, DegenerateSceneError, OSError, RuntimeError) as exc:
        print(f"clutterbench {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
