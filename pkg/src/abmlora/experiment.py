"""Config-driven experiments: single runs, init-scheme races and ablation grids.

Every run is a pure function of the resolved config, its scheme and its seed,
so runs can be farmed out to worker processes and merged in a fixed order.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .abm import AbmConfig, run_stage1
from .data import ScenarioSpec, build_scenario, eval_task, make_task
from .errors import ConfigError, ConsistencyError
from .lora import InitScheme, load_adapters, save_adapters
from .train import ProbeSchedule, TrainConfig, evaluate, fine_tune

SCHEME_ALIASES = {"vanilla": "kaiming_a_zero_b"}
PLAIN_SCHEMES = ("vanilla", "kaiming_a_zero_b", "orthogonal", "gaussian", "abm")
GRID_AXES = ("margin", "layer_selection", "weighting", "steps", "scope")
EARLY_STEPS = 20
LOSS_STEP = 10

RESULT_COLUMNS = [
    "scheme", "seed", "status", "message", "step10_loss", "final_loss", "final_acc",
    "early_total", "early_unavoidable", "early_reducible", "probes", "stage1_initial_loss",
    "stage1_final_loss", "stage1_initial_mismatch", "stage1_final_mismatch",
    "trainable_params", "expected_params", "w0_unchanged",
]
SUMMARY_METRICS = ("step10_loss", "final_loss", "final_acc", "early_total", "stage1_initial_mismatch",
                   "stage1_final_mismatch")


@dataclass
class AdapterSpec:
    rank: int = 4
    alpha: float = 8.0
    placement: list[str] | None = None

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("adapter.rank must be at least 1")
        if not self.alpha > 0:
            raise ConfigError("adapter.alpha must be positive")


@dataclass
class AbmBlock:
    """Stage-1 settings plus where the target signs and the starting factors come from."""

    config: AbmConfig
    reference: str = "base"
    start: str = "kaiming_a_zero_b"


@dataclass
class ProbeBlock:
    enabled: bool = True
    dense_steps: int = EARLY_STEPS
    every: int = 10
    layers: list[str] | None = None
    projection: str = "orthogonal"

    def __post_init__(self):
        if self.dense_steps < 0 or self.every < 0:
            raise ConfigError("probe.dense_steps and probe.every must be nonnegative")
        if self.projection not in ("orthogonal", "verbatim"):
            raise ConfigError("probe.projection must be orthogonal or verbatim")

    def schedule(self) -> ProbeSchedule | None:
        if not self.enabled:
            return None
        return ProbeSchedule(self.dense_steps, self.every, self.layers, self.projection)


@dataclass
class ExperimentConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    init: str = "vanilla"
    schemes: list[str] = field(default_factory=list)
    abm: AbmBlock | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    learning_rates: dict[str, float] = field(default_factory=dict)
    probe: ProbeBlock = field(default_factory=ProbeBlock)
    seeds: list[int] = field(default_factory=lambda: [0])
    output: str = "runs"
    grid: dict[str, list] = field(default_factory=dict)

    def lr_for(self, scheme: str) -> float:
        return self.learning_rates.get(scheme, self.train.learning_rate)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if self.abm is not None:
            abm = out.pop("abm")
            out["abm"] = {**abm["config"], "reference": abm["reference"], "start": abm["start"]}
        out["train"]["learning_rates"] = out.pop("learning_rates")
        return out


# -- parsing ----------------------------------------------------------------

def _coerce(value, annotation: str, path: str):
    kinds = [a.strip() for a in annotation.split("|")]
    if value is None:
        if "None" in kinds:
            return None
        raise ConfigError(f"{path}: must not be null")
    base = kinds[0]
    try:
        if base == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if base == "int":
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if base == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if base == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected {base}, got {value!r}") from None
    return value


def _section(cls, raw, path: str, skip=()):
    """Build dataclass ``cls`` from a mapping, naming the offending field on error."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown field; expected one of {sorted(known)}")
        kwargs[key] = _coerce(value, str(known[key].type), f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(path) else f"{path}: {msg}") from None


def _check_scheme(name, path: str) -> str:
    if not isinstance(name, str):
        raise ConfigError(f"{path}: expected a scheme name, got {name!r}")
    if name in PLAIN_SCHEMES:
        return name
    if name.startswith("from_checkpoint:") and len(name) > len("from_checkpoint:"):
        return name
    raise ConfigError(f"{path}: unknown scheme {name!r}; expected one of "
                      f"{list(PLAIN_SCHEMES)} or from_checkpoint:<path>")


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"learning_rates"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown top-level field; expected one of {sorted(allowed)}")
    scenario = _section(ScenarioSpec, raw.get("scenario"), "scenario")
    adapter = _section(AdapterSpec, raw.get("adapter"), "adapter")
    train_raw = raw.get("train") or {}
    if not isinstance(train_raw, dict):
        raise ConfigError("train: expected a mapping")
    train_raw = dict(train_raw)
    rates = train_raw.pop("learning_rates", None) or {}
    if not isinstance(rates, dict):
        raise ConfigError("train.learning_rates: expected a mapping of scheme to rate")
    train = _section(TrainConfig, train_raw, "train")
    learning_rates = {}
    for name, value in rates.items():
        _check_scheme(name, f"train.learning_rates.{name}")
        value = _coerce(value, "float", f"train.learning_rates.{name}")
        if not value > 0:
            raise ConfigError(f"train.learning_rates.{name}: must be positive")
        learning_rates[name] = value
    probe = _section(ProbeBlock, raw.get("probe"), "probe")

    init = _check_scheme(raw.get("init", "vanilla"), "init")
    schemes = raw.get("schemes") or []
    if not isinstance(schemes, list):
        raise ConfigError("schemes: expected a list")
    schemes = [_check_scheme(s, f"schemes[{i}]") for i, s in enumerate(schemes)]

    abm = None
    if raw.get("abm") is not None:
        block = raw["abm"]
        if not isinstance(block, dict):
            raise ConfigError("abm: expected a mapping")
        cfg = _section(AbmConfig, block, "abm", skip=("reference", "start"))
        reference = _coerce(block.get("reference", "base"), "str", "abm.reference")
        start = _coerce(block.get("start", "kaiming_a_zero_b"), "str", "abm.start")
        try:
            InitScheme.parse(SCHEME_ALIASES.get(start, start))
        except ConfigError as exc:
            raise ConfigError(f"abm.start: {exc}") from None
        if reference == "source" and scenario.source is None:
            raise ConfigError("scenario.source: required when abm.reference is 'source'")
        abm = AbmBlock(cfg, reference, start)
    if abm is None and ("abm" in schemes or init == "abm"):
        raise ConfigError("abm: block required when the abm init scheme is used")

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds: expected a nonempty list of integers")
    seeds = [_coerce(s, "int", f"seeds[{i}]") for i, s in enumerate(seeds)]
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicate entries")

    grid = raw.get("grid") or {}
    if not isinstance(grid, dict):
        raise ConfigError("grid: expected a mapping of axis to value list")
    for axis, values in grid.items():
        if axis not in GRID_AXES:
            raise ConfigError(f"grid.{axis}: unknown axis; expected one of {list(GRID_AXES)}")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.{axis}: expected a nonempty list")
    if grid and abm is None:
        raise ConfigError("abm: block required when a grid is given")
    output = _coerce(raw.get("output", "runs"), "str", "output")
    return ExperimentConfig(scenario, adapter, init, schemes, abm, train, learning_rates, probe,
                            seeds, output, grid)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(raw)


# -- single run -------------------------------------------------------------

def _tag(scheme: str) -> str:
    if scheme.startswith("from_checkpoint:"):
        return "from_checkpoint-" + Path(scheme.split(":", 1)[1]).stem
    return scheme


def _attach(model, cfg: ExperimentConfig, scheme: str, seed: int) -> None:
    ad = cfg.adapter
    placement = ad.placement or cfg.scenario.placement
    if scheme == "abm":
        scheme = cfg.abm.start
    if scheme.startswith("from_checkpoint:"):
        adapters = load_adapters(scheme.split(":", 1)[1])
        if placement is not None and sorted(adapters) != sorted(placement):
            raise ConfigError(f"checkpoint layers {sorted(adapters)} differ from placement {sorted(placement)}")
        model.set_adapters(adapters)
        return
    model.attach_adapters(ad.rank, ad.alpha, SCHEME_ALIASES.get(scheme, scheme), seed, placement)


def _blank_row(scheme: str, seed: int) -> dict:
    row = {c: None for c in RESULT_COLUMNS}
    row.update(scheme=scheme, seed=seed, status="ok", message="")
    return row


def source_adapter_model(base, cfg: ExperimentConfig):
    """Base plus a vanilla adapter trained on the scenario's source task.

    Trained once per scenario with the race's own training settings, seed
    ``scenario.model_seed`` and ``scenario.source_epochs`` epochs.
    """
    sc = cfg.scenario
    if sc.source is None:
        raise ConfigError("scenario.source: required when abm.reference is 'source'")
    task = make_task(sc.source, sc.dims, sc.num_classes)
    model = base.clone()
    model.attach_adapters(cfg.adapter.rank, cfg.adapter.alpha, "kaiming_a_zero_b", sc.model_seed,
                          cfg.adapter.placement or sc.placement)
    train_cfg = dataclasses.replace(cfg.train, epochs=sc.source_epochs, seed=sc.model_seed, max_steps=None)
    fine_tune(model, task, train_cfg)
    return model


def _reference(cfg: ExperimentConfig, source):
    ref = cfg.abm.reference
    if ref == "source":
        if source is None:
            raise ConfigError("abm.reference: source adapter was not built")
        return source
    return ref


def run_one(base, fine, held_out, cfg: ExperimentConfig, scheme: str, seed: int, run_dir,
            source=None) -> dict:
    """Stage 1 (for abm), Stage 2 and evaluation for one scheme and seed.

    Writes ``trace.csv``, ``layer_reports.csv``, ``adapters.ckpt`` and, for
    abm, ``stage1.csv`` under ``run_dir``. Failures are recorded in the row.
    """
    run_dir = Path(run_dir)
    row = _blank_row(scheme, seed)
    before = base.base_weights()
    model = base.clone()
    try:
        _attach(model, cfg, scheme, seed)
        row["trainable_params"] = model.trainable_parameter_count()
        row["expected_params"] = sum(ad.rank * (ad.d + ad.k) for ad in model.adapters().values())
        if scheme == "abm":
            _, s1 = run_stage1(model, _reference(cfg, source), fine.inputs, cfg.abm.config, seed)
            s1.write_csv(run_dir / "stage1.csv")
            row.update(stage1_initial_loss=s1.records[0].abm_loss, stage1_final_loss=s1.records[-1].abm_loss,
                       stage1_initial_mismatch=s1.records[0].mismatch_rate,
                       stage1_final_mismatch=s1.records[-1].mismatch_rate)
        train_cfg = dataclasses.replace(cfg.train, learning_rate=cfg.lr_for(scheme), seed=seed)
        _, trace = fine_tune(model, fine, train_cfg, cfg.probe.schedule())
        trace.write_csv(run_dir / "trace.csv")
        _write_layer_reports(run_dir / "layer_reports.csv", trace.layer_reports)
        save_adapters(run_dir / "adapters.ckpt", model.adapters(), {"scheme": scheme, "seed": seed})
        early = [r.info for r in trace.records if r.info is not None and r.step < EARLY_STEPS]
        row.update(
            step10_loss=trace.loss_at(LOSS_STEP) if len(trace.records) > LOSS_STEP else None,
            final_loss=trace.records[-1].train_loss,
            final_acc=evaluate(model, held_out),
            early_total=sum(r.total_discrepancy for r in early) if early else None,
            early_unavoidable=sum(r.unavoidable for r in early) if early else None,
            early_reducible=sum(r.reducible for r in early) if early else None,
            probes=sum(r.info is not None for r in trace.records),
        )
    except ConsistencyError as exc:
        row.update(status="consistency_error", message=str(exc))
    except ArithmeticError as exc:  # NumericalError and numpy floating-point errors
        row.update(status="numerical_error", message=str(exc))
    after = model.base_weights()
    row["w0_unchanged"] = all(np.array_equal(before[k], after[k]) for k in before)
    return row


def _write_layer_reports(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not rows:
            writer.writerow(["layer", "step"])
            return
        cols = list(rows[0])
        writer.writerow(cols)
        for r in rows:
            writer.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in r.values()])


# -- batches of runs --------------------------------------------------------

@dataclass
class Job:
    key: tuple
    cfg: ExperimentConfig
    scheme: str
    seed: int
    run_dir: str
    point: dict = field(default_factory=dict)


_SHARED: dict = {}


def _init_worker(shared) -> None:
    _SHARED.clear()
    _SHARED.update(shared)


def _execute(job: Job) -> dict:
    row = run_one(_SHARED["base"], _SHARED["fine"], _SHARED["eval"], job.cfg, job.scheme, job.seed,
                  job.run_dir, _SHARED["source"])
    return {**job.point, **row}


def execute(jobs: list[Job], cfg: ExperimentConfig, workers: int = 1, out: Path | None = None) -> list[dict]:
    """Run jobs in parallel or inline; results come back in job order."""
    base, _, fine = build_scenario(cfg.scenario)
    source = None
    if any(j.scheme == "abm" and j.cfg.abm.reference == "source" for j in jobs):
        source = source_adapter_model(base, cfg)
        if out is not None:
            save_adapters(Path(out) / "source_adapter.ckpt", source.adapters(), {"role": "reference"})
    shared = {"base": base, "fine": fine, "eval": eval_task(cfg.scenario, fine), "source": source}
    if workers <= 1 or len(jobs) <= 1:
        _init_worker(shared)
        return [_execute(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(shared,)) as pool:
        return list(pool.map(_execute, jobs))


def _race_jobs(cfg: ExperimentConfig, schemes: list[str], out: Path, prefix: str = "",
               point: dict | None = None) -> list[Job]:
    jobs = []
    for scheme in schemes:
        for seed in cfg.seeds:
            run_dir = out / "runs" / f"{prefix}{_tag(scheme)}_seed{seed}"
            jobs.append(Job((prefix, scheme, seed), cfg, scheme, seed, str(run_dir), dict(point or {})))
    return jobs


def grid_points(grid: dict[str, list]) -> list[dict]:
    axes = [a for a in GRID_AXES if a in grid]
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def _with_point(cfg: ExperimentConfig, point: dict) -> ExperimentConfig:
    if not point:
        return cfg
    new = copy.deepcopy(cfg)
    raw = {**dataclasses.asdict(new.abm.config), **point}
    new.abm.config = _section(AbmConfig, raw, "grid")
    return new


# -- summaries --------------------------------------------------------------

def mean_std(values) -> dict:
    vals = [float(v) for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.array(vals)
    std = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(np.mean(arr)), "std": std, "n": len(vals)}


def summarize(rows: list[dict], group_keys=("scheme",)) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(_plain(r.get(k)) for k in group_keys), []).append(r)
    out = []
    for key, members in groups.items():
        entry = dict(zip(group_keys, key))
        entry["runs"] = len(members)
        for metric in SUMMARY_METRICS:
            entry[metric] = mean_std(r[metric] for r in members)
        out.append(entry)
    return out


def paired_wins(rows: list[dict], challenger: str, baseline: str) -> dict:
    """Per-seed comparisons of ``challenger`` against ``baseline`` (lower is better)."""
    by = {(r["scheme"], r["seed"]): r for r in rows}
    seeds = sorted({r["seed"] for r in rows if r["scheme"] == challenger})
    out = {"challenger": challenger, "baseline": baseline, "seeds": len(seeds)}
    for metric in ("step10_loss", "early_total"):
        wins = 0
        for s in seeds:
            a, b = by.get((challenger, s)), by.get((baseline, s))
            if a and b and a[metric] is not None and b[metric] is not None and a[metric] < b[metric]:
                wins += 1
        out[f"{metric}_wins"] = wins
    return out


def _plain(v):
    return json.dumps(v) if isinstance(v, (list, dict)) else v


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, dict)):
        return json.dumps(v)
    return str(v)


def write_rows(path, rows: list[dict], columns: list[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(r.get(c)) for c in columns])


def read_rows(path) -> list[dict]:
    """Parse a results CSV back into typed rows."""
    def parse(col, v):
        if v == "":
            return None
        if v in ("true", "false"):
            return v == "true"
        if col in ("scheme", "status", "message", "weighting", "scope"):
            return v
        if col == "layer_selection":
            return json.loads(v) if v.startswith("[") else v
        try:
            return int(v)
        except ValueError:
            return float(v)
    with open(path, newline="") as fh:
        return [{k: parse(k, v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _finite(obj):
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def write_metrics(path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_finite(payload), sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n")


def _healthy(row: dict) -> bool:
    return (row["status"] == "ok" and bool(row["w0_unchanged"])
            and row["trainable_params"] == row["expected_params"])


@dataclass
class Outcome:
    rows: list[dict]
    metrics: dict
    out_dir: Path

    @property
    def ok(self) -> bool:
        return self.metrics["complete"]


def _finish(command: str, cfg: ExperimentConfig, rows: list[dict], out: Path, extra: dict) -> Outcome:
    complete = all(_healthy(r) for r in rows)
    failed = [{"scheme": r["scheme"], "seed": r["seed"], "status": r["status"], "message": r["message"]}
              for r in rows if not _healthy(r)]
    metrics = {"command": command, "complete": complete, "failed_runs": failed,
               "config": cfg.to_dict(), **extra}
    write_metrics(out / "metrics.json", metrics)
    marker = out / "INCOMPLETE"
    if complete:
        marker.unlink(missing_ok=True)
    else:
        marker.write_text("".join(f"{f['scheme']} seed {f['seed']}: {f['status']} {f['message']}\n"
                                  for f in failed))
    return Outcome(rows, metrics, out)


# -- commands ---------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out=None, workers: int = 1) -> Outcome:
    """One init scheme over every seed."""
    out = Path(out or cfg.output)
    rows = execute(_race_jobs(cfg, [cfg.init], out), cfg, workers, out)
    write_rows(out / "results.csv", rows, RESULT_COLUMNS)
    return _finish("run", cfg, rows, out, {"summary": summarize(rows)})


def race(cfg: ExperimentConfig, out=None, workers: int = 1) -> Outcome:
    """Every scheme on the same seeds; one result row per (scheme, seed)."""
    if len(cfg.schemes) < 2:
        raise ConfigError("schemes: a race needs at least two schemes")
    out = Path(out or cfg.output)
    rows = execute(_race_jobs(cfg, cfg.schemes, out), cfg, workers, out)
    write_rows(out / "race.csv", rows, RESULT_COLUMNS)
    summary = summarize(rows)
    write_table(out / "comparison.csv", summary)
    extra = {"summary": summary}
    base = next((s for s in cfg.schemes if s in ("vanilla", "kaiming_a_zero_b")), cfg.schemes[0])
    extra["wins"] = [paired_wins(rows, s, base) for s in cfg.schemes if s != base]
    return _finish("race", cfg, rows, out, extra)


def ablate(cfg: ExperimentConfig, out=None, workers: int = 1) -> Outcome:
    """Cartesian product of the grid axes, each point raced over the configured schemes."""
    if not cfg.grid:
        raise ConfigError("grid: ablate needs at least one axis")
    out = Path(out or cfg.output)
    schemes = cfg.schemes or ["abm"]
    points = grid_points(cfg.grid)
    jobs = []
    for i, point in enumerate(points):
        try:
            pcfg = _with_point(cfg, point)
        except ConfigError as exc:
            raise ConfigError(f"grid point {i} ({point}): {exc}") from None
        jobs += _race_jobs(pcfg, schemes, out, f"g{i:03d}_", point)
    rows = execute(jobs, cfg, workers, out)
    axes = [a for a in GRID_AXES if a in cfg.grid]
    write_rows(out / "ablation.csv", rows, axes + RESULT_COLUMNS)
    summary = summarize(rows, tuple(axes) + ("scheme",))
    return _finish("ablate", cfg, rows, out, {"axes": axes, "points": len(points), "summary": summary})


def write_table(path, summary: list[dict]) -> None:
    cols = ["scheme", "runs"]
    for m in SUMMARY_METRICS:
        cols += [f"{m}_mean", f"{m}_std"]
    flat = []
    for e in summary:
        row = {"scheme": e["scheme"], "runs": e["runs"]}
        for m in SUMMARY_METRICS:
            row[f"{m}_mean"], row[f"{m}_std"] = e[m]["mean"], e[m]["std"]
        flat.append(row)
    write_rows(path, flat, cols)


def format_table(summary: list[dict]) -> str:
    head = f"{'scheme':<18}{'step10_loss':>22}{'final_acc':>20}{'early_total':>24}"
    lines = [head, "-" * len(head)]
    for e in summary:
        def cell(m, width, fmt):
            s = e[m]
            if s["mean"] is None:
                return f"{'-':>{width}}"
            return f"{format(s['mean'], fmt) + ' ± ' + format(s['std'], fmt):>{width}}"
        lines.append(f"{str(e['scheme']):<18}{cell('step10_loss', 22, '.5f')}"
                     f"{cell('final_acc', 20, '.4f')}{cell('early_total', 24, '.4e')}")
    return "\n".join(lines)


__all__ = ["ExperimentConfig", "AbmBlock", "AdapterSpec", "ProbeBlock", "parse_config", "load_config",
           "run_one", "run_experiment", "race", "ablate", "grid_points", "summarize", "paired_wins",
           "read_rows", "format_table"]
