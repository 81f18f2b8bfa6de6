"""Stage implementations behind the command line.

Every stage reads and writes fixed file names inside one working directory
and leaves ``<stage>_manifest.json`` next to its outputs.  Inputs produced by
an earlier stage are checked against that stage's manifest before use.
"""
import logging
import platform
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import io
from ._jit import USE_NUMBA
from .config import PipelineConfig, with_train_seed
from .dataset import EVAL_INDEX, EVAL_LEVELS, WindowCorpus, validation_windows
from .forecast import dense_quantiles, forecast_vac
from .obs import realize_tc, realize_vac
from .rng import derive_seed, substream
from .scoring import build_records, persistence_table, score_records
from .bootstrap import bootstrap
from .sim import LHS_BOUNDS, RunStatus, lhs_sample, replicate_sweep
from .training import Checkpoint, train, write_history

log = logging.getLogger(__name__)

DESIGN = "design.csv"
SIM_SERIES = "sim_series.csv"
RUNS = "runs.json"
AUGMENTED = "augmented.csv"
CORPUS = "corpus_manifest.json"
CHECKPOINT = "checkpoint.vckpt"
TRAIN_LOG = "train_log.csv"
TRUTH = "truth.csv"
FORECASTS = "forecasts"
SCORES = "scores.csv"
BOOTSTRAP = "bootstrap.csv"
BOOTSTRAP_CI = "bootstrap_ci.csv"

STAGES = ("simulate", "augment", "train", "forecast", "score", "bootstrap")

MODEL_TC = "qt-tc"
MODEL_VAC = "qt-vac"


class StageError(Exception):
    exit_code = 1


class MissingInput(StageError):
    exit_code = 3


class NumericFailure(StageError):
    exit_code = 4


class WallTimeExhausted(StageError):
    exit_code = 5


class ChecksumMismatch(StageError):
    exit_code = 6


def versions():
    import numba

    return {
        "varcast": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "pandas": pd.__version__,
        "numba_enabled": USE_NUMBA,
    }


def _require(path: Path):
    if not path.exists():
        raise MissingInput(f"missing input: {path}")
    return path


def _verify(workdir: Path, stage: str, files):
    """Compare files against the hashes recorded by ``stage`` (if it left a manifest)."""
    mpath = workdir / f"{stage}_manifest.json"
    if not mpath.exists():
        log.warning("no %s manifest in %s; inputs are not checksum-verified", stage, workdir)
        return
    recorded = io.read_json(mpath)["outputs"]
    for f in files:
        rel = _rel(workdir, f)
        if rel not in recorded:
            continue
        if io.sha256(f) != recorded[rel]:
            raise ChecksumMismatch(f"checksum mismatch: {f} differs from the {stage} manifest")


def _rel(workdir: Path, f):
    try:
        return str(Path(f).relative_to(workdir))
    except ValueError:
        return str(Path(f).resolve())


def _hashes(workdir: Path, files):
    return {_rel(workdir, f): io.sha256(f) for f in sorted(files, key=str)}


def _manifest(workdir, stage, cfg: PipelineConfig, seeds, inputs, outputs, summary=None):
    man = {
        "stage": stage,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "master_seed": cfg.master_seed,
        "seeds": seeds,
        "inputs": _hashes(workdir, inputs),
        "outputs": _hashes(workdir, outputs),
        "versions": versions(),
        "summary": summary or {},
    }
    io.write_json(man, workdir / f"{stage}_manifest.json")
    return man


# -- simulate ---------------------------------------------------------------

def simulate(cfg: PipelineConfig, workdir: Path):
    workdir.mkdir(parents=True, exist_ok=True)
    seeds = {"design": derive_seed(cfg.master_seed, "lhs-design"), "sim": derive_seed(cfg.master_seed, "sim"),
             "split": derive_seed(cfg.master_seed, "eval-split")}
    design = lhs_sample(LHS_BOUNDS, cfg.sim.design_size, seeds["design"])
    fixed = {"end_day": cfg.sim.end_day}
    screen, reps = replicate_sweep(design, cfg.sim.reps_per_keeper, cfg.sim.wall_budget,
                                   master_seed=seeds["sim"], fixed=fixed, w_min=cfg.sim.w_min)
    statuses = [o.status for o in screen + reps]
    n_wall = sum(s is RunStatus.WALL_TIME_EXCEEDED for s in statuses)
    usable = [o for o in reps if o.status is RunStatus.COMPLETED]
    fallback = False
    if not usable:
        usable = [o for o in screen if o.status is RunStatus.COMPLETED]
        fallback = bool(usable)
        if fallback:
            log.warning("no design point showed antigenic turnover; using all completed screening runs")
    if n_wall:
        log.warning("%d of %d runs hit the %.0f s wall-time budget", n_wall, len(statuses), cfg.sim.wall_budget)
    if not usable:
        if n_wall:
            raise WallTimeExhausted(f"all usable runs exhausted the wall-time budget ({n_wall} runs cut)")
        raise NumericFailure("no simulation completed")
    if len(usable) <= cfg.sim.eval_locations:
        raise NumericFailure(f"only {len(usable)} usable runs; need more than sim.eval_locations="
                             f"{cfg.sim.eval_locations} to keep a training set")

    usable_ids = {o.series_id for o in usable}
    order = np.random.default_rng(seeds["split"]).permutation(len(usable))
    eval_ids = {usable[i].series_id for i in order[: cfg.sim.eval_locations]}

    series = []
    for o in usable:
        series.append(o.tc)
        series.extend(o.vacs[v] for v in sorted(o.vacs))
    io.write_design(design, workdir / DESIGN)
    io.write_series(series, workdir / SIM_SERIES)
    runs = {
        "runs": [{
            "series_id": o.series_id, "param_index": o.param_index, "replicate": o.replicate, "seed": o.seed,
            "status": o.status.value, "turnover": bool(o.turnover_flag), "days_simulated": o.days_simulated,
            "n_variants": len(o.vacs), "role": ("eval" if o.series_id in eval_ids else "train")
            if o.series_id in usable_ids else "unused", "params": o.params.sampled(),
        } for o in screen + reps],
        "fallback_to_screen": fallback,
    }
    io.write_json(runs, workdir / RUNS)
    summary = {
        "screened": len(screen), "replicates": len(reps), "usable": len(usable), "wall_time_exceeded": n_wall,
        "extinct": sum(s is RunStatus.EXTINCT for s in statuses),
        "turnover_keepers": len({o.param_index for o in reps}),
        "wall_seconds": {o.series_id: round(o.wall_time, 3) for o in screen + reps},
    }
    return _manifest(workdir, "simulate", cfg, seeds, [], [workdir / DESIGN, workdir / SIM_SERIES, workdir / RUNS],
                     summary)


def _load_sim(workdir: Path):
    paths = [_require(workdir / SIM_SERIES), _require(workdir / RUNS)]
    _verify(workdir, "simulate", paths)
    try:
        series = io.read_series(paths[0])
    except (io.SchemaError, ValueError) as exc:
        raise NumericFailure(f"{paths[0]}: {exc}") from None
    runs = io.read_json(paths[1])["runs"]
    roles = {r["series_id"]: r["role"] for r in runs}
    by_run = {}
    for s in series:
        entry = by_run.setdefault(s.series_id, {"tc": None, "vacs": []})
        if s.kind == "tc":
            entry["tc"] = s
        else:
            entry["vacs"].append(s)
    for sid, entry in by_run.items():
        if entry["tc"] is None:
            raise NumericFailure(f"{paths[0]}: run {sid} has no total-cases series")
    return by_run, roles, paths


# -- augment ----------------------------------------------------------------

def augment(cfg: PipelineConfig, workdir: Path):
    by_run, roles, inputs = _load_sim(workdir)
    out = []
    for sid in sorted(by_run):
        if roles.get(sid) != "train":
            continue
        rng = substream(cfg.master_seed, "obs", sid)
        out.extend(realize_tc(by_run[sid]["tc"], rng, cfg.obs))
        if cfg.data.include_vac:
            out.extend(realize_vac(by_run[sid]["vacs"], rng, cfg.obs))
    if not out:
        raise NumericFailure("no training runs to augment")
    io.write_series(out, workdir / AUGMENTED, augmented=True)
    corpus = WindowCorpus(out, cfg.data.context, cfg.data.horizon)
    io.write_json({"series": corpus.manifest(), "total_windows": corpus.total}, workdir / CORPUS)
    summary = {"series": len(out), "windows": corpus.total,
               "tc_series": sum(s.kind == "tc" for s in out), "vac_series": sum(s.kind == "vac" for s in out)}
    return _manifest(workdir, "augment", cfg, {"obs": "substream(master, 'obs', series_id)"}, inputs,
                     [workdir / AUGMENTED, workdir / CORPUS], summary)


# -- train ------------------------------------------------------------------

def train_stage(cfg: PipelineConfig, workdir: Path):
    path = _require(workdir / AUGMENTED)
    _verify(workdir, "augment", [path])
    try:
        series = io.read_series(path, augmented=True)
    except (io.SchemaError, ValueError) as exc:
        raise NumericFailure(f"{path}: {exc}") from None
    # split by simulator run so realizations of one epidemic never straddle train and validation
    runs = sorted({s.series_id for s in series})
    seeds = {"split": derive_seed(cfg.master_seed, "val-split"), "val": derive_seed(cfg.master_seed, "val"),
             "train": derive_seed(cfg.master_seed, "train")}
    rng = np.random.default_rng(seeds["split"])
    if len(runs) >= 2:
        n_val = min(len(runs) - 1, max(1, int(round(cfg.data.val_fraction * len(runs)))))
        val_runs = set(rng.permutation(runs)[:n_val].tolist())
        tr = [s for s in series if s.series_id not in val_runs]
        va = [s for s in series if s.series_id in val_runs]
    else:
        log.warning("a single training run: validation windows come from the same epidemic")
        tr = va = series
    corpus = WindowCorpus(tr, cfg.data.context, cfg.data.horizon)
    val_corpus = WindowCorpus(va, cfg.data.context, cfg.data.horizon)
    if corpus.total == 0 or val_corpus.total == 0:
        raise NumericFailure("no complete windows for training or validation")
    val_batch = validation_windows(val_corpus, cfg.data.val_windows, seeds["val"])
    tcfg = with_train_seed(cfg.train, seeds["train"])
    result = train(corpus, val_batch, cfg.model, tcfg)
    result.checkpoint.meta["config_hash"] = cfg.hash()
    result.checkpoint.save(workdir / CHECKPOINT)
    write_history(result.history, workdir / TRAIN_LOG)
    summary = {"train_series": len(tr), "val_series": len(va), "train_windows": corpus.total,
               "initial_val_loss": result.initial_val_loss, "best_val_loss": result.checkpoint.val_loss,
               "best_update": result.checkpoint.update, "diverged": result.diverged, "message": result.message}
    man = _manifest(workdir, "train", cfg, seeds, [path], [workdir / CHECKPOINT, workdir / TRAIN_LOG], summary)
    if result.diverged:
        raise NumericFailure(f"training diverged: {result.message} (best checkpoint kept)")
    return man


# -- forecast ---------------------------------------------------------------

def forecast_dates(cfg: PipelineConfig, n_weeks: int):
    h, c = cfg.data.horizon, cfg.data.context
    last = n_weeks - 1 - h if cfg.forecast.last_date < 0 else cfg.forecast.last_date
    first = last - cfg.forecast.n_dates + 1
    if first < c - 1 or last + h > n_weeks - 1:
        raise NumericFailure(f"forecast dates {first}..{last} do not fit series of {n_weeks} weeks "
                             f"with context {c} and horizon {h}")
    return np.arange(first, last + 1)


def _load_checkpoint(workdir):
    path = _require(workdir / CHECKPOINT)
    _verify(workdir, "train", [path])
    try:
        return Checkpoint.load(path), path
    except (ValueError, KeyError, TypeError) as exc:
        raise ChecksumMismatch(f"unreadable checkpoint: {exc}") from None


def _as_forecast_rows(loc, date, values):
    return io.forecast_frame(loc, date, EVAL_LEVELS, values)


def forecast(cfg: PipelineConfig, workdir: Path):
    ckpt, ckpt_path = _load_checkpoint(workdir)
    by_run, roles, inputs = _load_sim(workdir)
    locs = sorted(sid for sid in by_run if roles.get(sid) == "eval")
    if not locs:
        raise MissingInput(f"{workdir / RUNS} lists no evaluation runs")
    c, h = cfg.data.context, cfg.data.horizon
    if (ckpt.model_cfg.context, ckpt.model_cfg.horizon) != (c, h):
        raise NumericFailure("checkpoint context/horizon do not match the data config")
    n_weeks = min(len(by_run[l]["tc"]) for l in locs)
    dates = forecast_dates(cfg, n_weeks)

    truth = pd.concat([pd.DataFrame({"location": l, "week": np.arange(len(by_run[l]["tc"])),
                                     "value": by_run[l]["tc"].values}) for l in locs], ignore_index=True)
    io.write_truth(truth, workdir / TRUTH)

    fdir = workdir / FORECASTS
    fdir.mkdir(exist_ok=True)
    # total-cases model: one batched forward pass over every (location, date)
    ctx = np.stack([by_run[l]["tc"].values[d - c + 1:d + 1] for l in locs for d in dates])
    dense = dense_quantiles(ckpt, ctx)[:, :, EVAL_INDEX]
    frames, k = [], 0
    for l in locs:
        for d in dates:
            frames.append(_as_forecast_rows(l, d, dense[k]))
            k += 1
    io.write_forecasts(pd.concat(frames, ignore_index=True), fdir / f"{MODEL_TC}.csv")

    # variant-attributable model
    frames = []
    for l in locs:
        vmat = np.stack([v.values for v in by_run[l]["vacs"]]) if by_run[l]["vacs"] else np.zeros((0, n_weeks))
        for d in dates:
            window = vmat[:, d - c + 1:d + 1]
            active = window[np.any(window > 0, axis=1)]
            if active.shape[0] == 0:
                active = np.zeros((1, c))
            fc = forecast_vac(ckpt, active, n_draws=cfg.forecast.n_draws,
                              seed=derive_seed(cfg.master_seed, "vac-mc", l, int(d)))
            frames.append(_as_forecast_rows(l, d, fc.values))
    io.write_forecasts(pd.concat(frames, ignore_index=True), fdir / f"{MODEL_VAC}.csv")

    pers = persistence_table(truth, dates, h, EVAL_LEVELS, cfg.score.min_lookback)
    frames = []
    for (l, d), grp in pers.groupby(["location", "forecast_date"], sort=True):
        vals = grp.sort_values(["horizon", "quantile_level"])["value"].to_numpy().reshape(h, len(EVAL_LEVELS))
        frames.append(_as_forecast_rows(l, d, vals))
    io.write_forecasts(pd.concat(frames, ignore_index=True), fdir / f"{cfg.score.baseline}.csv")

    outputs = [workdir / TRUTH] + sorted(fdir.glob("*.csv"))
    summary = {"locations": locs, "first_date": int(dates[0]), "last_date": int(dates[-1]),
               "models": [MODEL_TC, MODEL_VAC, cfg.score.baseline]}
    return _manifest(workdir, "forecast", cfg, {"vac_mc": "derive_seed(master, 'vac-mc', location, date)"},
                     inputs + [ckpt_path], outputs, summary)


# -- score / bootstrap ------------------------------------------------------

def _records(cfg, workdir, forecasts_dir=None, truth_path=None):
    fdir = Path(forecasts_dir) if forecasts_dir else workdir / FORECASTS
    tpath = Path(truth_path) if truth_path else workdir / TRUTH
    _require(tpath)
    if not fdir.is_dir() or not any(fdir.glob("*.csv")):
        raise MissingInput(f"missing input: no forecast CSVs in {fdir}")
    files = sorted(fdir.glob("*.csv"))
    if forecasts_dir is None and truth_path is None:
        _verify(workdir, "forecast", files + [tpath])
    try:
        fc = io.read_forecast_dir(fdir)
        truth = io.read_truth(tpath)
        records = build_records(fc, truth)
    except (io.SchemaError, ValueError) as exc:
        raise NumericFailure(f"cannot join forecasts with truth: {exc}") from None
    if records.empty:
        raise NumericFailure("no forecast has a matching truth value")
    return records, files + [tpath]


def score(cfg: PipelineConfig, workdir: Path, forecasts_dir=None, truth_path=None):
    records, inputs = _records(cfg, workdir, forecasts_dir, truth_path)
    scores = score_records(records, cfg.score.baseline, cfg.score.score_cfg)
    workdir.mkdir(parents=True, exist_ok=True)
    io.write_frame(scores, workdir / SCORES)
    overall = scores[(scores["horizon"] == "all") & scores["metric"].isin(["wis", "rwis"])]
    summary = {f"{r.model}:{r.metric}": r.value for r in overall.itertuples()}
    return _manifest(workdir, "score", cfg, {}, inputs, [workdir / SCORES], summary)


def bootstrap_stage(cfg: PipelineConfig, workdir: Path, forecasts_dir=None, truth_path=None):
    records, inputs = _records(cfg, workdir, forecasts_dir, truth_path)
    reps, cis, seeds = [], [], {}
    for mode in cfg.bootstrap.modes:
        seeds[mode] = derive_seed(cfg.master_seed, "bootstrap", mode)
        res = bootstrap(records, cfg.score.baseline, cfg.bootstrap.config(mode), seeds[mode],
                        cfg.score.score_cfg)
        reps.append(res.to_frame())
        cis.append(res.ci_frame())
    workdir.mkdir(parents=True, exist_ok=True)
    io.write_frame(pd.concat(reps, ignore_index=True), workdir / BOOTSTRAP)
    io.write_frame(pd.concat(cis, ignore_index=True), workdir / BOOTSTRAP_CI)
    return _manifest(workdir, "bootstrap", cfg, seeds, inputs, [workdir / BOOTSTRAP, workdir / BOOTSTRAP_CI])


def run_stage(name, cfg, workdir, **kw):
    fn = {"simulate": simulate, "augment": augment, "train": train_stage, "forecast": forecast,
          "score": score, "bootstrap": bootstrap_stage}[name]
    t0 = time.perf_counter()
    man = fn(cfg, Path(workdir), **kw)
    log.info("%s finished in %.1f s", name, time.perf_counter() - t0)
    return man


def pipeline(cfg: PipelineConfig, workdir: Path):
    for name in STAGES:
        run_stage(name, cfg, workdir)
