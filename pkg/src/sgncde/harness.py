"""Experiment driver: datasets from the simulator, evaluation and comparison tables."""

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import so3
from .batching import ForecastPair, ForecastRequest, make_batch
from .dynamics import VARIANTS, ScenarioConfig, simulate_batch
from .errors import ConfigError, DivergenceError, SgncdeError
from .forecaster import BestEpoch, TrainingConfig, train
from .io import atomic_write_text, read_key_values
from .models import LEARNED, MODEL_KINDS, build_model

DEFAULT_MODELS = ("sgncde", "gru", "hermite", "constant_velocity", "identity", "oracle")
REFERENCE = ("oracle", "identity")


BENCHMARK_SCENARIO = ScenarioConfig(variant="damped", noise_sigma=0.05, drop_prob=0.3)


@dataclass(frozen=True)
class ExperimentSpec:
    scenarios: tuple = (BENCHMARK_SCENARIO,)
    models: tuple = DEFAULT_MODELS
    n_train: int = 500
    n_val: int = 50
    n_test: int = 100
    windows_per_traj: int = 4
    history: int = 20
    horizon: int = 8
    seed: int = 0
    training: TrainingConfig = TrainingConfig()
    model_options: dict = field(default_factory=dict)  # kind -> constructor overrides

    def __post_init__(self):
        if not self.scenarios or not self.models:
            raise ConfigError("an experiment needs at least one scenario and one model")
        for m in self.models:
            if m not in MODEL_KINDS:
                raise ConfigError(f"unknown model {m!r}; choose from {sorted(MODEL_KINDS)}")
        if len(set(self.models)) != len(self.models):
            raise ConfigError("duplicate model names")
        if min(self.n_train, self.n_test, self.windows_per_traj, self.history,
               self.horizon) <= 0 or self.n_val < 0:
            raise ConfigError("counts must be positive")
        if self.history < 3:
            raise ConfigError("history needs at least 3 samples")
        if (self.history, self.horizon) != (self.training.history, self.training.horizon):
            object.__setattr__(self, "training", dataclasses.replace(
                self.training, history=self.history, horizon=self.horizon))

    @property
    def per_scenario(self):
        return self.n_train + self.n_val + self.n_test

    def split_seeds(self, scenario_index):
        """Disjoint trajectory seed ranges for train / val / test."""
        base = self.seed + scenario_index * self.per_scenario
        a, b = self.n_train, self.n_train + self.n_val
        seeds = base + np.arange(self.per_scenario)
        return {"train": seeds[:a], "val": seeds[a:b], "test": seeds[b:]}

    @classmethod
    def from_mapping(cls, values):
        """Build from flat ``key -> value`` strings (config files, CLI flags).

        Scenario keys are shared by all scenarios and ``variants`` lists the
        scenario axis; training keys go to :class:`TrainingConfig`; ``latent``,
        ``hidden``, ``window``, ``gru_hidden`` and ``gru_layers`` size the models.
        """
        values = {k: v for k, v in values.items() if v is not None}
        scen_keys = {f.name for f in dataclasses.fields(ScenarioConfig)} - {"seed"}
        train_keys = {f.name for f in dataclasses.fields(TrainingConfig)} - {"history",
                                                                              "horizon", "seed"}
        scen, trn, top, arch = {}, {}, {}, {}
        for k, v in values.items():
            if k in _SPEC_INT_KEYS or k in ("models", "variants"):
                top[k] = v
            elif k in train_keys:
                trn[k] = v
            elif k in scen_keys:
                scen[k] = v
            elif k in _ARCH_KEYS:
                arch[k] = v
            else:
                raise ConfigError(f"unknown experiment option {k!r}")
        try:
            kwargs = {k: int(top[k]) for k in _SPEC_INT_KEYS if k in top}
            arch = {k: int(v) for k, v in arch.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad integer option: {exc}") from None
        variants = top.get("variants", scen.pop("variant", "damped"))
        scen.pop("variant", None)
        if isinstance(variants, str):
            variants = [v.strip() for v in variants.split(",") if v.strip()]
        base = {k: getattr(BENCHMARK_SCENARIO, k) for k in scen_keys}
        scenarios = tuple(ScenarioConfig.from_mapping(dict(base, **scen, variant=v))
                          for v in variants)
        models = top.get("models", DEFAULT_MODELS)
        if isinstance(models, str):
            models = [m.strip() for m in models.split(",") if m.strip()]
        trn["seed"] = kwargs.get("seed", 0)
        options = {}
        cde = {k: arch[k] for k in ("latent", "hidden") if k in arch}
        if cde:
            options["hermite"] = dict(cde)
        if cde or "window" in arch:
            options["sgncde"] = dict(cde, **({"window": arch["window"]} if "window" in arch
                                             else {}))
        gru = {k[4:]: arch[k] for k in ("gru_hidden", "gru_layers") if k in arch}
        if gru:
            options["gru"] = gru
        return cls(scenarios=scenarios, models=tuple(models),
                   training=TrainingConfig.from_mapping(trn), model_options=options, **kwargs)

    @classmethod
    def from_file(cls, path, overrides=None):
        values = read_key_values(path)
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values)

    def to_mapping(self):
        """Flat string mapping that :meth:`from_mapping` turns back into this spec."""
        out = {}
        base = self.scenarios[0]
        for f in dataclasses.fields(ScenarioConfig):
            if f.name not in ("seed", "variant"):
                out[f.name] = repr(getattr(base, f.name))
        if any(dataclasses.replace(s, variant=base.variant) != base for s in self.scenarios):
            raise ConfigError("scenarios differing in more than the variant cannot be flattened")
        out["variants"] = ",".join(s.variant for s in self.scenarios)
        out["models"] = ",".join(self.models)
        for k in _SPEC_INT_KEYS:
            out[k] = str(getattr(self, k))
        for f in dataclasses.fields(TrainingConfig):
            if f.name not in ("history", "horizon", "seed"):
                out[f.name] = str(getattr(self.training, f.name))
        for kind, opts in self.model_options.items():
            for k, v in opts.items():
                out[f"gru_{k}" if kind == "gru" else k] = str(v)
        return out


_SPEC_INT_KEYS = ("n_train", "n_val", "n_test", "windows_per_traj", "history", "horizon", "seed")
_ARCH_KEYS = ("latent", "hidden", "window", "gru_hidden", "gru_layers")


@dataclass
class Dataset:
    pairs: list
    seeds: np.ndarray  # trajectory seed per pair
    windows: np.ndarray  # window index per pair


def window_pairs(result, history, horizon, count):
    """(history, future) pairs from one simulated trajectory.

    Histories are runs of ``history`` consecutive observed samples; the future
    is the next ``horizon`` clean samples strictly after the last observation.
    Window starts are spread evenly over the valid range.
    """
    obs, clean = result.observed, result.clean
    last_ok = clean.times[-horizon] if len(clean) >= horizon else -np.inf
    valid = np.nonzero(obs.times[history - 1:] < last_ok)[0] if len(obs) >= history else []
    if len(valid) == 0:
        raise ConfigError("trajectory too short for the requested history and horizon")
    hi = int(valid[-1])
    starts = np.unique(np.round(np.linspace(0, hi, count)).astype(int))
    pairs = []
    for s in starts:
        hist = obs[s:s + history]
        j = int(np.searchsorted(clean.times, hist.times[-1], side="right"))
        req = ForecastRequest(hist, clean.times[j:j + horizon])
        pairs.append(ForecastPair(req, np.array(clean.rotations[j:j + horizon])))
    return pairs


def build_split(scenario, seeds, spec):
    results = simulate_batch([scenario.with_seed(int(s)) for s in seeds])
    pairs, seed_of, win = [], [], []
    for s, res in zip(seeds, results):
        ps = window_pairs(res, spec.history, spec.horizon, spec.windows_per_traj)
        pairs.extend(ps)
        seed_of.extend([int(s)] * len(ps))
        win.extend(range(len(ps)))
    return Dataset(pairs, np.array(seed_of, dtype=int), np.array(win, dtype=int))


def build_dataset(spec, scenario_index=0):
    """Train / val / test :class:`Dataset` objects for one scenario of ``spec``."""
    scenario = spec.scenarios[scenario_index]
    return {name: build_split(scenario, seeds, spec)
            for name, seeds in spec.split_seeds(scenario_index).items()}


@dataclass
class Evaluation:
    """Raw predictions and per-step errors of one (model, scenario) cell."""

    model: str
    scenario: str
    predictions: np.ndarray  # (N, m, 3, 3); NaN rows where the forecast failed
    targets: np.ndarray
    failed: np.ndarray  # (N,) bool
    flagged: np.ndarray  # (N, m) bool, degenerate-head fallbacks
    seeds: np.ndarray
    windows: np.ndarray
    query_times: np.ndarray
    note: str = ""


@dataclass
class ResultRow:
    model: str
    scenario: str
    mean_deg: float
    std_deg: float
    per_step_deg: np.ndarray
    n_samples: int
    n_failed: int
    n_flagged: int
    note: str = ""


def _predict_chunk(model, pairs, mode, solver):
    batch = make_batch(pairs)
    R, bad = model.predict(batch, mode=mode, **solver)
    return np.asarray(getattr(R, "data", R)), np.asarray(bad)


def run_predictions(model, dataset, mode="dopri45", solver=None, batch_size=64, scenario=""):
    """Forecast every test pair; failing pairs are recorded, not raised."""
    solver = solver or {}
    pairs = dataset.pairs
    N = len(pairs)
    m = len(pairs[0].request.query_times)
    preds = np.full((N, m, 3, 3), np.nan)
    flagged = np.zeros((N, m), dtype=bool)
    failed = np.zeros(N, dtype=bool)
    for i in range(0, N, batch_size):
        chunk = pairs[i:i + batch_size]
        try:
            R, bad = _predict_chunk(model, chunk, mode, solver)
            preds[i:i + len(chunk)], flagged[i:i + len(chunk)] = R, bad
        except SgncdeError:
            for j, p in enumerate(chunk):
                try:
                    R, bad = _predict_chunk(model, [p], mode, solver)
                    preds[i + j], flagged[i + j] = R[0], bad[0]
                except SgncdeError:
                    failed[i + j] = True
    return Evaluation(model.kind, scenario, preds, np.stack([p.target for p in pairs]), failed,
                      flagged, dataset.seeds, dataset.windows,
                      np.stack([p.request.query_times for p in pairs]))


def summarize(ev):
    """Table row as a pure function of the stored predictions."""
    ok = ~ev.failed
    m = ev.targets.shape[1]
    if ok.any():
        err = np.degrees(so3.geodesic_error(ev.predictions[ok], ev.targets[ok]))
        mean, std, per = float(err.mean()), float(err.std()), err.mean(axis=0)
    else:
        mean = std = float("nan")
        per = np.full(m, np.nan)
    return ResultRow(ev.model, ev.scenario, mean, std, per, int(ok.sum()), int(ev.failed.sum()),
                     int(ev.flagged[ok].sum()), ev.note)


def evaluate(model, dataset, mode="dopri45", solver=None, scenario=""):
    """Per-horizon RGE statistics (degrees) of ``model`` on ``dataset``."""
    ev = run_predictions(model, dataset, mode, solver, scenario=scenario)
    return summarize(ev), ev


def scenario_name(cfg):
    return cfg.variant


def _train_options(spec, kind):
    opts = dict(spec.model_options.get(kind, {}))
    opts.setdefault("seed", spec.seed)
    return opts


def fit_model(kind, spec, data, log=None):
    """Build and (if learnable) train one model; returns ``(model, history)``."""
    model = build_model(kind, **(_train_options(spec, kind) if kind in LEARNED else {}))
    if kind not in LEARNED:
        return model, []
    best = BestEpoch()

    def cb(rec, _opt):
        best.update(model, rec)
        if log is not None:
            log(f"{kind} epoch {rec.epoch}: loss {rec.train_loss:.4f} "
                f"train {np.degrees(rec.train_rge):.3f} deg val {np.degrees(rec.val_rge):.3f} deg")

    model, hist = train(model, data["train"].pairs, spec.training, data["val"].pairs, on_epoch=cb)
    return best.restore(model), hist


def compare(spec, log=None):
    """Train and evaluate every model on every scenario.

    Returns ``(rows, evaluations, ranking)``; a diverged cell becomes a row of
    NaNs with a note and the grid continues.
    """
    rows, evals, ranking = [], [], {}
    solver = spec.training.solver_options()
    for si, scen in enumerate(spec.scenarios):
        name = scenario_name(scen)
        data = build_dataset(spec, si)
        for kind in spec.models:
            try:
                model, _ = fit_model(kind, spec, data, log)
            except DivergenceError as exc:
                m = spec.horizon
                rows.append(ResultRow(kind, name, float("nan"), float("nan"), np.full(m, np.nan),
                                      0, len(data["test"].pairs), 0, f"diverged: {exc}"))
                continue
            row, ev = evaluate(model, data["test"], spec.training.eval_solver, solver, name)
            rows.append(row)
            evals.append(ev)
        scored = [r for r in rows if r.scenario == name and np.isfinite(r.mean_deg)]
        ranking[name] = [r.model for r in sorted(scored, key=lambda r: r.mean_deg)]
    return rows, evals, ranking


CSV_COLUMNS = ["scenario", "model", "mean_deg", "std_deg", "n_samples", "n_failed", "n_flagged"]


def rows_to_csv(rows):
    m = max((len(r.per_step_deg) for r in rows), default=0)
    header = CSV_COLUMNS + [f"step{k + 1}_deg" for k in range(m)] + ["note"]
    lines = [",".join(header)]
    for r in rows:
        vals = [r.scenario, r.model, repr(r.mean_deg), repr(r.std_deg), str(r.n_samples),
                str(r.n_failed), str(r.n_flagged)]
        vals += [repr(float(v)) for v in r.per_step_deg]
        vals.append(r.note.replace(",", ";").replace("\n", " "))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def rows_to_text(rows, ranking=None):
    header = ["scenario", "model", "RGE (deg)", "n", "failed", "flagged"]
    body = [[r.scenario, r.model, f"{r.mean_deg:.3f} ± {r.std_deg:.3f}", str(r.n_samples),
             str(r.n_failed), str(r.n_flagged)] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*b) for b in body]
    for scen, order in (ranking or {}).items():
        out.append(f"ranking [{scen}]: " + " < ".join(order))
    return "\n".join(out) + "\n"


DUMP_HEADER = "window,step,t,qw,qx,qy,qz,tw,tx,ty,tz,rge_deg,failed,flagged"


def dump_predictions(ev, directory):
    """One CSV per trajectory: predicted and true quaternions per horizon step."""
    directory = os.path.join(directory, f"{ev.model}__{ev.scenario}")
    os.makedirs(directory, exist_ok=True)
    ok = ~ev.failed
    rge = np.full(ev.targets.shape[:2], np.nan)
    if ok.any():
        rge[ok] = np.degrees(so3.geodesic_error(ev.predictions[ok], ev.targets[ok]))
    qt = so3.rotation_to_quat(ev.targets)
    qp = np.full(qt.shape, np.nan)
    if ok.any():
        qp[ok] = so3.rotation_to_quat(ev.predictions[ok])
    for seed in np.unique(ev.seeds):
        lines = [DUMP_HEADER]
        for i in np.nonzero(ev.seeds == seed)[0]:
            for k in range(ev.targets.shape[1]):
                vals = [ev.windows[i], k + 1, ev.query_times[i, k], *qp[i, k], *qt[i, k],
                        rge[i, k], int(ev.failed[i]), int(ev.flagged[i, k])]
                lines.append(",".join(repr(float(v)) if isinstance(v, float) else str(v)
                                      for v in vals))
        atomic_write_text(os.path.join(directory, f"traj_{seed}.csv"), "\n".join(lines) + "\n")
    return directory


def load_dump(directory, model, scenario):
    """Rebuild an :class:`Evaluation` from a prediction dump directory."""
    files = sorted(f for f in os.listdir(directory) if f.startswith("traj_"))
    preds, targets, failed, flagged, seeds, wins, qts = [], [], [], [], [], [], []
    for fname in files:
        seed = int(fname[5:-4])
        data = np.loadtxt(os.path.join(directory, fname), delimiter=",", skiprows=1, ndmin=2)
        for w in np.unique(data[:, 0]):
            rows = data[data[:, 0] == w]
            qp, qt = rows[:, 3:7], rows[:, 7:11]
            fail = bool(rows[0, 12])
            preds.append(np.full((len(rows), 3, 3), np.nan) if fail else so3.quat_to_rotation(qp))
            targets.append(so3.quat_to_rotation(qt))
            failed.append(fail)
            flagged.append(rows[:, 13].astype(bool))
            seeds.append(seed)
            wins.append(int(w))
            qts.append(rows[:, 2])
    return Evaluation(model, scenario, np.stack(preds), np.stack(targets), np.array(failed),
                      np.stack(flagged), np.array(seeds), np.array(wins), np.stack(qts))


__all__ = ["VARIANTS", "ExperimentSpec", "build_dataset", "compare", "evaluate", "summarize"]
