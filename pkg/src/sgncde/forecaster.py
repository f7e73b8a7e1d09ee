"""Training and inference for the rotation forecasters."""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import so3
from .autodiff import Tensor
from .batching import ForecastPair, ForecastRequest, make_batch
from .errors import ConfigError, DivergenceError, SingularWindowError, StiffnessError, UsageError
from .models import LEARNED, ConstantVelocity, build_model
from .nn import Adam, load_checkpoint, save_checkpoint

SOLVERS = ("rk4", "dopri45")
# failures caused by parameters that have run away during training
NUMERICAL_FAILURES = (SingularWindowError, StiffnessError)


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    solver: str = "rk4"
    eval_solver: str = "dopri45"
    rk4_steps: int = 2
    rtol: float = 1e-5
    atol: float = 1e-7
    history: int = 20
    horizon: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "rk4_steps", "history", "horizon"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr", "rtol", "atol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.solver != "rk4":
            raise ConfigError("training runs the fixed-step rk4 solver only")
        if self.eval_solver not in SOLVERS:
            raise ConfigError(f"eval_solver must be one of {SOLVERS}")

    def solver_options(self):
        return {"rk4_steps": self.rk4_steps, "rtol": self.rtol, "atol": self.atol}

    @classmethod
    def from_mapping(cls, values):
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown training option {key!r}")
            try:
                kwargs[key] = fields[key](raw) if fields[key] is not str else str(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_rge: float
    val_rge: float = float("nan")


class BestEpoch:
    """Parameters of the epoch with the lowest validation RGE."""

    def __init__(self, val=float("inf"), state=None):
        self.val, self.state = val, state

    def update(self, model, rec):
        if np.isfinite(rec.val_rge) and rec.val_rge < self.val:
            self.val, self.state = float(rec.val_rge), model.state_dict()

    def restore(self, model):
        if self.state is not None:
            model.load_state_dict(self.state)
        return model


def frobenius_loss(pred, target):
    """Sum over horizon of ``||pred_k - target_k||_F``, averaged over any batch axis."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise UsageError(f"prediction/target mismatch {pred.shape} vs {target.shape}")
    per = ad.frobenius_norm(pred - target, axis=(-2, -1)).sum(axis=-1)
    return per.mean() if per.ndim else per


def loss(pred, target):
    """Loss of one forecast: lists (or arrays) of rotations of equal length."""
    if len(pred) != len(target):
        raise UsageError(f"{len(pred)} predictions for {len(target)} targets")
    if isinstance(pred, (list, tuple)):
        pred = ad.stack([p if isinstance(p, Tensor) else Tensor(p) for p in pred], axis=0)
    return frobenius_loss(pred, np.asarray(target, dtype=float))


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def predict_batch(model, items, mode="dopri45", **solver):
    """Numpy rotations ``(B, m, 3, 3)`` and degenerate flags for a list of requests/pairs."""
    batch = make_batch(items)
    R, bad = model.predict(batch, mode=mode, **solver)
    return _data(R), np.asarray(bad)


def forecast(model, req, mode="dopri45", **solver):
    """Rotations at ``req.query_times`` as a list of 3x3 arrays."""
    R, _ = predict_batch(model, [req], mode, **solver)
    return list(R[0])


def baseline_gru_forecast(gru, req, **solver):
    return forecast(gru, req, **solver)


def baseline_ncde_forecast(model, req, **solver):
    return forecast(model, req, **solver)


def baseline_constant_velocity(req):
    return forecast(ConstantVelocity(), req)


def mean_rge(model, pairs, mode="dopri45", batch_size=64, **solver):
    """Mean geodesic error (radians) over every (pair, horizon step)."""
    errs = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        R, _ = predict_batch(model, chunk, mode, **solver)
        errs.append(so3.geodesic_error(R, np.stack([p.target for p in chunk])))
    return float(np.concatenate(errs).mean())


def train(model, pairs, cfg, val_pairs=None, optimizer=None, start_epoch=0, history=None,
          on_epoch=None):
    """Mini-batch Adam on the Frobenius forecast loss.

    The shuffling order of epoch ``e`` depends only on ``(cfg.seed, e)`` so a
    run resumed from a checkpoint replays the same batches. ``on_epoch`` is
    called as ``on_epoch(record, optimizer)`` after every epoch.
    """
    if model.kind not in LEARNED:
        raise UsageError(f"{model.kind} has no trainable parameters")
    pairs = list(pairs)
    if not pairs:
        raise UsageError("empty training set")
    opt = optimizer or Adam(model.parameters(), lr=cfg.lr)
    history = list(history or [])
    solver = cfg.solver_options()
    n_batches = -(-len(pairs) // cfg.batch_size)
    for epoch in range(start_epoch, cfg.epochs):
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
        losses, errs = [], []
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = make_batch([pairs[i] for i in idx])
            opt.zero_grad()
            try:
                R, _ = model.predict(batch, mode="rk4", **solver)
            except NUMERICAL_FAILURES as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}",
                                      batch_id=epoch * n_batches + b) from exc
            L = frobenius_loss(R, batch.targets)
            value = L.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss in epoch {epoch}, batch {b}",
                                      batch_id=epoch * n_batches + b)
            L.backward()
            opt.step()
            losses.append(value * len(idx))
            errs.append(so3.geodesic_error(R.data, batch.targets).mean() * len(idx))
        rec = EpochRecord(epoch, sum(losses) / len(pairs), sum(errs) / len(pairs))
        if val_pairs:
            try:
                rec.val_rge = mean_rge(model, val_pairs, cfg.eval_solver, **solver)
            except NUMERICAL_FAILURES as exc:
                raise DivergenceError(f"validation after epoch {epoch}: {exc}",
                                      batch_id=(epoch + 1) * n_batches - 1) from exc
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, opt)
    return model, history


def save_model(path, model, cfg=None, optimizer=None, history=None, extra=None, best=None):
    """Checkpoint the current parameters, optimizer state and, if given, the best epoch."""
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        arrays.update({f"adam/{k}": v for k, v in optimizer.state_dict().items()})
    if best is not None and best.state is not None:
        arrays.update({f"best/{k}": v for k, v in best.state.items()})
    meta = {
        "kind": model.kind,
        "model": model.config(),
        "training": dataclasses.asdict(cfg) if cfg is not None else None,
        "history": [dataclasses.asdict(r) for r in (history or [])],
        "best_val": best.val if best is not None and best.state is not None else None,
        **(extra or {}),
    }
    save_checkpoint(path, arrays, meta)


def _prefixed(arrays, prefix):
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_model(path, best=True):
    """``(model, meta, optimizer_state)``; the optimizer state may be empty.

    With ``best`` the parameters of the best validation epoch are loaded when
    the checkpoint has them, otherwise the latest ones.
    """
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") not in LEARNED:
        raise ConfigError(f"checkpoint holds unknown model kind {meta.get('kind')!r}")
    model = build_model(meta["kind"], **meta["model"])
    stored = _prefixed(arrays, "best/") if best else {}
    model.load_state_dict(stored or _prefixed(arrays, "model/"))
    return model, meta, _prefixed(arrays, "adam/")


def load_best(path):
    """The :class:`BestEpoch` stored in a checkpoint (empty if none)."""
    arrays, meta = load_checkpoint(path)
    state = _prefixed(arrays, "best/")
    return BestEpoch(meta["best_val"], state) if state else BestEpoch()


def restore_optimizer(model, cfg, state):
    opt = Adam(model.parameters(), lr=cfg.lr)
    if state:
        opt.load_state_dict(state)
    return opt


def history_from_meta(meta):
    return [EpochRecord(**r) for r in meta.get("history", [])]


__all__ = [
    "BestEpoch", "EpochRecord", "ForecastPair", "ForecastRequest", "TrainingConfig", "baseline_constant_velocity",
    "baseline_gru_forecast", "baseline_ncde_forecast", "forecast", "frobenius_loss",
    "history_from_meta", "load_best", "load_model", "loss", "mean_rge", "predict_batch", "restore_optimizer",
    "save_model", "train",
]
