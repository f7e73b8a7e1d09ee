"""Forecasting models.

Every model exposes ``predict(batch, mode=...) -> (rotations, degenerate)``
with rotations of shape ``(B, m, 3, 3)`` (a tape tensor for learned models)
and a boolean ``(B, m)`` mask of samples that fell back to the previous
prediction because the 6D head was degenerate.
"""

import numpy as np

from . import autodiff as ad
from . import so3, so3ad
from .autodiff import Tensor, make_node
from .cde import (
    SegmentPlan,
    backward_slopes,
    hermite_stage_rates,
    integrate_plan_dopri,
    unroll_rk4,
    with_time_channel,
)
from .errors import ConfigError, InvalidInputError
from .nn import MLP, GRUStack, Linear, Module
from .sgfilter import SGWeights, WindowBank, control_state

IDENTITY_6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
CONTROL_CHANNELS = 10


def apply_fallback(R, bad, last):
    """Replace degenerate predictions by the previous one (``last`` before step 0)."""
    if not np.any(bad):
        return R, bad
    B, m = bad.shape
    idx = np.zeros((B, m), dtype=int)
    prev = np.zeros(B, dtype=int)
    for k in range(m):
        idx[:, k] = np.where(bad[:, k], prev, k + 1)
        prev = idx[:, k]
    allR = ad.concat([Tensor(last[:, None]), R], axis=1)
    return allR[np.arange(B)[:, None], idx], bad


def decode(head, z, last):
    R, bad = so3ad.gram_schmidt(head(z))
    return apply_fallback(R, bad, last)


def sg_solve(raw, bank):
    """Weighted SG coefficients for every anchor as a tape op on the raw weights."""
    return make_node(bank.solve(raw.data), (raw,), lambda g: (bank.vjp(raw.data, g),))


class CDEModel(Module):
    """Shared encoder / vector field / decoder; subclasses provide the control."""

    kind = None

    def __init__(self, seed=0, latent=100, hidden=100):
        rng = np.random.default_rng(seed)
        self.seed, self.latent, self.hidden = int(seed), int(latent), int(hidden)
        self.zeta = MLP([CONTROL_CHANNELS, hidden, latent], rng)
        self.f = MLP([latent, hidden, hidden, hidden, latent * CONTROL_CHANNELS], rng)
        self.decoder = MLP([latent, hidden, 6], rng, zero_last=True, last_bias=IDENTITY_6D)

    def config(self):
        return {"seed": self.seed, "latent": self.latent, "hidden": self.hidden}

    def field(self, z, u):
        F = self.f(z).reshape(z.shape[0], self.latent, CONTROL_CHANNELS)
        return (F @ u.reshape(u.shape[0], CONTROL_CHANNELS, 1)).reshape(z.shape[0], self.latent)

    def field_np(self, z):
        z = np.asarray(z, dtype=float)
        with ad.no_grad():
            out = self.f(Tensor(z.reshape(-1, z.shape[-1]))).data
        return out.reshape(z.shape[:-1] + (self.latent, CONTROL_CHANNELS))

    def encode(self, batch):
        x0 = so3.to_9d(batch.rotations[:, 0])
        return self.zeta(Tensor(np.concatenate([batch.times[:, :1], x0], axis=1)))

    def stage_controls(self, batch, plan):
        raise NotImplementedError

    def control_at(self, batch, plan):
        raise NotImplementedError

    def latent_states(self, batch, mode="rk4", rk4_steps=2, rtol=1e-5, atol=1e-7):
        """Latent states at the query times, ``(B, m, latent)``."""
        if batch.times.shape[1] < 3:
            raise InvalidInputError("history too short for a control path (need 3 samples)")
        if mode == "rk4":
            plan = SegmentPlan.build(batch.times, batch.queries, rk4_steps)
            return unroll_rk4(self.field, self.encode(batch), self.stage_controls(batch, plan),
                              plan.outputs)
        if mode == "dopri45":
            plan = SegmentPlan.build(batch.times, batch.queries, 2)
            with ad.no_grad():
                z0 = self.encode(batch).data
            zs = integrate_plan_dopri(self.field_np, z0, plan, self.control_at(batch, plan),
                                      rtol, atol)
            return Tensor(zs)
        raise ConfigError(f"unknown solver mode {mode!r}")

    def predict(self, batch, mode="rk4", **solver):
        z = self.latent_states(batch, mode, **solver)
        if mode != "rk4":
            with ad.no_grad():
                return decode(self.decoder, z, batch.rotations[:, -1])
        return decode(self.decoder, z, batch.rotations[:, -1])


class SGnCDE(CDEModel):
    """Neural CDE driven by the weighted SG path on SO(3) plus time."""

    kind = "sgncde"

    def __init__(self, seed=0, latent=100, hidden=100, window=5):
        super().__init__(seed, latent, hidden)
        self.window = int(window)
        self.sg_raw = Tensor(SGWeights.uniform(window).raw, requires_grad=True)

    def config(self):
        return dict(super().config(), window=self.window)

    @property
    def sg_weights(self):
        return SGWeights(self.sg_raw.data.copy())

    def _bank(self, batch):
        key = ("bank", self.window)
        if key not in batch.cache:
            batch.cache[key] = WindowBank(batch.times, batch.rotations, self.window)
        return batch.cache[key]

    def stage_controls(self, batch, plan):
        B, S = plan.starts.shape
        rho = sg_solve(self.sg_raw, self._bank(batch))
        tau = plan.stage_times() - batch.times[:, plan.anchor, None]
        rate = so3ad.rotation_rate(rho[:, plan.anchor].reshape(B, S, 1, 9), tau,
                                   batch.rotations[:, plan.anchor, None])
        return with_time_channel(rate, plan.widths)

    def control_at(self, batch, plan):
        rho = self._bank(batch).solve(self.sg_raw.data)
        anchor_t = batch.times[:, plan.anchor]
        rho_s = rho[:, plan.anchor]
        rot_s = batch.rotations[:, plan.anchor]

        def at(s, u):
            t = plan.starts[:, s] + u * plan.widths[:, s]
            _, dphi = control_state(rho_s[:, s], t - anchor_t[:, s], rot_s[:, s])
            return with_time_channel(so3.to_9d(dphi), plan.widths[:, s])

        return at


class HermiteNCDE(CDEModel):
    """Same network driven by a cubic Hermite path through the raw 9D samples."""

    kind = "hermite"

    def _knots(self, batch):
        if "hermite" not in batch.cache:
            values = so3.to_9d(batch.rotations)
            batch.cache["hermite"] = (values, backward_slopes(batch.times, values))
        return batch.cache["hermite"]

    def stage_controls(self, batch, plan):
        values, slopes = self._knots(batch)
        rate = hermite_stage_rates(batch.times, values, slopes, plan, t=plan.stage_times())
        return Tensor(with_time_channel(rate, plan.widths))

    def control_at(self, batch, plan):
        values, slopes = self._knots(batch)

        def at(s, u):
            t = plan.starts[:, s] + u * plan.widths[:, s]
            sub = SegmentPlan(plan.starts[:, s:s + 1], plan.widths[:, s:s + 1],
                              plan.gap[s:s + 1], plan.anchor[s:s + 1], plan.outputs,
                              plan.gap_start[:, s:s + 1], plan.gap_width[:, s:s + 1], plan.r)
            rate = hermite_stage_rates(batch.times, values, slopes, sub, t=t[:, None, None])
            return with_time_channel(rate[:, 0, 0], plan.widths[:, s])

        return at


class GRUForecaster(Module):
    """Stacked GRU over 9D samples plus the time to the next prediction.

    The history is consumed step by step; the horizon is rolled out
    autoregressively, feeding each decoded rotation back in.
    """

    kind = "gru"

    def __init__(self, seed=0, hidden=250, layers=3, dt_scale=40.0):
        rng = np.random.default_rng(seed)
        self.seed, self.hidden, self.layers = int(seed), int(hidden), int(layers)
        self.dt_scale = float(dt_scale)
        self.rnn = GRUStack(CONTROL_CHANNELS, hidden, layers, rng)
        self.head = Linear(hidden, 6, rng, zero=True, bias=IDENTITY_6D)

    def config(self):
        return {"seed": self.seed, "hidden": self.hidden, "layers": self.layers,
                "dt_scale": self.dt_scale}

    def predict(self, batch, mode="rk4", **solver):
        if mode != "rk4":
            with ad.no_grad():
                return self._predict(batch)
        return self._predict(batch)

    def _predict(self, batch):
        B, H = batch.times.shape
        m = batch.horizon
        nxt = np.concatenate([batch.times[:, 1:], batch.queries[:, :1]], axis=1)
        dt = (nxt - batch.times) * self.dt_scale
        inputs = np.concatenate([so3.to_9d(batch.rotations), dt[..., None]], axis=-1)
        states = self.rnn.initial_state(B)
        for j in range(H):
            top, states = self.rnn(Tensor(inputs[:, j]), states)
        qdt = np.diff(batch.queries, axis=1) * self.dt_scale
        prev = Tensor(batch.rotations[:, -1])
        outs, flags = [], []
        for k in range(m):
            R, bad = so3ad.gram_schmidt(self.head(top))
            if bad.any():
                R = ad.where(bad[:, None, None], prev, R)
            outs.append(R)
            flags.append(bad)
            prev = R
            if k < m - 1:
                x = ad.concat([R.reshape(B, 9), Tensor(qdt[:, k:k + 1])], axis=-1)
                top, states = self.rnn(x, states)
        return ad.stack(outs, axis=1), np.stack(flags, axis=1)


class ConstantVelocity:
    """Replays the last observed relative rotation rate."""

    kind = "constant_velocity"

    def predict(self, batch, mode=None, **solver):
        if batch.times.shape[1] < 2:
            raise InvalidInputError("constant velocity needs two samples")
        xN, xP = batch.rotations[:, -1], batch.rotations[:, -2]
        dt = batch.times[:, -1] - batch.times[:, -2]
        omega = so3.log_so3(xN @ np.swapaxes(xP, -1, -2)) / dt[:, None]
        lead = batch.queries - batch.times[:, -1:]
        R = so3.exp_so3(lead[..., None] * omega[:, None]) @ xN[:, None]
        return R, np.zeros(lead.shape, dtype=bool)


class HoldLast:
    """Predicts the last observation for every horizon step."""

    kind = "identity"

    def predict(self, batch, mode=None, **solver):
        R = np.broadcast_to(batch.rotations[:, -1:], (batch.size, batch.horizon, 3, 3)).copy()
        return R, np.zeros((batch.size, batch.horizon), dtype=bool)


class Oracle:
    """Returns the ground truth (reference row only)."""

    kind = "oracle"

    def predict(self, batch, mode=None, **solver):
        if batch.targets is None:
            raise InvalidInputError("the oracle needs targets")
        return batch.targets.copy(), np.zeros((batch.size, batch.horizon), dtype=bool)


MODEL_KINDS = {cls.kind: cls for cls in (SGnCDE, HermiteNCDE, GRUForecaster, ConstantVelocity,
                                        HoldLast, Oracle)}
LEARNED = ("sgncde", "gru", "hermite")


def build_model(kind, **config):
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model {kind!r}; choose from {sorted(MODEL_KINDS)}")
    return MODEL_KINDS[kind](**config)
