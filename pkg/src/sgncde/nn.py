"""Layers, the Adam optimizer and checkpoint files on top of :mod:`autodiff`."""

import io
import json
import zipfile

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .io import atomic_write_bytes

CHECKPOINT_VERSION = 1


class Module:
    """Parameter container; parameters are discovered from attributes in order."""

    def named_parameters(self, prefix=""):
        out = []
        for name, value in self.__dict__.items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=float)
            if arr.shape != p.shape:
                raise ConfigError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x W + b`` with ``W`` of shape ``(in, out)``; uniform(+-1/sqrt(in)) init."""

    def __init__(self, n_in, n_out, rng, zero=False, bias=None):
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_in, n_out)) if zero else _uniform(rng, n_in, (n_in, n_out))
        if bias is not None:
            b = np.broadcast_to(np.asarray(bias, float), (n_out,)).copy()
        elif zero:
            b = np.zeros(n_out)
        else:
            b = _uniform(rng, n_in, (n_out,))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x):
        return x @ self.weight + self.bias


class MLP(Module):
    """Linear layers with ELU between them (none after the last)."""

    def __init__(self, widths, rng, zero_last=False, last_bias=None):
        if len(widths) < 2:
            raise ConfigError("an MLP needs at least input and output widths")
        self.widths = tuple(int(w) for w in widths)
        n = len(widths) - 1
        self.layers = [
            Linear(widths[i], widths[i + 1], rng,
                   zero=zero_last and i == n - 1,
                   bias=last_bias if i == n - 1 else None)
            for i in range(n)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.elu(x)
        return x


class GRUCell(Module):
    """Gated recurrent unit (reset, update, candidate gates fused in one matmul)."""

    def __init__(self, n_in, hidden, rng):
        self.hidden = hidden
        self.w_in = Tensor(_uniform(rng, hidden, (n_in, 3 * hidden)), requires_grad=True)
        self.w_hid = Tensor(_uniform(rng, hidden, (hidden, 3 * hidden)), requires_grad=True)
        self.b_in = Tensor(_uniform(rng, hidden, (3 * hidden,)), requires_grad=True)
        self.b_hid = Tensor(_uniform(rng, hidden, (3 * hidden,)), requires_grad=True)

    def __call__(self, x, h):
        H = self.hidden
        gi = x @ self.w_in + self.b_in
        gh = h @ self.w_hid + self.b_hid
        r = ad.sigmoid(gi[..., :H] + gh[..., :H])
        z = ad.sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
        n = ad.tanh(gi[..., 2 * H:] + r * gh[..., 2 * H:])
        return n + z * (h - n)


class GRUStack(Module):
    def __init__(self, n_in, hidden, layers, rng):
        self.hidden = hidden
        self.cells = [GRUCell(n_in if i == 0 else hidden, hidden, rng) for i in range(layers)]

    def initial_state(self, batch):
        return [Tensor(np.zeros((batch, self.hidden))) for _ in self.cells]

    def __call__(self, x, states):
        new = []
        for cell, h in zip(self.cells, states):
            x = cell(x, h)
            new.append(x)
        return x, new


def adam_update(param, grad, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; modifies ``param``, ``m``, ``v`` in place."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            adam_update(p.data, g, m, v, self.t, self.lr, *self.betas, self.eps)

    def state_dict(self):
        state = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m.{i}"] = m.copy()
            state[f"v.{i}"] = v.copy()
        return state

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"m.{i}"], dtype=float)
            self.v[i] = np.array(state[f"v.{i}"], dtype=float)


def save_checkpoint(path, arrays, meta):
    """Write named arrays plus JSON metadata to an ``.npz`` file atomically."""
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    meta = dict(meta, format_version=CHECKPOINT_VERSION)
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)

    def writer(fh):
        # fixed entry timestamps keep identical checkpoints byte-identical
        with zipfile.ZipFile(fh, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in sorted(payload):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(payload[name], order="C"),
                                          allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                            buf.getvalue())

    atomic_write_bytes(path, writer)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ConfigError(f"{path} is not a checkpoint (no metadata)")
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {meta.get('format_version')}")
    return arrays, meta
