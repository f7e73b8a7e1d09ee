import numpy as np
import pytest

from sgncde import autodiff as ad
from sgncde.autodiff import Tensor, numerical_gradient, relative_error
from sgncde.errors import ShapeError, UsageError
from sgncde.nn import MLP, Adam, GRUCell, GRUStack, Linear, load_checkpoint, save_checkpoint

TOL = 1e-4


def check_grad(fn, arrays):
    """Backward-mode gradients of ``sum(w * fn(*tensors))`` vs central differences."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = np.random.default_rng(123).normal(size=out.shape)
    (out * w).sum().backward()

    def scalar():
        return float(np.sum(w * fn(*[Tensor(t.data) for t in tensors]).data))

    fd = numerical_gradient(scalar, [t.data for t in tensors])
    return max(relative_error(t.grad, g) for t, g in zip(tensors, fd))


def positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


OPS = {
    "add": (lambda a, b: a + b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (lambda a, b: a - b, lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
    "mul": (lambda a, b: a * b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "div": (lambda a, b: a / b, lambda r: [r.normal(size=(3, 4)), positive(r, (4,))]),
    "pow": (lambda a: a**3, lambda r: [r.normal(size=(5,))]),
    "matmul": (lambda a, b: a @ b, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "sum": (lambda a: a.sum(axis=1), lambda r: [r.normal(size=(3, 4, 2))]),
    "mean": (lambda a: a.mean(axis=(0, 2), keepdims=True), lambda r: [r.normal(size=(3, 4, 2))]),
    "reshape": (lambda a: a.reshape(6, 2) * 1.5, lambda r: [r.normal(size=(3, 4))]),
    "swapaxes": (lambda a: a.T, lambda r: [r.normal(size=(2, 3, 4))]),
    "slice": (lambda a: a[1:, ::2], lambda r: [r.normal(size=(4, 5))]),
    "gather": (lambda a: a[np.array([0, 2, 2]), np.array([1, 1, 3])],
               lambda r: [r.normal(size=(4, 5))]),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), lambda r: [r.normal(size=(2, 3)),
                                                                  r.normal(size=(1, 3))]),
    "stack": (lambda a, b: ad.stack([a, b], axis=1), lambda r: [r.normal(size=(2, 3)),
                                                                r.normal(size=(2, 3))]),
    "exp": (ad.exp, lambda r: [r.normal(size=(4,))]),
    "log": (ad.log, lambda r: [positive(r, (4,))]),
    "sqrt": (ad.sqrt, lambda r: [positive(r, (4,))]),
    "sin": (ad.sin, lambda r: [r.normal(size=(4,))]),
    "cos": (ad.cos, lambda r: [r.normal(size=(4,))]),
    "tanh": (ad.tanh, lambda r: [r.normal(size=(4,))]),
    "sigmoid": (ad.sigmoid, lambda r: [r.normal(size=(4,))]),
    "softplus": (ad.softplus, lambda r: [r.normal(size=(4,))]),
    "elu": (ad.elu, lambda r: [r.normal(size=(20,))]),
    "frobenius_norm": (lambda a: ad.frobenius_norm(a, axis=(-2, -1)),
                       lambda r: [r.normal(size=(3, 3, 3))]),
    "cross": (ad.cross, lambda r: [r.normal(size=(4, 3)), r.normal(size=(4, 3))]),
    "hat": (ad.hat, lambda r: [r.normal(size=(2, 3))]),
    "where": (lambda a, b: ad.where(np.array([True, False, True]), a, b),
              lambda r: [r.normal(size=(3,)), r.normal(size=(3,))]),
    "unary": (lambda a: ad.unary(a, lambda x: x**3 - x, lambda x: 3 * x**2 - 1),
              lambda r: [r.normal(size=(4,))]),
    "scalar_ops": (lambda a: (2.0 - a) * 3.0 / 4.0 + 1.0, lambda r: [r.normal(size=(3,))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, make = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(10):
        arrays = make(rng)
        if name == "elu":
            arrays[0][np.abs(arrays[0]) < 1e-3] = 0.5
        assert check_grad(fn, arrays) < TOL


def test_forward_values():
    assert ad.elu(Tensor(0.0)).item() == 0.0
    assert ad.elu(Tensor(2.5)).item() == 2.5
    assert abs(ad.elu(Tensor(-1.0)).item() - (np.exp(-1) - 1)) < 1e-15
    assert abs(ad.frobenius_norm(Tensor(np.eye(3))).item() - np.sqrt(3)) < 1e-15
    assert (Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 4)))).shape == (2, 4)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    assert np.allclose(x.grad, 4 * x.data + 3 * x.data**2 - 2 * x.data)


def test_backward_non_scalar_is_usage_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2).backward()


def test_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) @ Tensor(np.ones((3, 1)))


def test_no_grad_into_constants():
    c = Tensor(np.ones(3))
    x = Tensor(np.ones(3), requires_grad=True)
    (c * x).sum().backward()
    assert c.grad is None and x.grad is not None
    y = c * 2.0
    assert not y.requires_grad and y._parents == ()


def test_numpy_left_operand_defers():
    x = Tensor(np.ones(3), requires_grad=True)
    y = np.arange(3.0) * x + np.ones(3)
    assert isinstance(y, Tensor)
    y.sum().backward()
    assert np.array_equal(x.grad, np.arange(3.0))


def test_long_chain_backward_no_recursion_limit():
    x = Tensor(1.0, requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0001
    y.backward()
    assert abs(x.grad - 1.0001**5000) < 1e-9


def test_mlp_gradient():
    rng = np.random.default_rng(0)
    mlp = MLP([5, 8, 8, 8, 3], rng)
    assert mlp.num_parameters() == 6 * 8 + 9 * 8 + 9 * 8 + 9 * 3
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 3))

    def loss():
        return (mlp(Tensor(x)) * w).sum()

    mlp.zero_grad()
    loss().backward()
    params = mlp.parameters()
    fd = numerical_gradient(lambda: loss().item(), [p.data for p in params])
    assert max(relative_error(p.grad, g) for p, g in zip(params, fd)) < TOL


def test_gru_cell_gradient_over_five_steps():
    rng = np.random.default_rng(1)
    cell = GRUCell(4, 6, rng)
    xs = rng.normal(size=(5, 2, 4))
    h0 = rng.normal(size=(2, 6))
    w = rng.normal(size=(2, 6))
    x_t = Tensor(xs.copy(), requires_grad=True)

    def loss():
        h = Tensor(h0)
        for t in range(5):
            h = cell(x_t[t], h)
        return (h * w).sum()

    loss().backward()
    params = cell.parameters() + [x_t]
    fd = numerical_gradient(lambda: loss().item(), [p.data for p in params])
    assert max(relative_error(p.grad, g) for p, g in zip(params, fd)) < TOL


def test_gru_matches_reference_equations():
    rng = np.random.default_rng(2)
    cell = GRUCell(3, 4, rng)
    x, h = rng.normal(size=(1, 3)), rng.normal(size=(1, 4))
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    Wi, Wh, bi, bh = (cell.w_in.data, cell.w_hid.data, cell.b_in.data, cell.b_hid.data)
    gi, gh = x @ Wi + bi, h @ Wh + bh
    r = sig(gi[:, :4] + gh[:, :4])
    z = sig(gi[:, 4:8] + gh[:, 4:8])
    n = np.tanh(gi[:, 8:] + r * gh[:, 8:])
    expected = (1 - z) * n + z * h
    assert np.allclose(cell(Tensor(x), Tensor(h)).data, expected, atol=1e-14)


def test_gru_stack_shapes():
    stack = GRUStack(10, 7, 3, np.random.default_rng(3))
    out, states = stack(Tensor(np.ones((2, 10))), stack.initial_state(2))
    assert out.shape == (2, 7) and len(states) == 3


def test_linear_init_and_zero():
    rng = np.random.default_rng(4)
    lin = Linear(16, 3, rng)
    assert np.abs(lin.weight.data).max() <= 0.25
    z = Linear(16, 6, rng, zero=True, bias=[1, 0, 0, 0, 1, 0])
    assert np.array_equal(z.weight.data, np.zeros((16, 6)))
    assert np.array_equal(z.bias.data, [1, 0, 0, 0, 1, 0])


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([1.0])
    opt.step()
    assert abs(p.data[0] + 0.1) < 1e-6


def test_adam_quadratic_bowl():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=0.05)
    for _ in range(200):
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step()
    assert abs(p.data[0]) < 1e-3


def test_tape_replay_deterministic():
    def run():
        rng = np.random.default_rng(5)
        mlp = MLP([3, 16, 16, 1], rng)
        opt = Adam(mlp.parameters(), lr=1e-2)
        x = rng.normal(size=(8, 3))
        losses = []
        for _ in range(5):
            opt.zero_grad()
            loss = (mlp(Tensor(x)) ** 2).mean()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return losses

    assert run() == run()


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    mlp = MLP([3, 4, 2], rng)
    path = tmp_path / "m.npz"
    save_checkpoint(path, mlp.state_dict(), {"kind": "mlp", "widths": [3, 4, 2]})
    arrays, meta = load_checkpoint(path)
    assert meta["kind"] == "mlp" and meta["format_version"] == 1
    other = MLP([3, 4, 2], np.random.default_rng(7))
    other.load_state_dict(arrays)
    x = Tensor(rng.normal(size=(2, 3)))
    assert np.array_equal(other(x).data, mlp(x).data)
