import numpy as np
import pytest

from pigavatar import autodiff as ad
from pigavatar.autodiff import Tensor

from fd import numerical_grad, rel_err


def test_matmul_shape_rule():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 1)))
    assert ad.forward_op("matmul", [a, b]).shape == (2, 1)


def test_matmul_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 1\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_relu_definition():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_normalize_definition():
    np.testing.assert_allclose(ad.normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])


def test_normalize_zero_norm_is_error():
    with pytest.raises(ValueError, match="zero-norm"):
        ad.normalize(Tensor([0.0, 0.0, 0.0, 0.0]))


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_constant_root_gives_zero_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor(3.0)
    (g,) = ad.grad(c, [x])
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_backward_rejects_non_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(x * 2.0)


def test_normalize_gradient_matches_fd():
    w = np.array([0.3, -1.2])

    def f(v):
        return float((ad.normalize(Tensor(v)).data * w).sum())

    x = Tensor([3.0, 4.0], requires_grad=True)
    (g,) = ad.grad((ad.normalize(x) * Tensor(w)).sum(), [x])
    np.testing.assert_allclose(g, numerical_grad(f, [3.0, 4.0], 1e-5), atol=1e-6)


def test_tape_consumed_and_topological():
    with ad.Tape() as tape:
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ad.exp(x)
        z = (y * x).sum()
        nodes = [n[0] for n in tape.nodes]
        for i, (out, parents, _) in enumerate(tape.nodes):
            for p in parents:
                if not p._is_leaf:
                    assert nodes.index(p) < i
        ad.backward(z)
        assert len(tape) == 0


def _op_cases():
    """(name, builder(list of Tensors)->Tensor, input shapes, input sampler)."""
    pos = lambda r, s: r.uniform(0.5, 2.0, s)
    gen = lambda r, s: r.normal(size=s)
    # keep relu inputs away from the kink
    away = lambda r, s: r.choice([-1, 1], s) * r.uniform(0.1, 1.0, s)
    return [
        ("matmul", lambda a, b: ad.matmul(a, b), [(2, 3), (3, 2)], gen),
        ("add", lambda a, b: ad.add(a, b), [(3, 2), (2,)], gen),
        ("mul", lambda a, b: ad.mul(a, b), [(3, 2), (3, 1)], gen),
        ("relu", lambda a: ad.relu(a), [(5,)], away),
        ("sigmoid", lambda a: ad.sigmoid(a), [(5,)], gen),
        ("exp", lambda a: ad.exp(a), [(5,)], gen),
        ("log", lambda a: ad.log(a), [(5,)], pos),
        ("sin", lambda a: ad.sin(a), [(5,)], gen),
        ("cos", lambda a: ad.cos(a), [(5,)], gen),
        ("sum", lambda a: ad.sum_(a, axis=0), [(3, 4)], gen),
        ("normalize", lambda a: ad.normalize(a), [(3, 4)], gen),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)], gen),
        ("slice", lambda a: a[1:, ::2], [(3, 4)], gen),
        ("take", lambda a: ad.take(a, [0, 2, 2, 1]), [(3, 2)], gen),
        ("cross", lambda a, b: ad.cross(a, b), [(4, 3), (4, 3)], gen),
        ("einsum", lambda a, b: ad.einsum("nij,nj->ni", a, b), [(2, 3, 3), (2, 3)], gen),
        ("div", lambda a, b: ad.div(a, b), [(4,), (4,)], pos),
        ("sqrt", lambda a: ad.sqrt(a), [(4,)], pos),
        ("transpose", lambda a: ad.transpose(a, (1, 0, 2)), [(2, 3, 2)], gen),
        ("where", lambda a, b: ad.where(np.array([1, 0, 1, 0], bool), a, b), [(4,), (4,)], gen),
    ]


@pytest.mark.parametrize("case", _op_cases(), ids=lambda c: c[0])
def test_every_op_matches_finite_differences(case):
    name, build, shapes, sample = case
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for _ in range(100):
        xs = [sample(rng, s) for s in shapes]
        out_shape = build(*[Tensor(x) for x in xs]).shape
        w = rng.normal(size=out_shape)
        leaves = [Tensor(x, requires_grad=True) for x in xs]
        grads = ad.grad((build(*leaves) * Tensor(w)).sum(), leaves)
        for k in range(len(xs)):
            def f(v, k=k):
                args = [Tensor(v if j == k else xs[j]) for j in range(len(xs))]
                return float((build(*args).data * w).sum())
            worst = max(worst, rel_err(grads[k], numerical_grad(f, xs[k], 1e-5)))
    assert worst < 1e-4, f"{name}: worst relative error {worst:.2e}"


def test_linearity_of_backward():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=5)
    a, b = 1.7, -0.4

    def f(x):
        return ad.sin(x).sum()

    def g(x):
        return (ad.exp(x) * x).sum()

    x = Tensor(x0, requires_grad=True)
    (gf,) = ad.grad(f(x), [x])
    (gg,) = ad.grad(g(x), [x])
    (gc,) = ad.grad(f(x) * a + g(x) * b, [x])
    np.testing.assert_allclose(gc, a * gf + b * gg, atol=1e-10, rtol=0)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(7, 4)))
        loss = ad.sigmoid(ad.relu(x @ w)).sum()
        return ad.grad(loss, [w])[0]

    assert run().tobytes() == run().tobytes()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_grad():
            y = ad.exp(x)
        assert len(tape) == 0
        assert not y.requires_grad


def test_float32_propagates():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    y = (x * 2.0 + 1.0).sum()
    assert y.dtype == np.float32
    ad.backward(y)
    assert x.grad.dtype == np.float32
