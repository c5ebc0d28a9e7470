import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grad_fd_error, rel_err
from manigrad import autodiff as ad
from manigrad.errors import SecondOrderError, ShapeError
from manigrad.models import ClassLogit

TRIALS = 100
TOL = 1e-6


def away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(-2, 2, shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


# (name, fn, input generator)
UNARY = [
    ("exp", ad.exp, lambda r: r.uniform(-2, 2, (3, 4))),
    ("log", ad.log, lambda r: r.uniform(0.2, 3, (3, 4))),
    ("reciprocal", ad.reciprocal, lambda r: away_from_zero(r, (3, 4), 0.3)),
    ("square", ad.square, lambda r: r.normal(size=(3, 4))),
    ("sqrt", ad.sqrt, lambda r: r.uniform(0.2, 3, (3, 4))),
    ("sin", ad.sin, lambda r: r.normal(size=(3, 4))),
    ("cos", ad.cos, lambda r: r.normal(size=(3, 4))),
    ("tanh", ad.tanh, lambda r: r.normal(size=(3, 4))),
    ("sigmoid", ad.sigmoid, lambda r: r.normal(size=(3, 4))),
    ("softplus", ad.softplus, lambda r: r.normal(size=(3, 4)) * 3),
    ("silu", ad.silu, lambda r: r.normal(size=(3, 4))),
    ("elu", ad.elu, lambda r: away_from_zero(r, (3, 4))),
    ("relu", ad.relu, lambda r: away_from_zero(r, (3, 4))),
    ("scale", lambda a: ad.scale(a, -1.7), lambda r: r.normal(size=(3, 4))),
    ("shift", lambda a: ad.shift(a, 0.3), lambda r: r.normal(size=(3, 4))),
    ("transpose", ad.transpose, lambda r: r.normal(size=(3, 4))),
    ("transpose_axes", lambda a: ad.transpose(a, (1, 2, 0)), lambda r: r.normal(size=(2, 3, 4))),
    ("reshape", lambda a: ad.reshape(a, (2, 6)), lambda r: r.normal(size=(3, 4))),
    ("sum", ad.sum, lambda r: r.normal(size=(3, 4))),
    ("sum_axis", lambda a: ad.sum(a, axis=1), lambda r: r.normal(size=(3, 4))),
    ("mean_keepdims", lambda a: ad.mean(a, axis=0, keepdims=True), lambda r: r.normal(size=(3, 4))),
    ("broadcast_to", lambda a: ad.broadcast_to(a, (5, 4)), lambda r: r.normal(size=(1, 4))),
    ("index_slice", lambda a: ad.index(a, (slice(None), slice(1, 3))), lambda r: r.normal(size=(3, 4))),
    ("index_fancy", lambda a: ad.index(a, (np.array([0, 2, 2]), np.array([1, 0, 1]))),
     lambda r: r.normal(size=(3, 4))),
    ("blur", lambda a: ad.gaussian_blur(a, 1.3), lambda r: r.normal(size=(9, 7))),
]

BINARY = [
    ("add", ad.add, (3, 4), (3, 4)),
    ("sub", ad.sub, (3, 4), (3, 4)),
    ("mul", ad.mul, (3, 4), (3, 4)),
    ("matmul", ad.matmul, (3, 4), (4, 2)),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), (3, 4), (3, 2)),
]


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name,fn,gen", UNARY, ids=[u[0] for u in UNARY])
    def test_unary_matches_finite_differences(self, name, fn, gen):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        errs = [grad_fd_error(fn, [gen(rng)], rng) for _ in range(TRIALS)]
        assert max(errs) <= TOL, f"{name}: worst relative error {max(errs):.2e}"

    @pytest.mark.parametrize("name,fn,sa,sb", BINARY, ids=[b[0] for b in BINARY])
    def test_binary_matches_finite_differences(self, name, fn, sa, sb):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        errs = [grad_fd_error(fn, [rng.normal(size=sa), rng.normal(size=sb)], rng) for _ in range(TRIALS)]
        assert max(errs) <= TOL

    def test_operators_build_the_same_graph(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

        def fn(x, y):
            return (x * y - y) / (x * x + ad.Tensor(np.ones((2, 3)))) + (-x)

        assert grad_fd_error(fn, [a, b], rng) <= TOL

    def test_second_order_matches_fd_of_first_order(self, rng):
        # d/dx of sum(v * grad f(x)) for f = sum(tanh(x)^3)
        x = rng.normal(size=(4,))
        v = rng.normal(size=(4,))

        def inner(t):
            th = ad.tanh(t)
            return ad.sum(ad.mul(ad.square(th), th))

        def outer(g, t):
            return ad.sum(ad.mul(g, ad.Tensor(v)))

        got = ad.second_order_grad(inner, outer, x)
        # closed form: Hessian is diagonal with d2/dx2 tanh^3
        th = np.tanh(x)
        s2 = 1 - th ** 2
        hdiag = 6 * th * s2 ** 2 - 6 * th ** 3 * s2
        np.testing.assert_allclose(got, hdiag * v, rtol=1e-10)


class TestFunctional:
    def test_vjp_and_jvp_agree_with_jacobian(self, rng):
        A = rng.normal(size=(3, 5))

        def fn(z):
            return ad.tanh(ad.matmul(z, ad.Tensor(A)))

        z = rng.normal(size=(1, 3))
        J = ad.jacobian(fn, z).reshape(5, 3)
        u = rng.normal(size=(1, 3))
        v = rng.normal(size=(1, 5))
        np.testing.assert_allclose(ad.jvp(fn, z, u)[0], J @ u[0], rtol=1e-12)
        np.testing.assert_allclose(ad.vjp(fn, z, v)[0], v[0] @ J, rtol=1e-12)

    def test_grad_of_unused_input_is_zero(self):
        a = ad.Tensor(np.ones(3), requires_grad=True)
        b = ad.Tensor(np.ones(2), requires_grad=True)
        ga, gb = ad.grad(ad.sum(ad.square(a)), [a, b])
        np.testing.assert_array_equal(gb.data, np.zeros(2))
        np.testing.assert_array_equal(ga.data, 2 * np.ones(3))

    def test_backward_accumulates_into_leaves(self):
        a = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        ad.backward(ad.sum(ad.square(a)))
        ad.backward(ad.sum(a))
        np.testing.assert_array_equal(a.grad, [3.0, 5.0])

    def test_value_and_grad(self):
        v, g = ad.value_and_grad(lambda t: ad.sum(ad.exp(t)), np.zeros(3))
        assert v == 3.0
        np.testing.assert_array_equal(g, np.ones(3))

    def test_no_grad_records_nothing(self):
        a = ad.Tensor(np.ones(2), requires_grad=True)
        with ad.no_grad():
            out = ad.square(a)
        assert not out.requires_grad
        assert ad.is_grad_enabled()

    def test_caller_array_stays_writable(self):
        z = np.zeros(3)
        ad.Tensor(z, requires_grad=True)
        z[0] = 1.0
        assert z[0] == 1.0


class TestErrors:
    def test_no_implicit_broadcasting(self):
        with pytest.raises(ShapeError) as info:
            ad.add(ad.Tensor(np.ones((3, 1))), ad.Tensor(np.ones((3, 4))))
        assert info.value.primitive == "add"

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\[3, 4\]"):
            ad.matmul(ad.Tensor(np.ones((3, 4))), ad.Tensor(np.ones((3, 4))))

    def test_relu_second_order_raises(self):
        x = ad.Tensor(np.array([0.5, -0.2]), requires_grad=True)
        g = ad.grad(ad.sum(ad.square(ad.relu(x))), x, create_graph=True)
        # first-order through relu is fine; the mask itself is not differentiable
        with pytest.raises(SecondOrderError):
            ad.grad(ad.sum(g), x)

    def test_guided_relu_second_order_raises(self):
        x = ad.Tensor(np.array([0.5, 0.2]), requires_grad=True)
        g = ad.grad(ad.sum(ad.square(ad.guided_relu(x))), x, create_graph=True)
        with pytest.raises(SecondOrderError):
            ad.grad(ad.sum(g), x)

    def test_backward_needs_scalar(self):
        with pytest.raises(ShapeError):
            ad.backward(ad.Tensor(np.ones(2), requires_grad=True))


class TestNetworkGradients:
    def test_classifier_input_gradient(self, tiny_classifier):
        rng = np.random.default_rng(0)
        for mode in ("native", "softplus"):
            net = tiny_classifier.with_mode(mode)
            errs = [grad_fd_error(lambda x: ClassLogit(net, 1)(x), [rng.uniform(-1, 1, (2, 64))], rng)
                    for _ in range(TRIALS)]
            assert max(errs) <= TOL, mode

    def test_decoder_and_encoder_gradients(self, tiny_vae):
        rng = np.random.default_rng(1)
        errs = [grad_fd_error(tiny_vae.decoder, [rng.normal(size=(3, 2))], rng) for _ in range(TRIALS)]
        errs += [grad_fd_error(tiny_vae.encoder_mean_fn, [rng.uniform(-1, 1, (2, 64))], rng)
                 for _ in range(TRIALS)]
        assert max(errs) <= TOL

    def test_parameter_gradient(self, tiny_classifier):
        from manigrad.models import cross_entropy, forward

        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, (5, 64))
        y = np.array([0, 1, 2, 1, 0])
        specs = tiny_classifier.specs
        params = [p for pair in tiny_classifier.params for p in pair]

        def loss(*ps):
            pairs = [(ps[i], ad.reshape(ps[i + 1], (1, -1))) for i in range(0, len(ps), 2)]
            return cross_entropy(forward(specs, pairs, ad.Tensor(x), "softplus"), y)

        errs = [grad_fd_error(loss, params, rng) for _ in range(20)]
        assert max(errs) <= TOL

    def test_double_backprop_through_softplus_network(self, tiny_classifier):
        # gradient of ||grad_x F||^2, checked against finite differences
        net = tiny_classifier.with_mode("softplus")
        rng = np.random.default_rng(3)

        def gnorm(x):
            g = ad.grad(ad.sum(ClassLogit(net, 0)(x)), x, create_graph=True)
            return ad.sum(ad.square(g))

        for _ in range(10):
            x0 = rng.uniform(-1, 1, (1, 64))
            xt = ad.Tensor(x0, requires_grad=True)
            analytic = ad.grad(gnorm(xt), xt).data
            v = rng.normal(size=x0.shape)
            h = 1e-5

            def f(t):
                xt2 = ad.Tensor(x0 + t * v, requires_grad=True)
                return gnorm(xt2).item()

            numeric = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)
            assert rel_err(np.sum(analytic * v), numeric) <= TOL


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
    def test_linearity_of_grad_in_cotangent(self, values):
        x = np.array(values)
        fn = lambda t: ad.sin(t)  # noqa: E731
        a = ad.vjp(fn, x, np.ones_like(x))
        b = ad.vjp(fn, x, 2 * np.ones_like(x))
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 4.0))
    def test_blur_preserves_mass_and_constants(self, h, w, sigma):
        img = np.full((h, w), 0.7)
        out = ad.gaussian_blur(ad.Tensor(img), sigma).data
        np.testing.assert_allclose(out, img, rtol=1e-12)
        np.testing.assert_allclose(ad.blur_matrix(h, sigma).sum(axis=1), 1.0, rtol=1e-12)


class TestWorkedValues:
    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(ad.Tensor(a), ad.Tensor(np.eye(2))).data, a)

    def test_softplus_at_zero(self):
        assert ad.softplus(ad.Tensor(np.zeros(1))).data[0] == pytest.approx(0.6931471805599453, abs=1e-16)

    def test_tanh_backward_at_zero(self):
        x = ad.Tensor(np.zeros(3), requires_grad=True)
        g = ad.grad(ad.tanh(x), x, grad_output=ad.Tensor(np.array([1.5, -2.0, 0.25])))
        np.testing.assert_array_equal(g.data, [1.5, -2.0, 0.25])

    def test_linear_and_quadratic_gradients(self):
        _, g = ad.value_and_grad(lambda t: ad.sum(ad.mul(t, ad.Tensor(np.array([2.0, -1.0])))), np.array([3.0, 5.0]))
        np.testing.assert_array_equal(g, [2.0, -1.0])
        _, g = ad.value_and_grad(lambda t: ad.sum(ad.square(t)), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])

    def test_vjp_identity_and_linear(self, rng):
        v = rng.normal(size=(1, 3))
        np.testing.assert_array_equal(ad.vjp(lambda z: z, rng.normal(size=(1, 3)), v), v)
        A = rng.normal(size=(3, 2))
        w = rng.normal(size=(1, 3))
        got = ad.vjp(lambda z: ad.matmul(z, ad.Tensor(A.T)), rng.normal(size=(1, 2)), w)
        np.testing.assert_allclose(got[0], A.T @ w[0], rtol=1e-14)

    def test_vjp_matches_explicit_jacobian_two_layer(self, rng):
        W1, W2 = rng.normal(size=(3, 8)), rng.normal(size=(8, 5))

        def dec(z):
            return ad.tanh(ad.matmul(ad.elu(ad.matmul(z, ad.Tensor(W1))), ad.Tensor(W2)))

        z = rng.normal(size=(1, 3))
        J = ad.jacobian(dec, z).reshape(5, 3)
        for _ in range(10):
            v = rng.normal(size=(1, 5))
            assert rel_err(ad.vjp(dec, z, v)[0], v[0] @ J) <= 1e-10

    def test_cube_second_derivative(self):
        x = ad.Tensor(np.array([2.0]), requires_grad=True)
        g = ad.grad(ad.sum(ad.mul(ad.square(x), x)), x, create_graph=True)
        assert ad.grad(ad.sum(g), x).data[0] == pytest.approx(12.0, rel=1e-14)

    def test_softplus_hessian_diagonal(self):
        h = ad.second_order_grad(lambda t: ad.sum(ad.softplus(t)), lambda g, t: ad.sum(g), np.zeros(4))
        np.testing.assert_allclose(h, 0.25, rtol=1e-14)
