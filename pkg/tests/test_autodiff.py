import numpy as np
import pytest

from fungi import autodiff as ad


def numeric_grad(build_loss, x0, eps=1e-6):
    """Finite-difference gradient of build_loss w.r.t. a leaf array."""

    def f(p):
        with ad.GradTape():
            leaf = ad.parameter(p)
            return build_loss(leaf).item()

    return ad.finite_diff_gradient(f, np.asarray(x0, dtype=np.float64), eps)


def tape_grad(build_loss, x0):
    leaf = ad.parameter(np.asarray(x0, dtype=np.float64))
    with ad.GradTape() as tape:
        loss = build_loss(leaf)
    return tape.backward(loss)[leaf]


def check_op(build_loss, x0, eps=1e-6, tol=1e-6):
    got = tape_grad(build_loss, x0)
    want = numeric_grad(build_loss, x0, eps)
    np.testing.assert_allclose(got, want, rtol=tol, atol=tol)


class TestPrimitiveValues:
    def test_softmax_symmetry(self):
        out = ad.softmax(ad.as_tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])

    def test_l2_normalize_345(self):
        out = ad.l2_normalize(ad.as_tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [0.6, 0.8])

    def test_layer_norm_constant_vector(self):
        x = ad.as_tensor(np.full(8, 2.5))
        out = ad.layer_norm(x, ad.as_tensor(np.ones(8)), ad.as_tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data, np.zeros(8), atol=1e-3)

    def test_softmax_temperature(self):
        z = np.array([1.0, 2.0, 3.0])
        out = ad.softmax(ad.as_tensor(z), tau=2.0)
        e = np.exp(z / 2.0)
        np.testing.assert_allclose(out.data, e / e.sum(), rtol=1e-12)

    def test_linear_matches_numpy(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)
        out = ad.linear(ad.as_tensor(x), ad.as_tensor(w), ad.as_tensor(b))
        np.testing.assert_allclose(out.data, x @ w.T + b, rtol=1e-12)

    def test_attention_uniform_when_scores_equal(self):
        # constant query/key rows give uniform attention => output rows equal mean of values
        tokens, dim, heads = 4, 8, 2
        q = np.ones((tokens, dim))
        k = np.ones((tokens, dim))
        v = np.random.default_rng(1).normal(size=(tokens, dim))
        out = ad.scaled_dot_product_attention(
            ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v), heads
        )
        np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (tokens, 1)), rtol=1e-10)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 6))
        a = ad.gelu(ad.softmax(ad.as_tensor(x), axis=1)).data
        b = ad.gelu(ad.softmax(ad.as_tensor(x), axis=1)).data
        assert np.array_equal(a, b)

    def test_nonfinite_output_raises(self):
        with pytest.raises(ad.NumericError):
            ad.l2_normalize(ad.as_tensor([0.0, 0.0]))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            ad.add(ad.as_tensor(np.ones(3)), ad.as_tensor(np.ones(4)))
        with pytest.raises(ValueError):
            ad.matmul(ad.as_tensor(np.ones((2, 3))), ad.as_tensor(np.ones((4, 2))))


class TestBackward:
    def test_quadratic(self):
        x = ad.parameter([1.0, 2.0])
        with ad.GradTape() as tape:
            loss = ad.total(ad.mul(x, x))
        np.testing.assert_allclose(tape.backward(loss)[x], [2.0, 4.0])

    def test_softmax_dot_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        z0 = rng.normal(size=6)
        c = rng.normal(size=6)
        build = lambda z: ad.total(ad.mul(ad.softmax(z), ad.as_tensor(c)))
        got = tape_grad(build, z0)
        want = numeric_grad(build, z0, eps=1e-5)
        rel = np.abs(got - want) / (np.abs(want) + 1e-12)
        assert rel.max() < 1e-6

    def test_fanout_accumulates(self):
        x = ad.parameter([1.0, 3.0])
        with ad.GradTape() as tape:
            y = ad.add(ad.mul(x, x), ad.scale(x, 2.0))  # x^2 + 2x
            loss = ad.total(y)
        np.testing.assert_allclose(tape.backward(loss)[x], [4.0, 8.0])

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(11)
        w0 = rng.normal(size=(3, 4))
        x = rng.normal(size=4)

        def run(mix):
            w = ad.parameter(w0)
            with ad.GradTape() as tape:
                y = ad.matmul(w, ad.as_tensor(x))
                la = ad.total(ad.mul(y, y))
                lb = ad.mean(ad.gelu(y))
                if mix == "a":
                    loss = la
                elif mix == "b":
                    loss = lb
                else:
                    loss = ad.add(la, lb)
            return tape.backward(loss)[w]

        np.testing.assert_allclose(run("sum"), run("a") + run("b"), atol=1e-10)

    def test_non_scalar_loss_rejected(self):
        x = ad.parameter(np.ones(3))
        with ad.GradTape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_detached_loss_rejected(self):
        x = ad.parameter(np.ones(3))
        with ad.GradTape():
            loss = ad.total(x)
        with ad.GradTape() as other:
            ad.total(ad.mul(x, x))
            with pytest.raises(ValueError):
                other.backward(loss)

    def test_tape_is_single_use(self):
        x = ad.parameter(np.ones(2))
        with ad.GradTape() as tape:
            loss = ad.total(ad.mul(x, x))
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_no_grad_blocks_recording(self):
        x = ad.parameter(np.ones(2))
        with ad.GradTape() as tape:
            with ad.no_grad():
                frozen = ad.mul(x, x)
            loss = ad.total(ad.add(x, ad.as_tensor(frozen.data)))
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[x], [1.0, 1.0])
        assert not frozen.requires_grad

    def test_untracked_inputs_skip_tape(self):
        with ad.GradTape() as tape:
            ad.mul(ad.as_tensor([1.0]), ad.as_tensor([2.0]))
        assert len(tape) == 0


class TestGradientsAgainstOracle:
    """Every differentiable primitive against central finite differences."""

    def test_matmul_matrix(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=(4, 3))
        check_op(lambda a: ad.total(ad.gelu(ad.matmul(a, ad.as_tensor(b)))), rng.normal(size=(2, 4)))

    def test_matmul_vector(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=4)
        check_op(lambda a: ad.total(ad.mul(ad.matmul(a, ad.as_tensor(v)), ad.matmul(a, ad.as_tensor(v)))), rng.normal(size=(3, 4)))

    def test_linear_all_terms(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 3))

        def build(w):
            y = ad.linear(ad.as_tensor(x), w)
            return ad.total(ad.mul(y, y))

        check_op(build, rng.normal(size=(4, 3)))

    def test_layer_norm(self):
        rng = np.random.default_rng(3)
        g = rng.normal(size=(4, 5))
        check_op(
            lambda x: ad.total(ad.mul(ad.layer_norm(x, ad.as_tensor(np.full(5, 1.3)), ad.as_tensor(np.zeros(5))), ad.as_tensor(g))),
            rng.normal(size=(4, 5)),
            eps=1e-5,
            tol=1e-5,
        )

    def test_layer_norm_affine_params(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(3, 5))
        g = rng.normal(size=(3, 5))

        def build(gb):
            gamma = ad.narrow(gb, 0, 0, 5)
            beta = ad.narrow(gb, 0, 5, 5)
            return ad.total(ad.mul(ad.layer_norm(ad.as_tensor(x), gamma, beta), ad.as_tensor(g)))

        check_op(build, rng.normal(size=10))

    def test_log_softmax_with_tau(self):
        rng = np.random.default_rng(4)
        c = rng.normal(size=7)
        check_op(lambda z: ad.total(ad.mul(ad.log_softmax(z, tau=3.0), ad.as_tensor(c))), rng.normal(size=7))

    def test_l2_normalize(self):
        rng = np.random.default_rng(5)
        c = rng.normal(size=(3, 4))
        check_op(lambda x: ad.total(ad.mul(ad.l2_normalize(x), ad.as_tensor(c))), rng.normal(size=(3, 4)) + 0.5)

    def test_attention(self):
        rng = np.random.default_rng(6)
        tokens, dim = 5, 8
        k = rng.normal(size=(tokens, dim))
        v = rng.normal(size=(tokens, dim))
        c = rng.normal(size=(tokens, dim))

        def build(q):
            out = ad.scaled_dot_product_attention(q, ad.as_tensor(k), ad.as_tensor(v), 2)
            return ad.total(ad.mul(out, ad.as_tensor(c)))

        check_op(build, rng.normal(size=(tokens, dim)), eps=1e-5, tol=1e-5)

    def test_attention_kv_path(self):
        rng = np.random.default_rng(7)
        tokens, dim = 4, 6
        q = rng.normal(size=(tokens, dim))
        c = rng.normal(size=(tokens, dim))

        def build(kv):
            k = ad.narrow(kv, 0, 0, tokens)
            v = ad.narrow(kv, 0, tokens, tokens)
            out = ad.scaled_dot_product_attention(ad.as_tensor(q), k, v, 3)
            return ad.total(ad.mul(out, ad.as_tensor(c)))

        check_op(build, rng.normal(size=(2 * tokens, dim)), eps=1e-5, tol=1e-5)

    def test_concat_stack_narrow_reshape(self):
        rng = np.random.default_rng(8)
        c = rng.normal(size=12)

        def build(x):
            a = ad.narrow(x, 0, 0, 2)
            b = ad.narrow(x, 0, 1, 2)
            joined = ad.concat([a, b], axis=1)  # (2, 6)
            flat = ad.reshape(ad.transpose(joined), (12,))
            return ad.total(ad.mul(flat, ad.as_tensor(c)))

        check_op(build, rng.normal(size=(3, 3)))

    def test_mean_axis_and_stack(self):
        rng = np.random.default_rng(9)

        def build(x):
            rows = [ad.mean(ad.narrow(x, 0, i, 1)) for i in range(3)]
            return ad.mean(ad.mul(ad.stack(rows), ad.stack(rows)))

        check_op(build, rng.normal(size=(3, 5)))


class TestFiniteDiffOracle:
    def test_square(self):
        g = ad.finite_diff_gradient(lambda p: float(p[0] ** 2), np.array([3.0]), eps=1e-4)
        assert abs(g[0] - 6.0) < 1e-7

    def test_quadratic_form(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(5, 5))
        p = rng.normal(size=5)
        g = ad.finite_diff_gradient(lambda q: float(q @ a @ q), p, eps=1e-5)
        np.testing.assert_allclose(g, (a + a.T) @ p, atol=1e-6)

    def test_constant(self):
        g = ad.finite_diff_gradient(lambda p: 1.25, np.zeros(4), eps=1e-4)
        np.testing.assert_allclose(g, np.zeros(4))

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            ad.finite_diff_gradient(lambda p: 0.0, np.zeros(2), eps=0.0)
