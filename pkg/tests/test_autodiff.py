import numpy as np
import pytest

from chunklm import autodiff as ad
from chunklm.autodiff import Tape, Tensor, backward, gradcheck, primitive_forward


def scalar(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_sigmoid_at_zero():
    assert primitive_forward("sigmoid", [Tensor([0.0])]).item() == pytest.approx(0.5)


def test_layernorm_of_constant_vector_is_zero_before_affine():
    x = Tensor(np.full((3, 8), 2.5))
    gain = Tensor(np.ones(8))
    bias = Tensor(np.zeros(8))
    out = primitive_forward("layernorm", [x, gain, bias])
    assert np.allclose(out.data, 0.0, atol=1e-6)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor(np.eye(2))
    out = primitive_forward("matmul", [a, eye])
    assert np.array_equal(out.data, a.data)


def test_matmul_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_unknown_primitive_rejected():
    with pytest.raises(ValueError, match="unknown primitive"):
        primitive_forward("conv2d", [Tensor([1.0])])


def test_sigmoid_gradient_at_zero():
    x = scalar([0.0])
    with Tape() as tape:
        y = ad.sum_(ad.sigmoid(x))
    backward(tape, y)
    assert x.grad[0] == pytest.approx(0.25)


def test_tanh_gradient_at_zero():
    x = scalar([0.0])
    with Tape() as tape:
        y = ad.sum_(ad.tanh_(x))
    backward(tape, y)
    assert x.grad[0] == pytest.approx(1.0)


def test_backward_rejects_non_scalar_loss():
    x = scalar([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, y)


def test_matmul_sum_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    res = gradcheck(lambda a, b: ad.sum_(ad.matmul(a, b)), [a, b], step=1e-5)
    assert res.max_rel_error < 1e-6


def test_gradcheck_gelu_random_vector():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal(8), requires_grad=True)
    res = gradcheck(lambda x: ad.sum_(ad.gelu(x)), [x], step=1e-5)
    assert res.max_rel_error < 1e-5


def test_gradcheck_softmax_nll():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.standard_normal((1, 10)), requires_grad=True)
    target = 3

    def nll(logits):
        probs = ad.softmax(logits, axis=-1)
        picked = ad.slice_(probs, (0, target))
        return ad.neg(ad.log_(picked))

    res = gradcheck(nll, [logits], step=1e-5)
    assert res.max_rel_error < 1e-6


def test_gradcheck_constant_function_all_zero():
    x = Tensor(np.ones(5), requires_grad=True)
    res = gradcheck(lambda x: Tensor(np.asarray(3.0)), [x])
    assert res.max_rel_error == 0.0
    assert res.ok


def test_gradcheck_requires_float64():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        gradcheck(lambda x: ad.sum_(x), [x])


def test_gradcheck_report_flags_bad_elements():
    x = Tensor(np.ones(3), requires_grad=True)

    def broken(x):
        out = ad.sum_(x)
        # corrupt the analytic gradient through a lying custom op
        y = Tensor(out.data.copy())
        ad.record_op((out,), (y,), lambda g: (g * 2.0,))
        return y

    res = gradcheck(broken, [x])
    assert not res.ok
    assert len(res.failures) == 3


def test_every_primitive_matches_finite_differences_on_many_shapes():
    # >= 20 random shapes per primitive, 64-bit, step 1e-5, rel err < 1e-4
    from chunklm.diagnostics import primitive_checks

    lines = primitive_checks(seed=7, shapes_per_op=20)
    assert len(lines) == 17
    for line in lines:
        assert line.ok, f"{line.name}: max rel error {line.max_rel_error}"
        assert line.max_rel_error < 1e-4


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = Tensor(rng.standard_normal((4, 9)) * rng.uniform(0.1, 50))
        y = ad.softmax(x, axis=-1)
        assert np.all(y.data >= 0)
        assert np.allclose(y.data.sum(axis=-1), 1.0, atol=1e-9)


def test_dropout_replay_with_same_seed_is_bit_identical():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((6, 5)), requires_grad=True)

    def run():
        with Tape():
            h = ad.dropout(x, 0.4, seed=99, train=True)
            return ad.mul(h, h).data.copy()

    assert np.array_equal(run(), run())


def test_dropout_eval_is_identity():
    x = Tensor(np.ones((3, 3)))
    assert ad.dropout(x, 0.5, seed=1, train=False) is x


def test_dropout_inverted_scaling():
    x = Tensor(np.ones(10000))
    y = ad.dropout(x, 0.25, seed=5, train=True)
    kept = y.data[y.data > 0]
    assert np.allclose(kept, 1.0 / 0.75)


def test_backward_visits_each_op_once_in_reverse_order():
    calls = []

    def tracked(name, fn, *tensors):
        out = fn(*tensors)
        probe = Tensor(out.data.copy())

        def bwd(g):
            calls.append(name)
            return (g,)

        ad.record_op((out,), (probe,), bwd)
        return probe

    x = scalar([1.0, 2.0])
    with Tape() as tape:
        a = tracked("a", lambda t: ad.mul(t, t), x)
        b = tracked("b", lambda t: ad.add(t, 1.0), a)
        c = tracked("c", lambda t: ad.exp_(t), a)
        loss = ad.sum_(ad.add(b, c))
    backward(tape, loss)
    assert calls == ["c", "b", "a"]


def test_gradient_accumulates_across_reused_tensor():
    x = scalar([2.0])
    with Tape() as tape:
        y = ad.add(ad.mul(x, x), ad.mul(x, 3.0))  # x^2 + 3x
        loss = ad.sum_(y)
    backward(tape, loss)
    assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0)


def test_broadcast_add_unbroadcasts_gradient():
    a = Tensor(np.zeros((4, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.add(a, b))
    backward(tape, loss)
    assert a.grad.shape == (4, 3)
    assert b.grad.shape == (3,)
    assert np.allclose(b.grad, 4.0)


def test_embedding_lookup_rejects_out_of_range_ids():
    table = Tensor(np.zeros((4, 2)))
    with pytest.raises(ValueError, match="ids outside table"):
        ad.embedding_lookup(table, np.array([0, 4]))


def test_st_round_forward_hard_backward_identity():
    x = Tensor(np.array([0.2, 0.7, 0.5]), requires_grad=True)
    with Tape() as tape:
        y = ad.st_round(x)
        loss = ad.sum_(ad.mul(y, Tensor(np.array([1.0, 2.0, 3.0]))))
    assert np.array_equal(y.data, [0.0, 1.0, 0.0])
    backward(tape, loss)
    assert np.array_equal(x.grad, [1.0, 2.0, 3.0])


def test_add_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ValueError, match=r"add.*\(2, 3\).*\(4, 5\)"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_concat_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ValueError, match=r"concat.*\(2, 3\).*\(2, 4\)"):
        ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)


def test_frozen_tensors_shareable_concurrently():
    import threading

    x = Tensor(np.random.default_rng(0).standard_normal((20, 20)))
    results = []

    def work():
        with Tape():
            results.append(ad.sum_(ad.mul(x, x)).item())

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(results)) == 1


def test_distinct_tapes_on_distinct_threads():
    import threading

    errors = []

    def work(value):
        try:
            x = Tensor(np.full(4, value), requires_grad=True)
            for _ in range(200):
                x.grad = None
                with Tape() as tape:
                    loss = ad.sum_(ad.mul(x, x))
                backward(tape, loss)
                assert np.allclose(x.grad, 2 * x.data), x.grad
        except Exception as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(float(i + 1),)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
