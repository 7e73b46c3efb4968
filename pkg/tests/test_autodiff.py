import zlib

import numpy as np
import pytest

from conftest import probe
from focusret.autodiff import (
    PRIMITIVES,
    Tape,
    Tensor,
    check_gradients,
    ops,
    relative_error,
    scope,
    tape_report,
)
from focusret.errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    TapeStateError,
    VocabularyError,
)

SHAPES = [(3,), (2, 3), (4, 1), (2, 3, 4), (1, 5, 2)]


def _u(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away_from_zero(rng, shape):
    x = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return Tensor(x, requires_grad=True)


# (name, builder) where builder(rng, shape) -> (loss_fn, params)
def _unary(fn, make=_u):
    def build(rng, shape):
        x = make(rng, shape)
        return (lambda: probe(fn(x))), [x]

    return build


def _binary(fn, broadcast=False):
    def build(rng, shape):
        a = _u(rng, shape)
        b = _u(rng, shape[-1:] if broadcast else shape)
        return (lambda: probe(fn(a, b))), [a, b]

    return build


def _layer_norm(rng, shape):
    x = _u(rng, shape)
    g = _u(rng, shape[-1:])
    b = _u(rng, shape[-1:])
    return (lambda: probe(ops.layer_norm(x, g, b))), [x, g, b]


def _matmul(rng, shape):
    k = shape[-1]
    a = _u(rng, shape if len(shape) > 1 else (2, k))
    b = _u(rng, (k, 3))
    return (lambda: probe(ops.matmul(a, b))), [a, b]


def _concat(rng, shape):
    a, b = _u(rng, shape), _u(rng, shape)
    return (lambda: probe(ops.concat([a, b], axis=-1))), [a, b]


def _slice(rng, shape):
    x = _u(rng, shape)
    return (lambda: probe(ops.slice(x, (Ellipsis, slice(0, 1))))), [x]


def _reshape(rng, shape):
    x = _u(rng, shape)
    return (lambda: probe(ops.reshape(x, (-1,)))), [x]


def _transpose(rng, shape):
    x = _u(rng, shape)
    return (lambda: probe(ops.transpose(x))), [x]


def _embedding(rng, shape):
    table = _u(rng, (6, shape[-1]))
    idx = rng.integers(0, 6, size=shape[:-1] or (3,))
    return (lambda: probe(ops.embedding_lookup(table, idx))), [table]


def _sum(rng, shape):
    x = _u(rng, shape)
    return (lambda: probe(ops.sum(x, axis=-1, keepdims=True))), [x]


CASES = {
    "add": _binary(ops.add, broadcast=True),
    "sub": _binary(ops.sub, broadcast=True),
    "mul": _binary(ops.mul, broadcast=True),
    "scalar_mul": _unary(lambda x: ops.scalar_mul(x, -2.5)),
    "matmul": _matmul,
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, make=lambda rng, s: _u(rng, s, 0.2, 2.0)),
    "gelu": _unary(ops.gelu),
    "softmax": _unary(lambda x: ops.softmax(x, axis=-1)),
    "layer_norm": _layer_norm,
    "concat": _concat,
    "slice": _slice,
    "reshape": _reshape,
    "transpose": _transpose,
    "embedding_lookup": _embedding,
    "l2_normalize": _unary(lambda x: ops.l2_normalize(x, axis=-1), make=_away_from_zero),
    "clamp_min": _unary(ops.clamp_min, make=_away_from_zero),
    "sum": _sum,
}


def test_cases_cover_every_primitive():
    assert set(CASES) == set(PRIMITIVES)


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("shape", SHAPES, ids=str)
def test_primitive_matches_finite_differences(name, shape):
    rng = np.random.default_rng(zlib.crc32(f"{name}{shape}".encode()))
    loss_fn, params = CASES[name](rng, shape)
    assert check_gradients(loss_fn, params) < 1e-5


def test_matmul_identity():
    out = ops.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_3x4_4x2_tight_check(rng):
    a, b = _u(rng, (3, 4)), _u(rng, (4, 2))
    assert check_gradients(lambda: probe(ops.matmul(a, b)), [a, b]) < 1e-6


def test_matmul_saves_only_frozen_side():
    a = Tensor(np.ones((8, 16)))
    b = Tensor(np.ones((16, 4)), requires_grad=True)
    with Tape() as tape:
        ops.matmul(a, b)
    assert tape.entries[0].saved_bytes == 8 * 8 * 16 == 1024
    assert tape_report(tape).total_saved_bytes == 1024


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_softmax_and_l2_examples():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    np.testing.assert_allclose(ops.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])


def test_l2_normalize_zero_vector():
    with pytest.raises(DegenerateInputError):
        ops.l2_normalize(Tensor([0.0, 0.0]))


def test_linear_grad_is_input():
    x = np.array([1.0, -2.0, 3.0])
    w = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(w, Tensor(x)))
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, x)


def test_two_layer_mlp(rng):
    x = Tensor(rng.uniform(-1, 1, (5, 4)))
    w1, b1 = _u(rng, (4, 6)), _u(rng, (6,))
    w2, b2 = _u(rng, (6, 3)), _u(rng, (3,))

    def loss():
        h = ops.gelu(ops.add(ops.matmul(x, w1), b1))
        return probe(ops.add(ops.matmul(h, w2), b2))

    assert check_gradients(loss, [w1, b1, w2, b2]) < 1e-5


def test_frozen_subgraph_pushes_nothing(rng):
    x = Tensor(rng.standard_normal((4, 4)))
    w = Tensor(rng.standard_normal((4, 4)))
    with Tape() as tape:
        y = ops.gelu(ops.matmul(x, w))
        ops.softmax(ops.layer_norm(y, Tensor(np.ones(4)), Tensor(np.zeros(4))))
    assert tape.entries == []
    assert tape.total_saved_bytes == 0


def test_no_tape_is_inference_mode(rng):
    w = _u(rng, (3, 3))
    y = ops.matmul(w, w)
    assert y.node_id is None and not y.requires_grad


def test_saved_bytes_policy():
    x = Tensor(np.ones((2, 5)), requires_grad=True)
    g, b = Tensor(np.ones(5)), Tensor(np.zeros(5))
    with Tape() as tape:
        ops.exp(x)
        ops.log(x)
        ops.gelu(x)
        ops.softmax(x)
        ops.layer_norm(x, g, b)
        ops.l2_normalize(x)
        ops.clamp_min(x)
        ops.embedding_lookup(x, [0, 1, 1])
        ops.add(x, x)
        ops.scalar_mul(x, 2.0)
        ops.reshape(x, (10,))
    got = {e.op_name: e.saved_bytes for e in tape.entries}
    assert got == {
        "exp": 80, "log": 80, "gelu": 80, "softmax": 80,
        "layer_norm": 80 + 2 * 2 * 8, "l2_normalize": 80 + 16, "clamp_min": 80,
        "embedding_lookup": 24, "add": 0, "scalar_mul": 0, "reshape": 0,
    }  # fmt: skip
    assert tape.total_saved_bytes == sum(e.saved_bytes for e in tape.entries)


def test_entries_use_known_op_names(rng):
    w = _u(rng, (3, 3))
    with Tape() as tape:
        probe(ops.softmax(ops.matmul(w, w)))
    assert {e.op_name for e in tape.entries} <= PRIMITIVES


def test_report_matches_recount_and_scopes(rng):
    w = _u(rng, (4, 4))
    with Tape() as tape:
        with scope("enc"):
            with scope("blk"):
                h = ops.gelu(ops.matmul(w, w))
        with scope("head"):
            probe(ops.softmax(h))
    rep = tape_report(tape, scope_depth=2)
    assert rep.entry_count == len(tape.entries)
    assert sum(rep.by_op.values()) == rep.total_saved_bytes == sum(e.saved_bytes for e in tape.entries)
    assert set(rep.by_scope) == {"enc.blk", "head"}
    assert tape_report(Tape()).to_dict() == {"total_saved_bytes": 0, "entry_count": 0, "by_op": {}, "by_scope": {}}


def test_saved_bytes_monotone_during_forward(rng):
    w = _u(rng, (3, 3))
    seen = []
    with Tape() as tape:
        h = w
        for _ in range(4):
            h = ops.gelu(ops.matmul(h, w))
            seen.append(tape.total_saved_bytes)
    assert seen == sorted(seen)


def test_backward_contracts(rng):
    w = _u(rng, (3,))
    with Tape() as tape:
        vec = ops.mul(w, w)
    with pytest.raises(ContractError):
        tape.backward(vec)
    with Tape() as tape:
        loss = ops.sum(ops.mul(w, w))
    tape.backward(loss)
    with pytest.raises(TapeStateError):
        tape.backward(loss)


def test_grad_accumulates_over_reuse(rng):
    w = _u(rng, (3,))
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(w, w), w))
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, 2 * w.data + 1)


def test_embedding_lookup_frozen_rows_and_range(rng):
    table = _u(rng, (5, 3))
    with Tape() as tape:
        loss = ops.sum(ops.embedding_lookup(table, [0, 2, 2, 4], frozen_rows=[2]))
    tape.backward(loss)
    np.testing.assert_array_equal(table.grad[2], 0.0)
    np.testing.assert_array_equal(table.grad[0], 1.0)
    np.testing.assert_array_equal(table.grad[1], 0.0)
    with pytest.raises(VocabularyError):
        ops.embedding_lookup(table, [5])


def test_shape_errors():
    with pytest.raises(DimensionError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(DimensionError):
        ops.softmax(Tensor(np.ones(3)), axis=2)
    with pytest.raises(DimensionError):
        ops.reshape(Tensor(np.ones(6)), (4, 2))
    with pytest.raises(ContractError):
        ops.slice(Tensor(np.ones(4)), [0, 2])


def test_relative_error_scale():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([0.0, 2.0]), np.array([0.0, 2.2])) == pytest.approx(0.1 / 1.1)


def test_operator_overloads(rng):
    a, b = _u(rng, (2, 2)), _u(rng, (2, 2))
    np.testing.assert_allclose((a + b).data, a.data + b.data)
    np.testing.assert_allclose((a - b).data, a.data - b.data)
    np.testing.assert_allclose((a * 3.0).data, a.data * 3.0)
    np.testing.assert_allclose((a @ b).data, a.data @ b.data)
    np.testing.assert_allclose(a.T.data, a.data.T)
