import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focusret.autodiff import Tape, Tensor, check_gradients, ops
from focusret.config import LossConfig
from focusret.errors import ContractError, DegenerateInputError
from focusret.losses import (
    NegativeQueue,
    batch_queue_loss,
    cosine_similarity,
    difficulty_weight,
    infonce_batch_loss,
    init_log_tau,
    queue_loss,
    queue_negatives_for,
    queue_push,
    total_loss,
)


def _unit(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _filled(rng, capacity, dim, scenes, n=None):
    q = NegativeQueue(capacity)
    n = capacity if n is None else n
    if n:
        q.push(_unit(rng, (n, dim)), rng.integers(0, scenes, n).tolist())
    return q


# -- cosine ----------------------------------------------------------------------


def test_cosine_examples():
    a = Tensor([1.0, 2.0, -1.0])
    assert cosine_similarity(a, a).data == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).data == 0.0
    assert cosine_similarity(Tensor([3.0, 4.0]), Tensor([4.0, 3.0])).data == pytest.approx(0.96, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


# -- queue -----------------------------------------------------------------------


def test_fifo_example():
    q = NegativeQueue(8)
    for start in (0, 4, 8):
        queue_push(q, np.arange(start, start + 4, dtype=float)[:, None], [0] * 4)
    assert [e.embedding[0] for e in q] == list(range(4, 12))


def test_default_capacity_is_four_batches():
    assert NegativeQueue.for_batch(32).capacity == 128
    assert NegativeQueue.for_batch(8, LossConfig().queue_mult).capacity == 32


def test_push_rejects_taped_embeddings():
    q = NegativeQueue(4)
    t = Tensor(np.ones((2, 3)), requires_grad=True)
    with pytest.raises(ContractError):
        q.push(t, [0, 1])
    with Tape():
        taped = ops.add(t, t)
    with pytest.raises(ContractError):
        q.push(taped, [0, 1])
    q.push(taped.detach(), [0, 1])
    assert len(q) == 2


def test_negatives_filter_examples():
    q = NegativeQueue(8)
    q.push(np.arange(8.0)[:, None], [1, 2, 1, 3, 1, 4, 5, 6])
    got = queue_negatives_for(q, 1)
    assert [g[0] for g in got] == [1.0, 3.0, 5.0, 6.0, 7.0]
    assert len(queue_negatives_for(q, 9)) == 8
    same = NegativeQueue(3)
    same.push(np.ones((3, 2)), [2, 2, 2])
    assert queue_negatives_for(same, 2) == []


@settings(max_examples=60, deadline=None)
@given(
    capacity=st.integers(0, 12),
    sizes=st.lists(st.integers(1, 7), min_size=1, max_size=8),
)
def test_queue_is_bounded_fifo(capacity, sizes):
    q = NegativeQueue(capacity)
    pushed = []
    for size in sizes:
        vals = list(range(len(pushed), len(pushed) + size))
        q.push(np.array(vals, dtype=float)[:, None], [v % 3 for v in vals])
        pushed.extend(vals)
        assert len(q) == min(capacity, len(pushed))
    kept = pushed[len(pushed) - len(q) :] if len(q) else []
    assert [int(e.embedding[0]) for e in q] == kept


@settings(max_examples=60, deadline=None)
@given(
    scenes=st.lists(st.integers(0, 4), min_size=0, max_size=10),
    positive=st.integers(0, 4),
)
def test_filter_soundness(scenes, positive):
    q = NegativeQueue(10)
    if scenes:
        q.push(np.arange(len(scenes), dtype=float)[:, None], scenes)
    got = [int(g[0]) for g in q.negatives_for(positive)]
    assert got == [i for i, s in enumerate(scenes) if s != positive]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scene=st.integers(0, 2))
def test_same_scene_entries_never_contribute(seed, scene):
    rng = np.random.default_rng(seed)
    cfg = LossConfig(margin=2.5, beta=0.0)  # every admitted hinge is active
    s, v = Tensor(_unit(rng, 4)), Tensor(_unit(rng, 4))
    q_v, q_s = _filled(rng, 6, 4, 3), _filled(rng, 6, 4, 3)
    base = queue_loss(s, v, q_v, q_s, scene, cfg).data
    for q in (q_v, q_s):
        for e in q:
            if e.scene_id == scene:
                e.embedding = -e.embedding * 3.0
    assert queue_loss(s, v, q_v, q_s, scene, cfg).data == base
    ids = np.full(3, scene)
    terms = batch_queue_loss(Tensor(_unit(rng, (3, 4))), Tensor(_unit(rng, (3, 4))), q_v, q_s, ids, cfg)
    others = sum(e.scene_id != scene for q in (q_v, q_s) for e in q)
    assert terms.contributing == 3 * others


@pytest.mark.parametrize("batch", [2, 4, 8, 16])
def test_negative_pool_independent_of_batch(rng, batch):
    cfg = LossConfig()
    q_v, q_s = NegativeQueue(12), NegativeQueue(12)
    q_v.push(_unit(rng, (12, 4)), [99] * 12)
    q_s.push(_unit(rng, (12, 4)), [99] * 12)
    ids = np.arange(batch)
    terms = batch_queue_loss(Tensor(_unit(rng, (batch, 4))), Tensor(_unit(rng, (batch, 4))), q_v, q_s, ids, cfg)
    assert terms.contributing == 2 * 12 * batch  # 12 negatives per anchor per direction


def test_zero_capacity_queue_loss_is_zero(rng):
    q_v, q_s = NegativeQueue(0), NegativeQueue(0)
    q_v.push(_unit(rng, (4, 3)), [0, 1, 2, 3])
    assert len(q_v) == 0
    s, v = Tensor(_unit(rng, 3)), Tensor(_unit(rng, 3))
    assert queue_loss(s, v, q_v, q_s, 5, LossConfig()).data == 0.0
    assert batch_queue_loss(Tensor(_unit(rng, (2, 3))), Tensor(_unit(rng, (2, 3))), q_v, q_s, [0, 1], LossConfig()).loss.data == 0.0


# -- queue loss ------------------------------------------------------------------


def test_queue_loss_examples():
    s = Tensor([1.0, 0.0])
    v = Tensor([0.5, math.sqrt(0.75)])
    q_v, q_s = NegativeQueue(1), NegativeQueue(0)
    q_v.push(np.array([[0.5, -math.sqrt(0.75)]]), [7])
    out = queue_loss(s, v, q_v, q_s, 0, LossConfig(margin=0.2, beta=1.0)).data
    assert abs(out - 0.2 * math.exp(-0.2)) < 1e-12
    assert abs(out - 0.163746) < 5e-7

    v = Tensor([0.9, math.sqrt(1 - 0.81)])
    q_v = NegativeQueue(1)
    q_v.push(np.array([[0.1, math.sqrt(0.99)]]), [7])
    assert queue_loss(s, v, q_v, q_s, 0, LossConfig(margin=0.2, beta=1.0)).data == 0.0
    assert queue_loss(s, v, NegativeQueue(4), NegativeQueue(4), 0, LossConfig()).data == 0.0


def _queue_oracle(s, v, q_v, q_s, scene, margin, beta):
    """Plain-python loop over the scene-filtered negatives of both queues."""
    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))

    pos = cos(s, v)
    total = 0.0
    for anchor, q in ((s, q_v), (v, q_s)):
        for e in q:
            if e.scene_id == scene:
                continue
            l = max(margin - pos + cos(anchor, e.embedding.tolist()), 0.0)
            total += l * math.exp(-beta * l)
    return total


@pytest.mark.parametrize("seed", range(8))
def test_queue_loss_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    cfg = LossConfig(margin=0.2 + rng.random(), beta=float(rng.choice([0.0, 1.0, 5.0, 20.0])))
    s, v = _unit(rng, 5), _unit(rng, 5)
    q_v, q_s = _filled(rng, 10, 5, 3), _filled(rng, 10, 5, 3)
    got = queue_loss(Tensor(s), Tensor(v), q_v, q_s, 1, cfg).data
    want = _queue_oracle(s.tolist(), v.tolist(), q_v, q_s, 1, cfg.margin, cfg.beta)
    assert abs(got - want) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_batch_queue_loss_is_mean_of_per_pair(seed):
    rng = np.random.default_rng(seed)
    cfg = LossConfig(margin=0.6, beta=2.0)
    s, v = _unit(rng, (5, 4)), _unit(rng, (5, 4))
    ids = rng.integers(0, 3, 5)
    q_v, q_s = _filled(rng, 9, 4, 3), _filled(rng, 9, 4, 3)
    per = [queue_loss(Tensor(s[i]), Tensor(v[i]), q_v, q_s, int(ids[i]), cfg).data for i in range(5)]
    got = batch_queue_loss(Tensor(s), Tensor(v), q_v, q_s, ids, cfg).loss.data
    assert abs(got - np.mean(per)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_queue_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    cfg = LossConfig(margin=0.7, beta=3.0)
    s = Tensor(_unit(rng, 4), requires_grad=True)
    v = Tensor(_unit(rng, 4), requires_grad=True)
    q_v, q_s = _filled(rng, 6, 4, 3), _filled(rng, 6, 4, 3)
    assert check_gradients(lambda: queue_loss(s, v, q_v, q_s, 0, cfg), [s, v]) < 1e-4


def test_weight_peaks_at_inverse_beta():
    for beta in (1.0, 5.0, 20.0):
        grid = np.linspace(0.0, 5.0 / beta, 2001)
        vals = difficulty_weight(Tensor(grid), beta).data
        np.testing.assert_allclose(vals, grid * np.exp(-beta * grid), rtol=0, atol=1e-15)
        peak = difficulty_weight(Tensor(1.0 / beta), beta).data
        assert peak >= vals.max() - 1e-15
        assert peak == pytest.approx(1.0 / (beta * math.e), rel=1e-14)


# -- InfoNCE ---------------------------------------------------------------------


def _infonce_oracle(v, s, tau):
    b = len(v)
    total = 0.0
    for i in range(b):
        row = [math.exp(float(s[i] @ v[j]) / tau) for j in range(b)]
        col = [math.exp(float(s[j] @ v[i]) / tau) for j in range(b)]
        total += -0.5 * (math.log(row[i] / sum(row)) + math.log(col[i] / sum(col)))
    return total / b


@pytest.mark.parametrize("b", range(1, 9))
def test_infonce_matches_brute_force(b):
    rng = np.random.default_rng(100 + b)
    v, s = _unit(rng, (b, 6)), _unit(rng, (b, 6))
    tau = 0.05 + rng.random()
    assert abs(infonce_batch_loss(Tensor(v), Tensor(s), tau).data - _infonce_oracle(v, s, tau)) < 1e-10
    learnable = infonce_batch_loss(Tensor(v), Tensor(s), Tensor(math.log(tau))).data
    assert abs(learnable - _infonce_oracle(v, s, tau)) < 1e-10


def test_infonce_examples(rng):
    x = _unit(rng, (1, 4))
    assert infonce_batch_loss(Tensor(x), Tensor(_unit(rng, (1, 4))), 0.07).data == 0.0
    same = np.tile(_unit(rng, 4), (2, 1))
    assert infonce_batch_loss(Tensor(same), Tensor(same), 0.07).data == pytest.approx(math.log(2), abs=1e-15)


def test_infonce_probabilities_normalized(rng):
    v, s = _unit(rng, (6, 4)), _unit(rng, (6, 4))
    logits = Tensor((s @ v.T) / 0.07)
    np.testing.assert_allclose(ops.softmax(logits, axis=1).data.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(ops.softmax(logits, axis=0).data.sum(axis=0), 1.0, atol=1e-9)


def test_infonce_decreases_as_diagonal_grows(rng):
    b = 5
    v, s = _unit(rng, (b, 6)), _unit(rng, (b, 6))
    sims = s @ v.T

    def from_sims(m, tau=0.1):
        # loss written on a raw similarity matrix
        lg = m / tau
        lr = lg - np.log(np.exp(lg).sum(axis=1, keepdims=True))
        lc = lg - np.log(np.exp(lg).sum(axis=0, keepdims=True))
        return -0.5 * (np.trace(lr) + np.trace(lc)) / b

    lo, hi = sims.copy(), sims.copy()
    np.fill_diagonal(lo, 0.2)
    np.fill_diagonal(hi, 0.8)
    assert from_sims(hi) < from_sims(lo)
    assert abs(from_sims(sims) - infonce_batch_loss(Tensor(v), Tensor(s), 0.1).data) < 1e-12
    assert infonce_batch_loss(Tensor(v), Tensor(s), 0.1).data >= 0.0


@pytest.mark.parametrize("seed", range(5))
def test_infonce_gradients(seed):
    rng = np.random.default_rng(seed)
    v = Tensor(_unit(rng, (4, 5)), requires_grad=True)
    s = Tensor(_unit(rng, (4, 5)), requires_grad=True)
    log_tau = Tensor(math.log(0.3), requires_grad=True)
    assert check_gradients(lambda: infonce_batch_loss(v, s, log_tau), [v, s, log_tau]) < 1e-4


# -- total -----------------------------------------------------------------------


def test_total_with_empty_queues_is_infonce(rng):
    v, s = Tensor(_unit(rng, (4, 5))), Tensor(_unit(rng, (4, 5)))
    out = total_loss(v, s, NegativeQueue(8), NegativeQueue(8), [0, 1, 2, 3], LossConfig())
    assert out.total.data == infonce_batch_loss(v, s, 0.07).data
    assert out.queue.data == 0.0 and out.queue_terms == 0


@pytest.mark.parametrize("seed", range(5))
def test_total_loss_gradients_through_encoders(seed):
    """Finite differences on upstream weights feeding both embeddings."""
    rng = np.random.default_rng(seed)
    cfg = LossConfig(margin=0.5, beta=2.0)
    xi, xt = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    w_img = Tensor(rng.uniform(-0.5, 0.5, (6, 5)), requires_grad=True)
    w_txt = Tensor(rng.uniform(-0.5, 0.5, (6, 5)), requires_grad=True)
    log_tau = init_log_tau(LossConfig(temperature=0.2))
    q_v, q_s = _filled(rng, 8, 5, 3), _filled(rng, 8, 5, 3)
    ids = [0, 1, 2, 0]

    def loss():
        v = ops.l2_normalize(ops.matmul(Tensor(xi), w_img), axis=-1)
        s = ops.l2_normalize(ops.matmul(Tensor(xt), w_txt), axis=-1)
        return total_loss(v, s, q_v, q_s, ids, cfg, log_tau).total

    assert check_gradients(loss, [w_img, w_txt, log_tau]) < 1e-4


def test_queue_entries_receive_no_gradient(rng):
    v = Tensor(_unit(rng, (3, 4)), requires_grad=True)
    s = Tensor(_unit(rng, (3, 4)), requires_grad=True)
    q_v, q_s = _filled(rng, 6, 4, 5), _filled(rng, 6, 4, 5)
    before = [e.embedding.copy() for e in q_v]
    with Tape() as tape:
        out = total_loss(v, s, q_v, q_s, [0, 1, 2], LossConfig(margin=1.0))
    tape.backward(out.total)
    assert v.grad is not None and s.grad is not None
    for e, b in zip(q_v, before):
        assert isinstance(e.embedding, np.ndarray) and not isinstance(e.embedding, Tensor)
        np.testing.assert_array_equal(e.embedding, b)


@pytest.mark.parametrize("margin,beta", [(0.05, 0.0), (0.2, 20.0), (1.0, 100.0), (2.0, 1.0)])
def test_loss_finite_across_hyperparameters(rng, margin, beta):
    v, s = Tensor(_unit(rng, (4, 5))), Tensor(_unit(rng, (4, 5)))
    out = total_loss(v, s, _filled(rng, 8, 5, 3), _filled(rng, 8, 5, 3), [0, 1, 2, 0], LossConfig(margin=margin, beta=beta))
    assert np.isfinite(out.total.data)
