"""CTC loss against hand-computed values and the exhaustive path oracle."""
import numpy as np
import pytest

from strlab import ctc
from strlab import tensor as T
from strlab.errors import BlankInTarget, ShapeMismatch, TargetTooLong, TooLarge, VocabMismatch
from strlab.tensor import Tensor, reset_tape
from strlab.textcodec import Vocabulary


@pytest.fixture(autouse=True)
def _fresh_tape():
    reset_tape()
    yield
    reset_tape()


def random_posterior(rng, t_len, n, n_classes):
    """Valid per-frame log-distributions."""
    logits = rng.standard_normal((t_len, n, n_classes))
    lp = logits - np.log(np.exp(logits).sum(axis=2, keepdims=True))
    return Tensor(lp, requires_grad=True)


def test_single_frame_hand_value():
    lp = Tensor(np.log(np.full((1, 1, 2), 0.5)), requires_grad=True)
    loss = ctc.ctc_loss(lp, [[1]])
    assert abs(float(loss.data) - (-np.log(0.5))) < 1e-12


def test_empty_target_is_all_blank_path():
    rng = np.random.default_rng(0)
    lp = random_posterior(rng, 5, 1, 3)
    loss = ctc.ctc_loss(lp, [[]])
    want = -lp.data[:, 0, ctc.BLANK].sum()
    assert abs(float(loss.data) - want) < 1e-12


def test_two_frame_hand_enumeration():
    # paths collapsing to "a" in 2 frames over {blank, a}: aa, a-, -a
    lp = Tensor(np.log(np.full((2, 1, 2), 0.5)), requires_grad=True)
    loss = ctc.ctc_loss(lp, [[1]])
    assert abs(float(loss.data) - (-np.log(3.0 / 4.0))) < 1e-12


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(100):
        t_len = int(rng.integers(1, 7))
        n_classes = int(rng.integers(2, 5))
        target = list(rng.integers(1, n_classes, size=rng.integers(0, 4)))
        while ctc.min_frames(target) > t_len:
            target.pop()
        lp = random_posterior(rng, t_len, 1, n_classes)
        got = float(ctc.ctc_loss(lp, [target]).data)
        want = ctc.brute_force_likelihood(lp, target)
        assert abs(got - want) < 1e-9
        reset_tape()


def test_batch_mean_reduction():
    rng = np.random.default_rng(1)
    lp = random_posterior(rng, 4, 2, 3)
    a = float(ctc.ctc_loss(Tensor(lp.data[:, :1, :], requires_grad=True), [[1]]).data)
    b = float(ctc.ctc_loss(Tensor(lp.data[:, 1:, :], requires_grad=True), [[2, 1]]).data)
    both = float(ctc.ctc_loss(lp, [[1], [2, 1]]).data)
    assert abs(both - (a + b) / 2.0) < 1e-12


def test_loss_nonnegative_and_zero_at_certainty():
    rng = np.random.default_rng(2)
    lp = random_posterior(rng, 5, 1, 3)
    assert float(ctc.ctc_loss(lp, [[1, 2]]).data) >= 0.0
    reset_tape()
    # put all mass on one collapsing path: a blank blank blank blank
    probs = np.full((5, 1, 3), 1e-300)
    probs[0, 0, 1] = 1.0
    probs[1:, 0, ctc.BLANK] = 1.0
    loss = ctc.ctc_loss(Tensor(np.log(probs), requires_grad=True), [[1]])
    assert float(loss.data) < 1e-9


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    lp0 = random_posterior(rng, 4, 2, 3).data

    def loss_of(arr):
        reset_tape()
        t = Tensor(arr, requires_grad=True)
        return t, ctc.ctc_loss(t, [[1, 2], [2]])

    t, loss = loss_of(lp0)
    T.backward(loss)
    grad = t.grad.copy()
    h = 1e-6
    flat_idx = [(0, 0, 1), (2, 1, 0), (3, 0, 2), (1, 1, 1)]
    for idx in flat_idx:
        up = lp0.copy()
        up[idx] += h
        down = lp0.copy()
        down[idx] -= h
        fd = (float(loss_of(up)[1].data) - float(loss_of(down)[1].data)) / (2 * h)
        assert abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-6) < 1e-4


def test_target_too_long():
    rng = np.random.default_rng(4)
    with pytest.raises(TargetTooLong):
        ctc.ctc_loss(random_posterior(rng, 3, 1, 3), [[1, 2, 1, 2]])  # 4 labels, 3 frames
    with pytest.raises(TargetTooLong):
        ctc.ctc_loss(random_posterior(rng, 2, 1, 3), [[1, 1]])  # repeat forces a blank


def test_blank_in_target():
    lp = random_posterior(np.random.default_rng(5), 4, 1, 3)
    with pytest.raises(BlankInTarget):
        ctc.ctc_loss(lp, [[1, 0]])


def test_batch_count_mismatch():
    lp = random_posterior(np.random.default_rng(6), 4, 2, 3)
    with pytest.raises(ShapeMismatch):
        ctc.ctc_loss(lp, [[1]])


# -- greedy decoding ----------------------------------------------------------


def vocab_ab():
    return Vocabulary(["a", "b"])


def posterior_from_argmax(ids, n_classes):
    """One-hot-ish posterior whose frame argmaxes are the given ids."""
    t_len = len(ids)
    probs = np.full((t_len, 1, n_classes), 0.05)
    for t, i in enumerate(ids):
        probs[t, 0, i] = 0.9
    return np.log(probs / probs.sum(axis=2, keepdims=True))


def test_greedy_collapse_rule():
    lp = posterior_from_argmax([1, 1, 0, 1], 3)
    assert ctc.greedy_decode(lp, vocab_ab()) == ["aa"]


def test_greedy_all_blank():
    lp = posterior_from_argmax([0, 0, 0], 3)
    assert ctc.greedy_decode(lp, vocab_ab()) == [""]


def test_greedy_matches_definitional_oracle():
    rng = np.random.default_rng(7)
    vocab = vocab_ab()
    lp = random_posterior(rng, 6, 3, 3).data
    got = ctc.greedy_decode(lp, vocab)
    for k in range(3):
        path = lp[:, k, :].argmax(axis=1)
        want = vocab.decode(ctc.collapse(list(path)))
        assert got[k] == want
        assert len(got[k]) <= lp.shape[0]


def test_greedy_vocab_mismatch():
    lp = posterior_from_argmax([0, 1], 4)
    with pytest.raises(VocabMismatch):
        ctc.greedy_decode(lp, vocab_ab())


# -- brute-force oracle -------------------------------------------------------


def test_oracle_infeasible_target_infinite():
    # adjacent repeat forces a separating blank: "aa" needs 3 frames
    lp = np.log(np.full((2, 1, 3), 1.0 / 3.0))
    assert ctc.brute_force_likelihood(lp, [1, 1]) == np.inf
    lp4 = np.log(np.full((4, 1, 2), 0.5))
    assert ctc.brute_force_likelihood(lp4, [1, 1, 1]) == np.inf


def test_oracle_guard():
    lp = np.log(np.full((9, 1, 3), 1.0 / 3.0))
    with pytest.raises(TooLarge):
        ctc.brute_force_likelihood(lp, [1])


def test_oracle_rejects_blank_target():
    lp = np.log(np.full((3, 1, 3), 1.0 / 3.0))
    with pytest.raises(BlankInTarget):
        ctc.brute_force_likelihood(lp, [0])


def test_collapse():
    assert ctc.collapse([1, 1, 0, 1, 2, 2, 0, 0, 2]) == [1, 1, 2, 2]
    assert ctc.collapse([]) == []
