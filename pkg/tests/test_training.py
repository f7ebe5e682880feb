"""Losses, hand-rolled Adam, data mixing, and the training loop."""

import math
import random

import pytest
import torch

from eudparse.errors import NonFiniteGradientError, VocabularyError
from eudparse.model import (
    ModelDims,
    build_vocab,
    compute_potentials,
    init_params,
)
from eudparse.inference import mfvi_matrix
from eudparse.training import (
    AdamState,
    TrainConfig,
    TrainingExample,
    adam_step,
    arc_loss,
    combined_loss,
    dev_lf1,
    example_loss,
    init_adam,
    label_loss,
    pack_batches,
    train,
    upsample_mix,
)

from conftest import central_difference_grads, relative_error


def constant_probs(n, value):
    q = torch.full((n + 1, n + 1), value, dtype=torch.float64)
    q[:, 0] = 0.0
    q.fill_diagonal_(0.0)
    return q


class TestArcLoss:
    @pytest.mark.parametrize("n", [1, 2, 4, 7])
    def test_uniform_half_gives_cells_times_ln2(self, n):
        loss = arc_loss(constant_probs(n, 0.5), [])
        assert abs(loss.item() - n * n * math.log(2.0)) <= 1e-9

    def test_uniform_half_independent_of_gold(self):
        gold = [(0, 1), (1, 2)]
        a = arc_loss(constant_probs(2, 0.5), gold).item()
        b = arc_loss(constant_probs(2, 0.5), []).item()
        assert a == pytest.approx(b, abs=1e-12)
        assert a == pytest.approx(4 * math.log(2.0), abs=1e-9)

    def test_single_cell_hand_value(self):
        q = constant_probs(1, 0.8)
        assert arc_loss(q, [(0, 1)]).item() == pytest.approx(-math.log(0.8), abs=1e-12)
        assert arc_loss(q, []).item() == pytest.approx(-math.log(0.2), abs=1e-12)

    def test_accepts_labeled_gold_tuples(self):
        q = constant_probs(1, 0.8)
        labeled = arc_loss(q, [(0, 1, "root")]).item()
        assert labeled == pytest.approx(-math.log(0.8), abs=1e-12)


class TestLabelLoss:
    def test_uniform_scores_give_arcs_times_lnL(self):
        for n_labels in (2, 3, 7):
            labels = tuple(f"l{i}" for i in range(n_labels))
            scores = torch.zeros((3, 3, n_labels), dtype=torch.float64)
            gold = [(0, 1, "l0"), (1, 2, "l1")]
            loss = label_loss(scores, gold, labels)
            assert abs(loss.item() - 2 * math.log(n_labels)) <= 1e-9

    def test_empty_gold_is_zero(self):
        scores = torch.zeros((2, 2, 3), dtype=torch.float64)
        assert label_loss(scores, [], ("a", "b", "c")).item() == 0.0

    def test_unknown_label_raises(self):
        scores = torch.zeros((2, 2, 2), dtype=torch.float64)
        with pytest.raises(VocabularyError):
            label_loss(scores, [(0, 1, "mystery")], ("a", "b"))

    def test_peaked_scores_hand_value(self):
        scores = torch.zeros((2, 2, 2), dtype=torch.float64)
        scores[0, 1, 1] = 3.0
        want = math.log(1.0 + math.exp(-3.0))
        assert label_loss(scores, [(0, 1, "b")], ("a", "b")).item() == pytest.approx(
            want, abs=1e-12
        )


class TestCombinedLoss:
    def test_lambda_arithmetic(self):
        arc = torch.tensor(2.0, dtype=torch.float64)
        label = torch.tensor(5.0, dtype=torch.float64)
        assert combined_loss(arc, label, 0.1).item() == pytest.approx(2.3, abs=1e-12)
        assert combined_loss(arc, label, 0.0).item() == pytest.approx(2.0)
        assert combined_loss(arc, label, 1.0).item() == pytest.approx(5.0)


class TestExampleLoss:
    def small(self, **kwargs):
        vocab = build_vocab([["a", "b", "c"]])
        params = init_params(vocab, ("x", "y"), ModelDims(3, 3, 2), seed=0)
        config = TrainConfig(**kwargs)
        return params, config

    def test_masked_example_drops_label_term(self):
        params, config = self.small(loss_lambda=0.5)
        ex = TrainingExample(("a", "b"), ((0, 1, "x"), (1, 2, "y")))
        masked = TrainingExample(ex.words, ex.gold_arcs, labels_masked=True)
        full = example_loss(params, ex, config)
        part = example_loss(params, masked, config)
        assert part.item() < full.item()
        # masked loss equals the pure arc term under the same lambda weight
        pots = compute_potentials(params, list(ex.words))
        q = mfvi_matrix(pots.unary, pots.binary, config.mfvi_iterations)
        arc = arc_loss(q, [(0, 1), (1, 2)])
        assert part.item() == pytest.approx((0.5 * arc).item(), abs=1e-12)

    def test_masked_example_gives_no_label_gradients(self):
        params, config = self.small(loss_lambda=0.5)
        for t in params.tensors.values():
            t.requires_grad_(True)
        masked = TrainingExample(("a", "b"), ((0, 1, "x"),), labels_masked=True)
        example_loss(params, masked, config).backward()
        label_grad = params.tensors["biaffine_label"].grad
        assert label_grad is None or label_grad.abs().sum().item() == 0.0
        assert params.tensors["biaffine_arc"].grad is not None

    def test_lambda_zero_gives_no_label_gradients(self):
        params, config = self.small(loss_lambda=0.0)
        for t in params.tensors.values():
            t.requires_grad_(True)
        ex = TrainingExample(("a", "b"), ((0, 1, "x"),))
        example_loss(params, ex, config).backward()
        label_grad = params.tensors["label_head_w"].grad
        assert label_grad is None or label_grad.abs().sum().item() == 0.0

    def test_dropout_only_with_generator(self):
        params, config = self.small(dropout_rate=0.9)
        ex = TrainingExample(("a", "b"), ((0, 1, "x"),))
        a = example_loss(params, ex, config).item()
        b = example_loss(params, ex, config).item()
        assert a == b  # no generator: deterministic, dropout off


class TestAdam:
    def test_hand_computed_two_steps(self):
        theta = torch.tensor([1.0], dtype=torch.float64)
        tensors = {"t": theta}
        state = init_adam(tensors)
        lr, b1, b2, eps = 0.1, 0.9, 0.9, 1e-8
        g = torch.tensor([0.5], dtype=torch.float64)

        adam_step(tensors, {"t": g}, state, lr, beta1=b1, beta2=b2)
        m1 = 0.1 * 0.5
        v1 = 0.1 * 0.25
        m_hat = m1 / (1 - 0.9)
        v_hat = v1 / (1 - 0.9)
        want1 = 1.0 - lr * m_hat / (math.sqrt(v_hat) + eps)
        assert theta.item() == pytest.approx(want1, abs=1e-15)

        adam_step(tensors, {"t": g}, state, lr, beta1=b1, beta2=b2)
        m2 = 0.9 * m1 + 0.1 * 0.5
        v2 = 0.9 * v1 + 0.1 * 0.25
        m_hat = m2 / (1 - 0.81)
        v_hat = v2 / (1 - 0.81)
        want2 = want1 - lr * m_hat / (math.sqrt(v_hat) + eps)
        assert theta.item() == pytest.approx(want2, abs=1e-15)
        assert state.step_count == 2

    def test_missing_grad_is_noop_from_fresh_state(self):
        theta = torch.tensor([2.0, 3.0], dtype=torch.float64)
        tensors = {"t": theta}
        state = init_adam(tensors)
        adam_step(tensors, {}, state, 0.5)
        assert torch.equal(theta, torch.tensor([2.0, 3.0], dtype=torch.float64))

    def test_nonfinite_gradient_aborts(self):
        tensors = {"t": torch.zeros(2, dtype=torch.float64)}
        state = init_adam(tensors)
        for bad in (float("inf"), float("nan")):
            grads = {"t": torch.tensor([0.0, bad], dtype=torch.float64)}
            with pytest.raises(NonFiniteGradientError):
                adam_step(tensors, grads, state, 0.1)

    def test_update_order_is_name_sorted(self):
        # both tensors get the same treatment regardless of dict insertion order
        a = {"z": torch.ones(1, dtype=torch.float64), "a": torch.ones(1, dtype=torch.float64)}
        b = {"a": torch.ones(1, dtype=torch.float64), "z": torch.ones(1, dtype=torch.float64)}
        g = {"a": torch.tensor([0.3], dtype=torch.float64), "z": torch.tensor([0.7], dtype=torch.float64)}
        sa, sb = init_adam(a), init_adam(b)
        adam_step(a, g, sa, 0.2)
        adam_step(b, g, sb, 0.2)
        assert torch.equal(a["a"], b["a"]) and torch.equal(a["z"], b["z"])


class TestUpsampleMix:
    def ex(self, i, masked=False):
        return TrainingExample((f"w{i}",), ((0, 1, "x"),), labels_masked=masked)

    def test_table_counts(self):
        low = [self.ex(i) for i in range(400)]
        high = [self.ex(10_000 + i) for i in range(12543)]
        mixed = upsample_mix(low, high)
        low_copies = [ex for ex in mixed if not ex.labels_masked]
        assert len(low_copies) == 12400
        assert len(mixed) == 12543 + 12400

    def test_table_counts_large(self):
        low = [self.ex(i) for i in range(400)]
        high = [self.ex(10_000_0 + i) for i in range(102131)]
        mixed = upsample_mix(low, high)
        assert sum(1 for ex in mixed if not ex.labels_masked) == 102000
        assert len(mixed) == 102131 + 102000

    def test_ratio_one_keeps_single_copy(self):
        low = [self.ex(i) for i in range(5)]
        high = [self.ex(100 + i) for i in range(5)]
        mixed = upsample_mix(low, high)
        assert len(mixed) == 10
        assert sum(1 for ex in mixed if not ex.labels_masked) == 5

    def test_high_marked_masked_low_unmasked(self):
        low = [self.ex(0)]
        high = [self.ex(1), self.ex(2)]
        mixed = upsample_mix(low, high)
        masked_words = {ex.words for ex in mixed if ex.labels_masked}
        assert masked_words == {("w1",), ("w2",)}

    def test_empty_low_rejected(self):
        with pytest.raises(ValueError):
            upsample_mix([], [self.ex(1)])

    def test_shuffle_is_seeded(self):
        low = [self.ex(i) for i in range(3)]
        high = [self.ex(10 + i) for i in range(9)]
        a = upsample_mix(low, high, seed=4)
        b = upsample_mix(low, high, seed=4)
        c = upsample_mix(low, high, seed=5)
        assert a == b
        assert a != c


class TestPackBatches:
    def ex(self, n):
        return TrainingExample(tuple(f"w{i}" for i in range(n)), ())

    def test_greedy_flush(self):
        sizes = [3, 3, 3, 5, 2]
        batches = pack_batches([self.ex(n) for n in sizes], batch_tokens=6)
        got = [[len(e.words) for e in b] for b in batches]
        assert got == [[3, 3], [3], [5], [2]]

    def test_oversized_example_gets_own_batch(self):
        batches = pack_batches([self.ex(10), self.ex(1)], batch_tokens=4)
        assert [[len(e.words) for e in b] for b in batches] == [[10], [1]]

    def test_empty_input(self):
        assert pack_batches([], 8) == []


def tiny_setup(n_words=3, loss_lambda=0.3, iterations=2, structure_types=("sibling", "grandparent")):
    words = tuple(f"w{i}" for i in range(n_words))
    vocab = build_vocab([list(words)])
    params = init_params(
        vocab, ("x", "y"), ModelDims(2, 3, 2), seed=2, structure_types=structure_types
    )
    gold = ((0, 1, "x"),) + tuple((1, d, "y") for d in range(2, n_words + 1))
    example = TrainingExample(words, gold)
    config = TrainConfig(loss_lambda=loss_lambda, mfvi_iterations=iterations)
    return params, example, config


class TestEndToEndGradients:
    def test_autograd_matches_central_differences(self):
        params, example, config = tiny_setup()
        for t in params.tensors.values():
            t.requires_grad_(True)
        loss = example_loss(params, example, config)
        loss.backward()
        grads = {n: t.grad.clone() for n, t in params.tensors.items() if t.grad is not None}
        for t in params.tensors.values():
            t.requires_grad_(False)
            t.grad = None

        def loss_fn():
            return example_loss(params, example, config).item()

        fd = central_difference_grads(loss_fn, params.tensors, step=1e-5)
        for name, grad in grads.items():
            err = relative_error(grad, fd[name])
            assert err < 1e-4, f"{name}: rel err {err}"


class TestTrainLoop:
    def corpus(self):
        return [
            TrainingExample(("a", "b", "c"), ((0, 1, "x"), (1, 2, "y"), (1, 3, "y"))),
            TrainingExample(("b", "c", "a"), ((0, 2, "x"), (2, 1, "y"), (2, 3, "y"))),
        ]

    def make_params(self, seed=0):
        vocab = build_vocab([ex.words for ex in self.corpus()])
        return init_params(vocab, ("x", "y"), ModelDims(3, 3, 2), seed=seed)

    def test_zero_learning_rate_is_identity(self):
        params = self.make_params()
        config = TrainConfig(epochs=2, learning_rate=0.0, batch_tokens=8)
        out, history = train(self.corpus(), [], config, params)
        assert len(history) == 2
        for name, tensor in params.tensors.items():
            assert torch.equal(out.tensors[name], tensor)

    def test_training_reduces_loss(self):
        params = self.make_params()
        config = TrainConfig(epochs=12, batch_tokens=8, mfvi_iterations=1)
        _, history = train(self.corpus(), [], config, params)
        assert history[-1]["train_loss"] < history[0]["train_loss"]

    def test_seeded_determinism(self):
        params = self.make_params()
        config = TrainConfig(epochs=3, batch_tokens=8, dropout_rate=0.33, seed=9)
        out1, hist1 = train(self.corpus(), self.corpus(), config, params)
        out2, hist2 = train(self.corpus(), self.corpus(), config, params)
        assert hist1 == hist2
        for name in out1.tensors:
            assert torch.equal(out1.tensors[name], out2.tensors[name])

    def test_input_params_never_mutated(self):
        params = self.make_params()
        snapshot = {n: t.clone() for n, t in params.tensors.items()}
        config = TrainConfig(epochs=2, batch_tokens=8)
        train(self.corpus(), [], config, params)
        for name, tensor in params.tensors.items():
            assert torch.equal(tensor, snapshot[name])

    def test_best_checkpoint_matches_best_dev_score(self):
        params = self.make_params()
        config = TrainConfig(epochs=8, batch_tokens=8, mfvi_iterations=1)
        dev = self.corpus()
        out, history = train(self.corpus(), dev, config, params)
        best_seen = max(h["dev_lf1"] for h in history)
        assert dev_lf1(out, dev, config) == pytest.approx(best_seen, abs=1e-12)

    def test_history_fields_and_empty_dev(self):
        params = self.make_params()
        config = TrainConfig(epochs=2, batch_tokens=8)
        _, history = train(self.corpus(), [], config, params)
        assert [h["epoch"] for h in history] == [1, 2]
        for h in history:
            assert set(h) == {"epoch", "train_loss", "dev_lf1", "lr"}
            assert h["dev_lf1"] is None
            assert h["lr"] == config.learning_rate

    def test_plateau_halves_learning_rate(self):
        params = self.make_params()
        # learning rate too small to change dev LF1: epoch 1 improves over
        # the initial sentinel, later epochs tie, so decay fires every
        # `patience` epochs afterwards
        config = TrainConfig(
            epochs=5, batch_tokens=8, learning_rate=1e-12, patience=2, mfvi_iterations=0
        )
        _, history = train(self.corpus(), self.corpus(), config, params)
        lrs = [h["lr"] for h in history]
        lr0 = config.learning_rate
        assert lrs == [lr0, lr0, lr0 * 0.5, lr0 * 0.5, lr0 * 0.25]

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            train([], [], TrainConfig(), self.make_params())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(loss_lambda=1.5)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_tokens=0)
        with pytest.raises(ValueError):
            TrainConfig(dropout_rate=1.0)
        with pytest.raises(ValueError):
            TrainConfig(threshold=0.0)
