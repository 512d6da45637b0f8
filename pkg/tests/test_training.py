import math

import numpy as np
import pytest

from verbsense import corpus, models, training
from verbsense.corpus import DatasetManifest
from verbsense.features import EmbeddingTable, FeatureStore
from verbsense.models import forward, init_params, softmax, with_tensors
from verbsense.training import (
    Gradients, TrainConfig, backward, cross_entropy, sgd_step, train,
    write_history,
)

from conftest import make_samples

SMALL = dict(hidden_size=4, embed_dim=3, n_labels=5, img_dim=6)


def random_instance(kind, seed, batch=3):
    """A small random model plus a random batch for it."""
    rng = np.random.default_rng(seed)
    params = init_params(kind, SMALL["hidden_size"], SMALL["embed_dim"],
                         SMALL["n_labels"], seed=seed, img_dim=SMALL["img_dim"])
    # biases start at zero; nudge them so gradient checks see non-trivial values
    nudged = {name: rng.normal(scale=0.1, size=value.shape)
              for name, value in params.tensors().items() if name.startswith("b_")}
    params = with_tensors(params, **nudged)
    x = rng.normal(size=(batch, SMALL["img_dim"])) if kind != "textual" else None
    q = rng.normal(size=(batch, SMALL["embed_dim"])) if kind != "visual" else None
    golds = rng.integers(0, SMALL["n_labels"], size=batch)
    return params, x, q, golds


def batch_loss(params, golds, x=None, q=None):
    """Mean cross-entropy via the forward/softmax path only (no backward)."""
    logits = np.atleast_2d(forward(params, x_img=x, q=q))
    probs = softmax(logits)
    return float(np.mean([
        -math.log(probs[i, g] + 1e-12) for i, g in enumerate(np.atleast_1d(golds))
    ]))


def numeric_gradients(params, golds, x=None, q=None, eps=1e-4):
    """Central finite differences of the mean batch loss, tensor by tensor."""
    out = {}
    for name, value in params.tensors().items():
        grad = np.zeros_like(value)
        it = np.nditer(value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            bumped = value.copy()
            bumped[idx] = value[idx] + eps
            up = batch_loss(with_tensors(params, **{name: bumped}), golds, x=x, q=q)
            bumped[idx] = value[idx] - eps
            down = batch_loss(with_tensors(params, **{name: bumped}), golds, x=x, q=q)
            grad[idx] = (up - down) / (2 * eps)
        out[name] = grad
    return out


def max_relative_error(analytic, numeric):
    worst = 0.0
    for name, num in numeric.items():
        ana = analytic[name]
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst


class TestCrossEntropy:
    def test_certain_prediction(self):
        assert cross_entropy(np.array([1.0, 0.0]), 0) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_over_four(self):
        dist = np.full(4, 0.25)
        for gold in range(4):
            assert cross_entropy(dist, gold) == pytest.approx(math.log(4), abs=1e-9)

    def test_half(self):
        assert cross_entropy(np.array([0.5, 0.5]), 1) == pytest.approx(math.log(2), abs=1e-9)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(np.array([0.5, 0.5]), 2)

    def test_zero_probability_finite(self):
        assert math.isfinite(cross_entropy(np.array([1.0, 0.0]), 1))


class TestBackward:
    def test_equal_logits_error_signal(self):
        # two labels, all-zero params -> p = [0.5, 0.5]; gold=1 gives p - y = [0.5, -0.5]
        params = init_params("visual", 2, 1, 2, seed=0, img_dim=2)
        params = with_tensors(params, w_img=np.zeros((2, 2)), w_out=np.zeros((2, 2)))
        _, grads = backward(params, [1], x_img=np.ones((1, 2)))
        assert np.allclose(grads.b_out, [0.5, -0.5])

    @pytest.mark.parametrize("kind", ["visual", "textual", "multimodal"])
    def test_matches_finite_differences(self, kind):
        for seed in range(5):
            params, x, q, golds = random_instance(kind, seed=100 + seed)
            loss, grads = backward(params, golds, x_img=x, phrases=q)
            assert loss == pytest.approx(batch_loss(params, golds, x=x, q=q), rel=1e-9)
            numeric = numeric_gradients(params, golds, x=x, q=q)
            assert max_relative_error(grads.tensors(), numeric) < 1e-4

    def test_relu_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        params = init_params("multimodal", 4, 3, 5, seed=5, img_dim=6,
                             activation="relu")
        params = with_tensors(params, **{
            name: rng.normal(scale=0.2, size=v.shape)
            for name, v in params.tensors().items()
        })
        x = rng.normal(size=(3, 6))
        q = rng.normal(size=(3, 3))
        golds = rng.integers(0, 5, size=3)
        _, grads = backward(params, golds, x_img=x, phrases=q)
        numeric = numeric_gradients(params, golds, x=x, q=q)
        assert max_relative_error(grads.tensors(), numeric) < 1e-4

    def test_duplicated_sample_equals_single(self):
        params, x, q, golds = random_instance("visual", seed=42, batch=1)
        loss1, g1 = backward(params, golds, x_img=x)
        loss2, g2 = backward(params, np.repeat(golds, 2), x_img=np.repeat(x, 2, axis=0))
        assert loss2 == pytest.approx(loss1, rel=1e-12)
        for name, value in g1.tensors().items():
            assert np.allclose(value, getattr(g2, name), atol=1e-12)

    def test_mean_loss_equals_mean_of_singles(self):
        params, x, q, golds = random_instance("multimodal", seed=9, batch=4)
        loss, _ = backward(params, golds, x_img=x, phrases=q)
        singles = [
            backward(params, golds[i:i + 1], x_img=x[i:i + 1], phrases=q[i:i + 1])[0]
            for i in range(4)
        ]
        assert loss == pytest.approx(np.mean(singles), abs=1e-6)

    def test_empty_batch_rejected(self):
        params, _, _, _ = random_instance("visual", seed=1)
        with pytest.raises(ValueError):
            backward(params, [], x_img=np.zeros((0, 6)))


class TestSgdStep:
    def test_lr_zero_is_identity(self):
        params, x, q, golds = random_instance("visual", seed=2)
        _, grads = backward(params, golds, x_img=x)
        updated = sgd_step(params, grads, lr=0.0)
        for name, value in params.tensors().items():
            assert np.array_equal(value, getattr(updated, name))

    def test_hand_arithmetic(self):
        params = init_params("visual", 1, 1, 1, seed=0, img_dim=1)
        params = with_tensors(params, w_img=[[1.0]])
        grads = Gradients(w_img=np.array([[2.0]]))
        updated = sgd_step(params, grads, lr=0.5)
        assert updated.w_img[0, 0] == pytest.approx(0.0)

    def test_two_half_steps_equal_one_full_step_on_fixed_gradient(self):
        params, x, q, golds = random_instance("textual", seed=3)
        _, grads = backward(params, golds, phrases=q)
        one = sgd_step(params, grads, lr=0.2)
        two = sgd_step(sgd_step(params, grads, lr=0.1), grads, lr=0.1)
        for name, value in one.tensors().items():
            assert np.allclose(value, getattr(two, name), atol=1e-12)

    def test_descent_on_single_sample(self):
        for seed in range(20):
            kind = ["visual", "textual", "multimodal"][seed % 3]
            params, x, q, golds = random_instance(kind, seed=200 + seed, batch=1)
            loss0, grads = backward(params, golds, x_img=x, phrases=q)
            gnorm = sum(float(np.sum(g ** 2)) for g in grads.tensors().values())
            stepped = sgd_step(params, grads, lr=1e-3)
            loss1 = batch_loss(stepped, golds, x=x, q=q)
            if gnorm == 0.0:
                assert loss1 == pytest.approx(loss0)
            else:
                assert loss1 < loss0


def cluster_dataset(seed=0, n_labels=3, img_dim=8, per_split=(60, 15, 15), scale=6.0):
    """Well-separated Gaussian clusters keyed to target verbs."""
    rng = np.random.default_rng(seed)
    centers = np.zeros((n_labels, img_dim))
    for k in range(n_labels):
        centers[k, k] = scale
    rows = []
    feats = []
    counts = dict(zip(("train", "val", "test"), per_split))
    i = 0
    for split, n in counts.items():
        for j in range(n):
            label = int(rng.integers(0, n_labels))
            feats.append(centers[label] + rng.normal(size=img_dim))
            rows.append((f"{split}{j}", f"query {label}", "verb", f"verb{label}", split, i))
            i += 1
    manifest = DatasetManifest(language="de", samples=make_samples(rows))
    store = FeatureStore(data=np.array(feats, dtype=np.float32))
    return manifest, store


class TestTrain:
    def test_lr_never_applied_means_constant_val_accuracy(self):
        manifest, store = cluster_dataset(seed=1)
        cfg = TrainConfig(batch_size=16, learning_rate=1e-12, max_epochs=5,
                          patience=0, seed=0)
        _, history, _ = train(manifest, store, None, "visual", cfg, hidden_size=8)
        accs = {round(h.val_accuracy, 12) for h in history}
        assert len(accs) == 1

    def test_learns_separable_clusters(self):
        manifest, store = cluster_dataset(seed=2, scale=25.0, per_split=(240, 60, 60))
        cfg = TrainConfig(batch_size=16, learning_rate=1e-4, max_epochs=150,
                          patience=0, seed=0)
        params, history, vocab = train(manifest, store, None, "visual", cfg,
                                       hidden_size=16)
        test_samples = corpus.filter_split(manifest, "test")
        x, _, golds = training.build_inputs(test_samples, store, None, vocab, "visual")
        preds = np.argmax(forward(params, x_img=x), axis=1)
        assert np.mean(preds == golds) >= 0.95

    def test_identical_seeds_identical_runs(self, tmp_path):
        manifest, store = cluster_dataset(seed=3)
        cfg = TrainConfig(batch_size=8, learning_rate=1e-3, max_epochs=6,
                          patience=0, seed=7)
        p1, h1, _ = train(manifest, store, None, "visual", cfg, hidden_size=8)
        p2, h2, _ = train(manifest, store, None, "visual", cfg, hidden_size=8)
        assert h1 == h2
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        models.save_checkpoint(p1, a)
        models.save_checkpoint(p2, b)
        assert a.read_bytes() == b.read_bytes()

    def test_best_epoch_kept_not_last(self):
        manifest, store = cluster_dataset(seed=4, scale=10.0)
        cfg = TrainConfig(batch_size=16, learning_rate=1e-3, max_epochs=30,
                          patience=0, seed=1)
        params, history, vocab = train(manifest, store, None, "visual", cfg,
                                       hidden_size=8)
        best = max(h.val_accuracy for h in history)
        val_samples = corpus.filter_split(manifest, "val")
        x, _, golds = training.build_inputs(val_samples, store, None, vocab, "visual")
        preds = np.argmax(forward(params, x_img=x), axis=1)
        assert np.mean(preds == golds) == pytest.approx(best)

    def test_patience_stops_early(self):
        manifest, store = cluster_dataset(seed=5)
        cfg = TrainConfig(batch_size=16, learning_rate=1e-12, max_epochs=50,
                          patience=3, seed=0)
        _, history, _ = train(manifest, store, None, "visual", cfg, hidden_size=8)
        # first epoch sets the best; three flat epochs exhaust the patience
        assert len(history) == 4

    def test_empty_train_split_rejected(self):
        manifest, store = cluster_dataset(seed=6)
        only_val = DatasetManifest(
            language="de",
            samples=tuple(s for s in manifest.samples if s.split != "train"),
        )
        with pytest.raises(corpus.ManifestError, match="training split"):
            train(only_val, store, None, "visual", TrainConfig(max_epochs=1))

    def test_dangling_feature_row_names_sample(self):
        manifest, store = cluster_dataset(seed=7)
        small_store = FeatureStore(data=store.data[:3])
        with pytest.raises(corpus.ManifestError, match="feature_row"):
            train(manifest, small_store, None, "visual", TrainConfig(max_epochs=1))

    def test_history_csv(self, tmp_path):
        manifest, store = cluster_dataset(seed=8)
        cfg = TrainConfig(batch_size=16, learning_rate=1e-3, max_epochs=3,
                          patience=0, seed=0)
        _, history, _ = train(manifest, store, None, "visual", cfg, hidden_size=8)
        path = tmp_path / "history.csv"
        write_history(history, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_accuracy"
        assert len(lines) == len(history) + 1
