"""Tests for loss, Adam, the training loop, metrics, and grad checking."""

import numpy as np
import pytest

import oracles
from gatedfusion import data as D
from gatedfusion import model as M
from gatedfusion import tensor as T
from gatedfusion import training as TR
from gatedfusion.errors import ConfigError, ContractError, TrainingError
from gatedfusion.tensor import Tensor

CFG = M.ModelConfig(text_dim=8, audio_dim=8, video_dim=8, hidden=2)
B6 = M.AblationConfig.from_preset("B6")


def small_model(seed=0, config=CFG, ablation=B6):
    return M.ModelParams.init(config, ablation, np.random.default_rng(seed))


def small_data(n=4, seed=0, mode="redundant", **kw):
    return D.synth_generate(
        D.SyntheticSpec(n_videos=n, seed=seed, interaction_mode=mode, **kw)
    )


class TestCrossEntropyLoss:
    def test_perfect_predictions(self):
        probs = Tensor([[1.0, 0.0], [0.0, 1.0]])
        loss = TR.cross_entropy_loss(probs, np.array([0, 1]), np.ones(2, bool))
        assert abs(loss.data[0]) <= 1e-11

    def test_uniform_predictions(self):
        probs = Tensor(np.full((3, 2), 0.5))
        loss = TR.cross_entropy_loss(probs, np.array([0, 1, 0]), np.ones(3, bool))
        np.testing.assert_allclose(loss.data[0], np.log(2.0), rtol=0, atol=1e-12)

    def test_probability_floor_keeps_loss_finite(self):
        probs = Tensor([[1.0, 0.0]])
        loss = TR.cross_entropy_loss(probs, np.array([1]), np.ones(1, bool))
        np.testing.assert_allclose(loss.data[0], -np.log(1e-12), rtol=1e-12)

    def test_padded_rows_excluded(self):
        probs = Tensor([[0.25, 0.75], [0.9, 0.1]])
        mask = np.array([True, False])
        loss = TR.cross_entropy_loss(probs, np.array([1, 0]), mask)
        np.testing.assert_allclose(loss.data[0], -np.log(0.75), rtol=0, atol=1e-12)

    def test_no_real_utterances_rejected(self):
        with pytest.raises(ContractError):
            TR.cross_entropy_loss(
                Tensor(np.full((2, 2), 0.5)), np.array([0, 1]), np.zeros(2, bool)
            )

    def test_gradient_through_model_and_loss(self):
        params = small_model(seed=1)
        videos = small_data(n=2, seed=2, max_utterances=3)

        def run():
            terms = []
            count = 0
            for v in videos:
                feats = {m: Tensor(v.feature_matrix(m)) for m in M.MODALITIES}
                probs, _ = M.forward_video(params, CFG, B6, feats, np.ones(len(v), bool))
                s, n = TR._nll_sum(probs, v.labels(), np.ones(len(v), bool))
                terms.append(s)
                count += n
            total = terms[0]
            for t in terms[1:]:
                total = T.add(total, t)
            return T.affine(total, 1.0 / count)

        for _, t in params.named():
            t.zero_grad()
        with T.Tape():
            T.backward(run())

        leaves = dict(params.named())
        for name in ("fusion.TA.W_G", "self_attn.T", "head_hidden.b"):
            leaf = leaves[name]

            def f(arrs, leaf=leaf):
                keep = leaf.data
                leaf.data = arrs[0]
                try:
                    return float(run().data[0])
                finally:
                    leaf.data = keep

            fd = oracles.fd_gradient(f, [leaf.data], 0)
            assert oracles.rel_err(leaf.grad, fd) < 1e-4, name


class TestAdam:
    def test_zero_gradient_is_identity(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        opt = TR.Adam([("p", p)], lr=0.1)
        before = p.data.copy()
        p.grad  # allocate zeros
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_is_signed_learning_rate(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = TR.Adam([("p", p)], lr=0.01)
        g = p.grad
        g += np.array([1.0, -2.0, 0.5])
        opt.step()
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-6)

    def test_quadratic_convergence(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        opt = TR.Adam([("x", x)], lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            with T.Tape():
                T.backward(T.hadamard(x, x))
            opt.step()
        assert abs(x.data[0]) < 1e-3

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = TR.Adam([("p", p)], lr=0.1)
        p._grad = np.zeros(4)
        with pytest.raises(ContractError):
            opt.step()

    def test_gradient_clipping_scales_global_norm(self):
        a = Tensor(np.zeros(3), requires_grad=True)
        b = Tensor(np.zeros((2, 2)), requires_grad=True)
        opt = TR.Adam([("a", a), ("b", b)], lr=0.1)
        ga = a.grad
        ga += 3.0
        gb = b.grad
        gb += 4.0
        norm = opt.clip_gradients(1.0)
        expected = np.sqrt(9.0 * 3 + 16.0 * 4)
        np.testing.assert_allclose(norm, expected, rtol=1e-12)
        total = (a.grad ** 2).sum() + (b.grad ** 2).sum()
        np.testing.assert_allclose(np.sqrt(total), 1.0, rtol=1e-12)


class TestMetrics:
    def test_all_correct(self):
        m = TR.binary_metrics(np.array([1, 0, 1]), np.array([1, 0, 1]))
        assert m.accuracy == 1.0 and m.f1 == 1.0

    def test_no_positives_convention(self):
        m = TR.binary_metrics(np.zeros(4, int), np.zeros(4, int))
        assert m.accuracy == 1.0
        assert m.f1 == 0.0

    def test_hand_counted_confusion_matrix(self):
        labels = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 1])
        preds = np.array([1, 1, 0, 0, 0, 0, 1, 0, 0, 1])
        # tp=3 fp=1 fn=2 tn=4: acc 7/10, precision 3/4, recall 3/5, f1 2/3
        m = TR.binary_metrics(preds, labels)
        np.testing.assert_allclose(m.accuracy, 0.7, rtol=0, atol=1e-15)
        np.testing.assert_allclose(m.f1, 2.0 / 3.0, rtol=0, atol=1e-15)

    def test_evaluate_side_effect_free(self):
        params = small_model(seed=3)
        videos = small_data(n=3, seed=4)
        a = TR.evaluate(params, CFG, B6, videos)
        b = TR.evaluate(params, CFG, B6, videos)
        assert (a.accuracy, a.f1, a.loss) == (b.accuracy, b.f1, b.loss)

    def test_evaluate_agrees_with_predictions(self):
        params = small_model(seed=5)
        videos = small_data(n=3, seed=6)
        preds = TR.predict_videos(params, CFG, B6, videos)
        metrics = TR.evaluate(params, CFG, B6, videos)
        manual = TR.binary_metrics(
            np.array([p.pred for p in preds]), np.array([p.label for p in preds])
        )
        assert metrics.accuracy == manual.accuracy and metrics.f1 == manual.f1
        for p in preds:
            assert (p.pred == 1) == (p.p_pos >= 0.5)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TR.TrainConfig()
        assert cfg.lr == 0.0005
        assert cfg.batch_size == 16
        assert cfg.epochs == 75
        assert cfg.dropout == 0.4
        assert cfg.hidden == 100
        assert cfg.max_grad_norm is None
        assert cfg.ablation.preset_name == "B6"

    def test_validation(self):
        with pytest.raises(ConfigError):
            TR.TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TR.TrainConfig(dropout=1.0)
        with pytest.raises(ConfigError):
            TR.TrainConfig(epochs=-1)
        with pytest.raises(ConfigError):
            TR.TrainConfig(max_grad_norm=0.0)


class TestTrain:
    def test_zero_epochs_returns_initial_params(self):
        params = small_model(seed=7)
        before = {name: t.data.copy() for name, t in params.named()}
        result = TR.train(
            params, CFG, small_data(n=2, seed=8), None, TR.TrainConfig(epochs=0, hidden=2)
        )
        assert result.history == []
        for name, t in result.params.named():
            np.testing.assert_array_equal(t.data, before[name])

    def test_empty_train_split_rejected(self):
        with pytest.raises(ContractError):
            TR.train(small_model(), CFG, [], None, TR.TrainConfig(epochs=1, hidden=2))

    def test_fixed_seed_identical_trajectory(self):
        videos = small_data(n=4, seed=9)
        cfg = TR.TrainConfig(epochs=3, batch_size=2, lr=0.01, dropout=0.4, hidden=2, seed=5)

        def run():
            params = small_model(seed=10)
            return TR.train(params, CFG, videos, videos, cfg)

        r1, r2 = run(), run()
        assert r1.history == r2.history
        for (_, a), (_, b) in zip(r1.params.named(), r2.params.named()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_loss_descends_on_full_batches(self):
        videos = small_data(n=6, seed=11)
        params = small_model(seed=12)
        cfg = TR.TrainConfig(
            epochs=5, batch_size=8, lr=1e-3, dropout=0.0, hidden=2, seed=0
        )
        result = TR.train(params, CFG, videos, None, cfg)
        losses = [rec.train_loss for rec in result.history]
        assert all(b <= a for a, b in zip(losses, losses[1:])), losses

    def test_best_validation_weights_restored(self):
        videos = small_data(n=6, seed=13)
        params = small_model(seed=14)
        cfg = TR.TrainConfig(epochs=6, batch_size=3, lr=0.02, dropout=0.3, hidden=2, seed=1)
        result = TR.train(params, CFG, videos, videos, cfg)
        accs = [rec.val_acc for rec in result.history]
        assert result.best_val_acc == max(accs)
        assert result.best_epoch == accs.index(max(accs)) + 1
        # returned weights reproduce the recorded best score
        again = TR.evaluate(result.params, CFG, B6, videos)
        assert again.accuracy == result.best_val_acc

    def test_small_redundant_set_overfits(self):
        videos = small_data(n=8, seed=15, max_utterances=4)
        config = M.ModelConfig(text_dim=8, audio_dim=8, video_dim=8, hidden=4)
        params = M.ModelParams.init(config, B6, np.random.default_rng(16))
        cfg = TR.TrainConfig(epochs=40, batch_size=8, lr=0.01, dropout=0.0, hidden=4, seed=2)
        TR.train(params, config, videos, None, cfg)
        metrics = TR.evaluate(params, config, B6, videos)
        assert metrics.accuracy >= 0.99

    def test_divergence_raises_training_error(self):
        videos = small_data(n=2, seed=17)
        params = small_model(seed=18)
        cfg = TR.TrainConfig(epochs=3, batch_size=2, lr=1e300, dropout=0.0, hidden=2)
        with pytest.raises(TrainingError) as err, np.errstate(all="ignore"):
            TR.train(params, CFG, videos, None, cfg)
        assert err.value.epoch >= 1
        assert err.value.batch >= 0


class TestCsvWriters:
    def test_metrics_csv(self, tmp_path):
        history = [
            TR.EpochRecord(epoch=1, train_loss=0.5, val_acc=0.75, val_f1=0.7),
            TR.EpochRecord(epoch=2, train_loss=0.25, val_acc=0.875, val_f1=0.8),
        ]
        path = tmp_path / "metrics.csv"
        TR.write_metrics_csv(history, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_acc,val_f1"
        assert lines[1] == "1,0.5,0.75,0.7"
        assert len(lines) == 3

    def test_predictions_csv(self, tmp_path):
        preds = [TR.Prediction(video_id="v0", utt_idx=0, label=1, pred=0, p_pos=0.25)]
        path = tmp_path / "preds.csv"
        TR.write_predictions_csv(preds, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "video_id,utt_idx,label,pred,p_pos"
        assert lines[1] == "v0,0,1,0,0.25"


class TestGradCheck:
    def test_quadratic_sanity_exact(self):
        theta = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        w = Tensor(np.array([0.5, 1.5, 2.0]))

        def build_loss():
            return T.sum_all(T.hadamard(w, T.hadamard(theta, theta)))

        report = TR.grad_check([("theta", theta)], build_loss, sample_size=10, seed=0)
        assert report.n_coords == 3
        assert report.max_rel_err < 1e-9

    def test_small_full_model(self):
        params = small_model(seed=19)
        videos = small_data(n=2, seed=20, max_utterances=3)
        report = TR.model_grad_check(params, CFG, B6, videos, sample_size=120, seed=3)
        assert report.n_coords == 120
        assert report.max_rel_err < 1e-4
        assert report.passed

    def test_deterministic_given_seed(self):
        params = small_model(seed=21)
        videos = small_data(n=1, seed=22, max_utterances=2)
        a = TR.model_grad_check(params, CFG, B6, videos, sample_size=40, seed=4)
        b = TR.model_grad_check(params, CFG, B6, videos, sample_size=40, seed=4)
        assert (a.max_rel_err, a.mean_rel_err, a.worst) == (
            b.max_rel_err,
            b.mean_rel_err,
            b.worst,
        )

    def test_detects_a_corrupted_backward_rule(self, monkeypatch):
        from gatedfusion import tensor as tensor_mod

        true_d_tanh = tensor_mod._d_tanh
        monkeypatch.setattr(
            tensor_mod, "_d_tanh", lambda y: true_d_tanh(y) * 1.02
        )
        params = small_model(seed=23)
        videos = small_data(n=1, seed=24, max_utterances=2)
        report = TR.model_grad_check(params, CFG, B6, videos, sample_size=150, seed=5)
        assert report.max_rel_err > 1e-4
        assert not report.passed
