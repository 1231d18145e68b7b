import math

import numpy as np
import pytest

from conftest import _sig, elbo_gradient_errors, plain_lstm, random_model, small_config
from sparselstm.compression import load_checkpoint
from sparselstm.data import synthetic_task
from sparselstm.numerics import NumericError
from sparselstm.sparse_lstm import SparseLSTMModel
from sparselstm.training import (
    AdamState,
    Batch,
    ConfigError,
    DivergenceError,
    TaskData,
    TrainConfig,
    adam_step,
    clip_gradients,
    elbo_minibatch,
    evaluate,
    evaluate_values,
    global_norm,
    init_model,
    kl_total,
    param_arrays,
    task_metric,
    train,
)
from sparselstm.variational import INIT_LOG_SIGMA, VariationalParam


@pytest.mark.parametrize("task", ["classification", "char_lm"])
@pytest.mark.parametrize("variant", ["baseline", "W", "WN", "WGN"])
def test_elbo_gradients(task, variant):
    errors = elbo_gradient_errors(task, variant)
    bad = {k: e for k, e in errors.items() if e >= 1e-3}
    assert not bad


class TestELBO:
    def _batch(self, rng):
        return Batch(rng.integers(0, 11, size=(4, 6)), rng.integers(0, 2, size=4), np.array([6, 2, 5, 3]))

    def test_kl_off_deterministic_is_scaled_nll(self, rng):
        m = random_model(small_config(), rng)
        b = self._batch(rng)
        res = elbo_minibatch(m, b, 40, None, kl_scale=0.0, with_grad=False)
        assert res.loss == pytest.approx(10.0 * res.nll)

    def test_vanishing_noise_matches_deterministic(self, rng):
        m = random_model(small_config(), rng)
        for p in m.variational_params().values():
            p.log_sigma[...] = -30.0
        b = self._batch(rng)
        det = elbo_minibatch(m, b, 40, None, with_grad=False).loss
        noisy = elbo_minibatch(m, b, 40, np.random.default_rng(3), with_grad=False).loss
        assert noisy == pytest.approx(det, abs=1e-4)

    def test_full_batch_loss_term_by_term(self, rng):
        """Independent recomputation: embedding, plain LSTM, head, NLL and the KL fit."""
        cfg = small_config(variant="WGN")
        m = random_model(cfg, rng)
        ids = rng.integers(0, 11, size=(3, 5))
        labels = np.array([0, 1, 1])
        v = {n: (p.mean if isinstance(p, VariationalParam) else p) for n, p in m.params.items()}
        nll = 0.0
        for r in range(3):
            xs = np.array([v["embedding"][t] * v["z_vocab"][t] * v["z_x"] for t in ids[r]])
            wx = v["lstm.wx"] * v["z_gates"][:, None]
            wh = v["lstm.wh"] * v["z_gates"][:, None] * v["z_h"][None, :]
            hs, _ = plain_lstm(xs, wx, wh, v["lstm.b"])
            logits = v["out.w"] @ (hs[-1] * v["z_h"]) + v["out.b"]
            nll -= logits[labels[r]] - math.log(sum(math.exp(z) for z in logits))
        kl = 0.0
        for p in m.variational_params().values():
            for mu, ls in zip(p.mean.ravel(), p.log_sigma.ravel()):
                la = min(max(2 * ls - math.log(mu * mu), -20.0), 20.0) if mu != 0 else 20.0
                kl += 0.63576 - 0.63576 * _sig(1.87320 + 1.48695 * la) + 0.5 * math.log1p(math.exp(-la))
        n_data = 30
        res = elbo_minibatch(m, Batch(ids, labels), n_data, None, with_grad=False)
        assert res.loss == pytest.approx(n_data / 3 * nll + kl, rel=1e-9)

    def test_kl_independent_of_forward(self, rng):
        m = random_model(small_config(), rng)
        before = kl_total(m)
        elbo_minibatch(m, self._batch(rng), 40, np.random.default_rng(0))
        assert kl_total(m) == before

    def test_kl_off_no_noise_equals_maximum_likelihood(self, rng):
        cfg = small_config(variant="W")
        m = random_model(cfg, rng)
        base_cfg = small_config(variant="baseline")
        base = SparseLSTMModel(base_cfg, {n: np.array(p.mean if isinstance(p, VariationalParam) else p) for n, p in m.params.items()})
        b = self._batch(rng)
        r1 = elbo_minibatch(m, b, 40, None, kl_scale=0.0)
        r2 = elbo_minibatch(base, b, 40, None, kl_scale=0.0)
        assert r1.loss == r2.loss
        for name in base.params:
            key = name + ".mean" if name + ".mean" in r1.grads else name
            np.testing.assert_array_equal(r1.grads[key], r2.grads[name])

    def test_per_sequence_noise(self, rng):
        m = random_model(small_config(), rng)
        b = self._batch(rng)
        a = elbo_minibatch(m, b, 40, np.random.default_rng(1), noise="sequence")
        c = elbo_minibatch(m, b, 40, np.random.default_rng(1), noise="minibatch")
        assert a.loss != c.loss
        assert set(a.grads) == set(c.grads)

    def test_non_finite_names_parameters(self, rng):
        m = random_model(small_config(variant="baseline"), rng)
        m.params["out.b"][0] = np.nan
        with pytest.raises(NumericError, match="out.b"):
            elbo_minibatch(m, self._batch(rng), 40, None, with_grad=False)


class TestAdam:
    def test_zero_grad_first_step(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_hand_value(self):
        p = {"w": np.array([1.0])}
        adam_step(p, {"w": np.array([1.0])}, AdamState(), 0.1)
        # m_hat = 1, v_hat = 1: step = 0.1 / (1 + 1e-8)
        assert p["w"][0] == pytest.approx(0.9, abs=1e-8)

    def test_constant_gradient_limit(self):
        p = {"w": np.zeros(3)}
        g = {"w": np.array([0.3, -5.0, 1e-3])}
        st = AdamState()
        for _ in range(200):
            before = p["w"].copy()
            adam_step(p, g, st, 0.01)
        np.testing.assert_allclose(p["w"] - before, -0.01 * np.sign(g["w"]), rtol=1e-4)

    def test_in_place_float32(self):
        w = np.ones(2, dtype=np.float32)
        p = {"w": w}
        adam_step(p, {"w": np.ones(2)}, AdamState(), 0.5)
        assert p["w"] is w and w.dtype == np.float32 and w[0] == pytest.approx(0.5)


class TestClip:
    def test_below_threshold_unchanged(self):
        g = {"a": np.array([0.3, 0.4])}
        assert clip_gradients(g, 1.0)["a"] is g["a"]

    def test_rescaled_norm(self):
        g = {"a": np.array([6.0, 0.0]), "b": np.array([[8.0]])}
        out = clip_gradients(g, 1.0)
        assert global_norm(out) == pytest.approx(1.0, abs=1e-6)
        flat_in = np.concatenate([g["a"], g["b"].ravel()])
        flat_out = np.concatenate([out["a"], out["b"].ravel()])
        cos = flat_in @ flat_out / (np.linalg.norm(flat_in) * np.linalg.norm(flat_out))
        assert cos == pytest.approx(1.0)

    def test_none_disables(self):
        g = {"a": np.array([100.0])}
        assert clip_gradients(g, None) is g


class TestInit:
    def test_orthogonal_recurrent_blocks(self):
        m = init_model(small_config(hidden=6), np.random.default_rng(0), dtype=np.float64)
        wh = m.params["lstm.wh"].mean
        for k in range(4):
            block = wh[k * 6 : (k + 1) * 6]
            np.testing.assert_allclose(block @ block.T, np.eye(6), atol=1e-4)

    def test_log_sigma_and_groups(self):
        m = init_model(small_config(), np.random.default_rng(0))
        for name, p in m.variational_params().items():
            assert np.all(p.log_sigma == INIT_LOG_SIGMA)
            if name.startswith("z_"):
                assert np.all(p.mean == 1.0)
        assert np.all(m.params["lstm.b"] == 0)

    def test_same_seed_bit_identical(self):
        a = init_model(small_config(), np.random.default_rng(9))
        b = init_model(small_config(), np.random.default_rng(9))
        for k, arr in param_arrays(a).items():
            assert arr.tobytes() == param_arrays(b)[k].tobytes()

    def test_lm_input_matrix_orthogonal(self):
        m = init_model(small_config(task="char_lm", hidden=3, vocab=7), np.random.default_rng(0), dtype=np.float64)
        wx = m.params["lstm.wx"].mean[:3]
        np.testing.assert_allclose(wx @ wx.T, np.eye(3), atol=1e-10)


class TestConfig:
    def test_task_defaults(self):
        c = TrainConfig(task="char_lm")
        assert (c.lr, c.batch_size, c.clip, c.seq_len) == (0.002, 64, 1.0, 100)
        w = TrainConfig(task="word_lm")
        assert (w.lr, w.batch_size, w.clip, w.seq_len) == (0.002, 32, 10.0, 35)
        k = TrainConfig(task="classification")
        assert (k.lr, k.batch_size, k.clip) == (0.0005, 128, None)

    def test_warmup(self):
        c = TrainConfig(task="char_lm", kl_warmup_epochs=4)
        assert [c.kl_scale(e) for e in range(5)] == [0.25, 0.5, 0.75, 1.0, 1.0]
        assert TrainConfig(task="char_lm").kl_scale(0) == 1.0

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(task="char_lm", noise="always")
        with pytest.raises(ConfigError):
            TrainConfig(task="ocr")


class TestMetrics:
    def test_definitions(self):
        assert task_metric("char_lm", math.log(2.0)) == pytest.approx(1.0)
        assert task_metric("word_lm", math.log(50.0)) == pytest.approx(50.0)
        assert task_metric("classification", 0.3, 0.75) == 0.75

    def test_lm_eval_chunking_equals_unbroken_forward(self, rng):
        cfg = small_config(task="char_lm", variant="WN")
        m = random_model(cfg, rng)
        ids = rng.integers(0, 11, size=57)
        a = evaluate(m, ids, seq_len=4)
        b = evaluate(m, ids, seq_len=1000)
        assert a.n_items == 56
        assert a.mean_nll == pytest.approx(b.mean_nll, rel=1e-12)


def tiny_data(seed=0, n_train=64):
    d = synthetic_task("sparse_signal", np.random.default_rng(seed), n_train=n_train, n_valid=32, n_test=32)
    return TaskData(d["train"], d["valid"], d["test"], d["vocab_size"], d["n_classes"])


def tiny_config(**kw):
    base = dict(task="classification", variant="WGN", hidden=4, emb_dim=4, epochs=2, batch_size=16, lr=0.01, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_smoke_two_epochs(self, tmp_path):
        res = train(tiny_config(), tiny_data(), tmp_path)
        lines = (tmp_path / "metrics.tsv").read_text().splitlines()
        assert lines[0] == "epoch\tsplit\tnll\tkl\tmetric\tcompression"
        assert [ln.split("\t")[:2] for ln in lines[1:]] == [["0", "train"], ["0", "valid"], ["1", "train"], ["1", "valid"]]
        for name in ("best.ckpt", "final.ckpt"):
            assert (tmp_path / name).is_file()
        assert len(res.history) == 4

    def test_deterministic_logs(self, tmp_path):
        train(tiny_config(), tiny_data(), tmp_path / "a")
        train(tiny_config(), tiny_data(), tmp_path / "b")
        for name in ("metrics.tsv", "best.ckpt", "final.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_empty_dataset(self):
        d = tiny_data()
        empty = TaskData(d.train.subset(np.array([], dtype=int)), d.valid, None, 32, 2)
        with pytest.raises(ConfigError):
            train(tiny_config(), empty)

    def test_divergence_keeps_last_good(self, tmp_path):
        cfg = tiny_config()
        d = tiny_data()
        model = init_model(TrainConfig(**{**cfg.to_dict(), "vocab_size": 32, "n_classes": 2}), np.random.default_rng(0))
        model.params["lstm.b"][0] = np.inf
        with pytest.raises(DivergenceError):
            train(cfg, d, tmp_path, model=model)
        ck = load_checkpoint(tmp_path / "final.ckpt")
        assert np.isinf(ck.obj.params["lstm.b"][0])  # the untouched starting point

    def test_best_checkpoint_reproduces_logged_metric(self, tmp_path):
        train(tiny_config(epochs=3), tiny_data(), tmp_path)
        rows = [ln.split("\t") for ln in (tmp_path / "metrics.tsv").read_text().splitlines()[1:]]
        best = max(float(r[4]) for r in rows if r[1] == "valid")
        ck = load_checkpoint(tmp_path / "best.ckpt")
        d = tiny_data()
        assert f"{evaluate(ck.obj, d.valid).metric:.6g}" == f"{best:.6g}"

    def test_sparse_signal_learnable_with_w(self):
        d = synthetic_task("sparse_signal", np.random.default_rng(0))
        data = TaskData(d["train"], d["valid"], d["test"], d["vocab_size"], d["n_classes"])
        cfg = TrainConfig(task="classification", variant="W", hidden=16, emb_dim=16, lr=0.01, batch_size=32, epochs=200, seed=0, kl_warmup_epochs=10)
        res = train(cfg, data)
        valid = [r for r in res.history if r[1] == "valid"]
        assert max(r[4] for r in valid) > 0.95

    def test_lm_training_runs(self, tmp_path):
        ids = np.tile(np.arange(7), 60)
        data = TaskData(ids[:350], ids[350:], None, 7)
        res = train(TrainConfig(task="char_lm", variant="WGN", hidden=4, epochs=2, batch_size=4, seq_len=10), data, tmp_path)
        assert len(res.history) == 4
        assert evaluate_values(res.model.config, res.model.draw(None).values, data.valid).n_items == 69
