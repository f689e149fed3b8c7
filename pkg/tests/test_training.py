import numpy as np
import pytest

from proxl2o import learned, training
from proxl2o.problems import BatchedProblems, generate_set
from proxl2o.training import (AdamState, CheckpointError, NumericAbort,
                              TrainConfig, load_checkpoint, save_checkpoint,
                              train, unroll_gradients)


def tiny_cfg(**kw):
    base = dict(batch_size=2, unroll=8, segments=2, minibatches=2, seed=7,
                kind="lasso", m=8, n=12, sparsity=3, lam=0.1, preset="PA")
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_segments_must_divide(self):
        with pytest.raises(ValueError):
            tiny_cfg(unroll=10, segments=3)

    def test_defaults_match_protocol(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 64
        assert cfg.unroll == 100
        assert cfg.segments == 5
        assert cfg.minibatches == 500
        assert cfg.batch_size * cfg.minibatches == 32_000

    def test_batch_size_positive(self):
        with pytest.raises(ValueError):
            tiny_cfg(batch_size=0)


class TestTrainLoop:
    def test_zero_lr_leaves_params_unchanged(self):
        cfg = tiny_cfg(minibatches=1, meta_lr=0.0)
        init = learned.init_params(learned.ablation_preset("PA"), cfg.seed)
        params, _ = train(cfg)
        for key in init.weights:
            assert params.weights[key].tobytes() == init.weights[key].tobytes()

    def test_losses_finite_and_recorded(self):
        cfg = tiny_cfg(minibatches=3)
        _, report = train(cfg)
        assert len(report.losses) == 3
        assert all(np.isfinite(v) for v in report.losses)
        assert len(report.grad_norms) == 3

    def test_training_improves_heldout_loss(self):
        cfg = tiny_cfg(batch_size=8, unroll=40, segments=2, minibatches=25,
                       m=20, n=40, sparsity=8, meta_lr=3e-3)
        params, _ = train(cfg)
        baseline = learned.init_params(learned.ablation_preset("PA"), cfg.seed)
        held = generate_set("lasso", 8, 20, 40, 8, 0.1, seed=909)
        def mean_loss(p):
            out = 0.0
            for prob in held.problems:
                _, loss = learned.rollout(prob, p, 40)
                out += float(loss)
            return out / len(held.problems)
        assert mean_loss(params) < mean_loss(baseline)

    def test_determinism_bit_identical(self):
        cfg = tiny_cfg(minibatches=3)
        a, _ = train(cfg)
        b, _ = train(cfg)
        for key in a.weights:
            assert a.weights[key].tobytes() == b.weights[key].tobytes()

    def test_nan_abort_raises(self, monkeypatch):
        cfg = tiny_cfg(minibatches=1)

        def poisoned(params, bp, unroll, segments):
            return float("nan"), {k: np.zeros_like(v) for k, v in params.weights.items()}

        monkeypatch.setattr(training, "unroll_gradients", poisoned)
        with pytest.raises(NumericAbort, match="minibatch 0"):
            train(cfg)


class TestTruncation:
    def _setup(self, seed=31):
        cfg = tiny_cfg(seed=seed, batch_size=2, m=6, n=10, sparsity=3)
        params = learned.init_params(learned.ablation_preset("PA"), cfg.seed)
        bp = BatchedProblems(training.generate_training_batch(cfg, 0))
        return params, bp

    def test_single_segment_equals_full_bptt(self):
        params, bp = self._setup()
        loss_a, grads_a = unroll_gradients(params, bp, 6, 1)
        # full BPTT reference: one tape over all six steps via rollout()
        from proxl2o.tape import Tape

        tape = Tape()
        total = None
        weight_vars = {k: tape.param(params.weights[k], k) for k in params.trainable_keys()}
        out = learned.rollout_batch(bp, params, 6, eng=tape, weight_vars=weight_vars,
                                    want_loss=True)
        loss_node = tape.scale(out["loss_sum"], 1.0 / (6 * bp.count))
        grads_b = tape.backward(loss_node)
        assert loss_a == pytest.approx(float(loss_node.value), rel=1e-15)
        for key in grads_a:
            assert np.allclose(grads_a[key], grads_b[key], rtol=1e-12, atol=1e-15)

    def test_two_segments_differ_but_forward_identical(self):
        params, bp = self._setup()
        loss_1, grads_1 = unroll_gradients(params, bp, 6, 1)
        loss_2, grads_2 = unroll_gradients(params, bp, 6, 2)
        assert loss_1 == pytest.approx(loss_2, rel=1e-14)
        diffs = [float(np.max(np.abs(grads_1[k] - grads_2[k]))) for k in grads_1]
        assert max(diffs) > 1e-9  # truncation is active

    def test_meta_gradient_matches_finite_differences(self):
        params, bp = self._setup(seed=33)
        _, grads = unroll_gradients(params, bp, 4, 2)
        rng = np.random.default_rng(5)
        keys = params.trainable_keys()
        h = 1e-6
        checked = 0
        while checked < 5:
            key = keys[rng.integers(len(keys))]
            w = params.weights[key]
            idx = tuple(rng.integers(s) for s in w.shape)
            orig = w[idx]
            w[idx] = orig + h
            lp, _ = unroll_gradients(params, bp, 4, 2)
            w[idx] = orig - h
            lm, _ = unroll_gradients(params, bp, 4, 2)
            w[idx] = orig
            fd = (lp - lm) / (2 * h)
            ad = float(grads[key][idx])
            assert abs(ad - fd) <= 1e-4 * max(abs(fd), abs(ad), 1e-2)
            checked += 1


class TestAdamState:
    def test_bias_correction_first_step(self):
        w = {"w": np.array([1.0])}
        adam = AdamState(w, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        adam.step(w, {"w": np.array([100.0])}, ["w"])
        assert w["w"][0] == pytest.approx(0.9, abs=1e-8)


class TestCheckpoints:
    def test_roundtrip_bit_identical(self, tmp_path):
        params = learned.init_params(learned.ablation_preset("PBA12"), seed=17)
        save_checkpoint(params, tmp_path / "ckpt")
        back = load_checkpoint(tmp_path / "ckpt")
        assert back.param_count() == params.param_count()
        for key in params.weights:
            assert back.weights[key].tobytes() == params.weights[key].tobytes()
        assert back.ablation.name == "PBA12"

    def test_truncated_weights_error(self, tmp_path):
        params = learned.init_params(learned.ablation_preset("PA"), seed=18)
        save_checkpoint(params, tmp_path / "ckpt")
        raw = (tmp_path / "ckpt" / "weights.bin").read_bytes()
        (tmp_path / "ckpt" / "weights.bin").write_bytes(raw[:-64])
        with pytest.raises(CheckpointError, match="weights.bin"):
            load_checkpoint(tmp_path / "ckpt")

    def test_preset_mismatch_refused(self, tmp_path):
        params = learned.init_params(learned.ablation_preset("PA"), seed=19)
        save_checkpoint(params, tmp_path / "ckpt")
        with pytest.raises(CheckpointError, match="preset"):
            load_checkpoint(tmp_path / "ckpt", expect_preset="PBA12")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)

    def test_layout_mismatch_refused(self, tmp_path):
        import json

        params = learned.init_params(learned.ablation_preset("PA"), seed=20)
        save_checkpoint(params, tmp_path / "ckpt")
        manifest = json.loads((tmp_path / "ckpt" / "model.json").read_text())
        manifest["layout"][0][1] = [3, 80]
        (tmp_path / "ckpt" / "model.json").write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError, match="layout"):
            load_checkpoint(tmp_path / "ckpt")
