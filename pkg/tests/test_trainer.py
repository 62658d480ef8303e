import dataclasses

import numpy as np
import pytest

from instalign import trainer
from instalign.config import RunConfig
from instalign.losses import LossValue, grad_check
from instalign.model import PARAM_ORDER, flatten, unflatten
from instalign.synthworld import Caption, featurize_counter, gen_corpus, gen_scene

CFG = RunConfig()


def small_config(**train):
    cfg = RunConfig()
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train))


@pytest.fixture(scope="module")
def prepared():
    return trainer.prepare_corpus(gen_corpus(3, CFG.world, 64), CFG)


@pytest.fixture(scope="module")
def early_losses(default_config, train_corpus):
    """Per-step loss over the first 100 steps on the default corpus."""
    losses = []
    trainer.train(trainer.TrainState.initial(default_config), trainer.prepare_corpus(train_corpus, default_config),
                  default_config, n_steps=100, on_step=lambda step, v: losses.append(v))
    return np.asarray(losses)


def states_equal(a, b):
    groups = ("params", "ema", "momentum")
    return (a.step, a.seed) == (b.step, b.seed) and all(
        np.array_equal(getattr(a, g)[k], getattr(b, g)[k]) for g in groups for k in PARAM_ORDER
    )


class TestStep:
    def test_zero_lr_keeps_params(self, prepared):
        s0 = trainer.TrainState.initial(CFG)
        s1, _ = trainer.train_step(s0.copy(), prepared[:8], CFG, lr=0.0)
        for k in PARAM_ORDER:
            np.testing.assert_array_equal(s1.params[k], s0.params[k])

    def test_quadratic_surrogate(self):
        rng = np.random.default_rng(0)
        s = trainer.TrainState.initial(CFG)
        target = {k: rng.normal(size=v.shape) for k, v in s.params.items()}

        def quad(params, batch):
            diff = {k: params[k] - target[k] for k in params}
            return LossValue(0.5 * sum(float((d * d).sum()) for d in diff.values()), diff)

        for _ in range(1000):
            s, _ = trainer.train_step(s, [], CFG, loss_fn=quad, lr=0.05)
        assert max(np.abs(s.params[k] - target[k]).max() for k in PARAM_ORDER) < 1e-6

    def test_non_finite_loss(self):
        s = trainer.TrainState.initial(CFG)
        with pytest.raises(FloatingPointError):
            trainer.train_step(s, [], CFG, loss_fn=lambda p, b: LossValue(float("nan"), {}))
        bad = {"f_bias": np.full_like(s.params["f_bias"], np.inf)}
        with pytest.raises(FloatingPointError):
            trainer.train_step(s, [], CFG, loss_fn=lambda p, b: LossValue(1.0, bad))

    def test_loss_decreases_early(self, early_losses):
        assert early_losses[-10:].mean() < 0.5 * early_losses[:10].mean()

    def test_moving_average_monotone(self, early_losses):
        smooth = np.convolve(early_losses, np.ones(10) / 10, mode="valid")
        rises = np.flatnonzero(np.diff(smooth) >= 0)
        assert len(rises) == 0, f"10-step moving average rises at steps {rises + 10}"

    def test_lr_drop(self):
        cfg = small_config(lr=0.5, lr_drop=0.7, lr_drop_factor=0.1)
        assert trainer.lr_at(69, 100, cfg) == 0.5
        assert trainer.lr_at(70, 100, cfg) == pytest.approx(0.05)

    def test_batch_indices_cover_epoch(self):
        idx = np.concatenate([trainer.batch_indices(s, 21, 4, 0) for s in range(6)])
        assert sorted(idx) == list(range(21))


class TestEma:
    def test_default_decay(self):
        assert CFG.train.ema_decay == 0.9998

    def test_decay_one_freezes(self):
        s = trainer.TrainState.initial(CFG)
        s.params = {k: v + 1 for k, v in s.params.items()}
        out = trainer.ema_update(s, 1.0)
        for k in PARAM_ORDER:
            np.testing.assert_array_equal(out.ema[k], s.ema[k])

    def test_fixed_point(self):
        s = trainer.TrainState.initial(CFG)
        out = trainer.ema_update(s, 0.9998)
        for k in PARAM_ORDER:
            np.testing.assert_allclose(out.ema[k], s.params[k], rtol=0, atol=1e-15)

    def test_geometric_contraction(self):
        s = trainer.TrainState.initial(CFG)
        rng = np.random.default_rng(1)
        s.ema = {k: v + rng.normal(size=v.shape) for k, v in s.params.items()}
        d0 = np.linalg.norm(flatten(s.ema) - flatten(s.params))
        for _ in range(1000):
            s = trainer.ema_update(s, 0.9998)
        dk = np.linalg.norm(flatten(s.ema) - flatten(s.params))
        assert abs(dk - 0.9998**1000 * d0) <= 1e-9 * max(1.0, d0)

    def test_bad_decay(self):
        with pytest.raises(ValueError):
            trainer.ema_update(trainer.TrainState.initial(CFG), 1.5)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, prepared):
        s = trainer.train(trainer.TrainState.initial(CFG), prepared, CFG, n_steps=3)
        trainer.save_checkpoint(s, tmp_path / "a.ckpt")
        assert states_equal(trainer.load_checkpoint(tmp_path / "a.ckpt"), s)

    def test_truncated(self, tmp_path):
        trainer.save_checkpoint(trainer.TrainState.initial(CFG), tmp_path / "a.ckpt")
        data = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "b.ckpt").write_bytes(data[: len(data) // 2])
        with pytest.raises(trainer.CheckpointError):
            trainer.load_checkpoint(tmp_path / "b.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello world, not a checkpoint")
        with pytest.raises(trainer.CheckpointError):
            trainer.load_checkpoint(tmp_path / "x")

    def test_version_mismatch(self, tmp_path, monkeypatch):
        monkeypatch.setattr(trainer, "CKPT_VERSION", 2)
        trainer.save_checkpoint(trainer.TrainState.initial(CFG), tmp_path / "a.ckpt")
        monkeypatch.setattr(trainer, "CKPT_VERSION", 1)
        with pytest.raises(trainer.CheckpointError, match="version"):
            trainer.load_checkpoint(tmp_path / "a.ckpt")

    def test_resume_matches_uninterrupted(self, tmp_path, prepared):
        straight = trainer.train(trainer.TrainState.initial(CFG), prepared, CFG, n_steps=12)
        half = trainer.train(trainer.TrainState.initial(CFG), prepared, CFG, n_steps=5)
        trainer.save_checkpoint(half, tmp_path / "h.ckpt")
        resumed = trainer.train(trainer.load_checkpoint(tmp_path / "h.ckpt"), prepared, CFG, n_steps=12)
        assert states_equal(resumed, straight)

    def test_deterministic(self, prepared):
        a = trainer.train(trainer.TrainState.initial(CFG), prepared, CFG, n_steps=6)
        b = trainer.train(trainer.TrainState.initial(CFG), prepared, CFG, n_steps=6)
        assert states_equal(a, b)


class TestMultiQuery:
    def test_batched_equals_sequential(self):
        world = dataclasses.replace(CFG.world, queries_per_scene=16)
        cfg = dataclasses.replace(CFG, world=world)
        scene = gen_scene(cfg.seed, world, 42)
        assert len(scene.queries) == 16
        state = trainer.TrainState.initial(cfg)

        featurize_counter.reset()
        batched = trainer.forward_scene(state, scene, cfg)
        once = featurize_counter.calls

        featurize_counter.reset()
        seq = []
        for q in scene.queries:
            r = trainer.forward_scene(state, dataclasses.replace(scene, queries=[q]), cfg)
            seq.append(r.query_losses[0])
            for k, v in r.detection_losses.items():
                assert v == pytest.approx(batched.detection_losses[k], abs=1e-12)
        np.testing.assert_allclose(batched.query_losses, seq, rtol=0, atol=1e-10)
        assert featurize_counter.calls == 16 * once

    def test_zero_query_scene(self):
        scene = gen_scene(0, CFG.world, 3)
        empty = dataclasses.replace(scene, queries=[], caption=Caption(scene.caption.words, []))
        r = trainer.forward_scene(trainer.TrainState.initial(CFG), empty, CFG)
        assert r.query_losses.shape == (0,)
        assert np.isfinite(r.result.loss.value)


class TestConvergence:
    def test_training_lifts_grounding(self, trained, model, default_config, eval_corpus):
        from instalign.evalsuite import grounding_protocol

        before = grounding_protocol(trainer.inference_model(trained[0], default_config), eval_corpus, (1,))
        after = grounding_protocol(model, eval_corpus, (1,))
        assert before["all/R@1"] < 0.3 and after["all/R@1"] >= 0.9


class TestFullGradient:
    def test_model_grad_check(self, prepared):
        s = trainer.TrainState.initial(CFG)
        rng = np.random.default_rng(5)
        base = {k: v + 0.01 * rng.normal(size=v.shape) for k, v in s.params.items()}
        batch = prepared[:3]

        def fn(theta):
            p = unflatten(theta, base)
            loss = trainer.batch_loss(p, batch, CFG).loss
            return loss.value, np.concatenate(
                [np.ravel(loss.grads.get(k, np.zeros_like(p[k]))) for k in PARAM_ORDER]
            )

        assert grad_check(fn, flatten(base), n_coords=60, seed=2) < 1e-4
