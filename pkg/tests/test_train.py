import numpy as np
import pytest

from gloria import synthdata
from gloria.matcore import InputError, make_rng
from gloria.train import (
    AdamState,
    TrainConfig,
    adam_step,
    evaluate,
    load_config,
    make_model_for_world,
    save_config,
    train,
    warmup_lr,
)


class TestWarmupLr:
    def test_peak_at_warmup(self):
        assert warmup_lr(1500, 0.001, 1500) == pytest.approx(0.001, rel=1e-12)

    def test_first_step(self):
        assert warmup_lr(1, 0.001, 1500) == pytest.approx(0.001 / 1500, rel=1e-12)

    def test_inverse_sqrt_decay(self):
        assert warmup_lr(6000, 0.001, 1500) == pytest.approx(0.0005, rel=1e-12)

    def test_step_zero_rejected(self):
        with pytest.raises(InputError):
            warmup_lr(0, 0.001, 1500)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        state = AdamState(p)
        adam_step(state, p, {"w": np.zeros(3)}, 0.01)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])

    def test_first_step_is_signed_lr(self):
        p = {"w": np.zeros(4)}
        g = np.array([3.0, -0.5, 1e-3, -7.0])
        state = AdamState(p)
        adam_step(state, p, {"w": g.copy()}, 0.01)
        np.testing.assert_allclose(p["w"], -0.01 * np.sign(g), rtol=1e-4)

    def test_matches_reference_trace(self):
        # independently coded Adam, followed for 100 random steps
        rng = make_rng(33)
        p = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(5)}
        ref = {k: v.copy() for k, v in p.items()}
        m = {k: np.zeros_like(v) for k, v in p.items()}
        v = {k: np.zeros_like(x) for k, x in p.items()}
        state = AdamState(p)
        b1, b2, eps = 0.9, 0.999, 1e-8
        for t in range(1, 101):
            grads = {k: rng.standard_normal(x.shape) for k, x in p.items()}
            lr = 0.01 / np.sqrt(t)
            adam_step(state, p, grads, lr)
            for k in ref:
                m[k] = b1 * m[k] + (1 - b1) * grads[k]
                v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
                mh = m[k] / (1 - b1**t)
                vh = v[k] / (1 - b2**t)
                ref[k] = ref[k] - lr * mh / (np.sqrt(vh) + eps)
        for k in ref:
            np.testing.assert_allclose(p[k], ref[k], atol=1e-10)


@pytest.fixture(scope="module")
def tiny_world():
    spec = synthdata.WorldSpec(d=8, n_sites=2, regions=4, k_true=2)
    world = synthdata.make_world(spec, 11)
    data = synthdata.sample_dataset(world, 200, make_rng(12))
    return world, data


class TestTrainLoop:
    def test_zero_epochs_identity(self, tiny_world):
        world, data = tiny_world
        cfg = TrainConfig(mode="gloria", epochs=0, rank=2, hidden=4)
        m = make_model_for_world(world, cfg, data.bounds)
        before = {k: v.copy() for k, v in m.trainable_params().items()}
        _, log = train(cfg, m, data)
        assert log.records == []
        for k, v in m.trainable_params().items():
            assert v.tobytes() == before[k].tobytes()

    def test_deterministic_per_seed(self, tiny_world):
        world, data = tiny_world
        cfg = TrainConfig(mode="gloria", epochs=2, rank=2, hidden=4, seed=5,
                          warmup_steps=10)
        runs = []
        for _ in range(2):
            m = make_model_for_world(world, cfg, data.bounds)
            m, log = train(cfg, m, data)
            runs.append((
                {k: v.tobytes() for k, v in m.trainable_params().items()},
                [(r.train_loss, r.val_loss, r.lr) for r in log.records],
            ))
        assert runs[0] == runs[1]

    def test_grad_accumulation_equivalence(self, tiny_world):
        world, data = tiny_world
        finals = []
        for batch, accum in ((4, 3), (12, 1)):
            cfg = TrainConfig(mode="gloria", epochs=2, rank=2, hidden=4, seed=7,
                              batch_size=batch, grad_accum=accum, warmup_steps=10)
            m = make_model_for_world(world, cfg, data.bounds)
            m, _ = train(cfg, m, data)
            finals.append(m.trainable_params())
        for k in finals[0]:
            np.testing.assert_allclose(finals[0][k], finals[1][k], atol=1e-9)

    def test_empty_data_rejected(self, tiny_world):
        world, data = tiny_world
        cfg = TrainConfig(mode="gloria", rank=2, hidden=4)
        m = make_model_for_world(world, cfg, data.bounds)
        with pytest.raises(InputError):
            train(cfg, m, data.subset(np.array([], dtype=int)))

    def test_no_nan_in_trajectory(self, tiny_world):
        world, data = tiny_world
        cfg = TrainConfig(mode="gloria", epochs=3, rank=2, hidden=4, seed=9,
                          warmup_steps=10)
        m = make_model_for_world(world, cfg, data.bounds)
        _, log = train(cfg, m, data)
        for r in log.records:
            assert np.isfinite([r.train_loss, r.val_loss, r.orth_loss,
                                r.mean_entropy]).all()


class TestRegularizerEfficacy:
    def test_sparsity_lambda_lowers_entropy(self, tiny_world):
        world, data = tiny_world
        ent = {}
        for lam in (5.0, 0.0):
            cfg = TrainConfig(mode="gloria", epochs=4, rank=4, hidden=4, seed=3,
                              lam_sp=lam, warmup_steps=10, base_lr=0.003)
            m = make_model_for_world(world, cfg, data.bounds)
            _, log = train(cfg, m, data)
            ent[lam] = log.records[-1].mean_entropy
        assert ent[5.0] < ent[0.0]

    def test_orth_lambda_lowers_orth_loss(self, tiny_world):
        world, data = tiny_world
        orth = {}
        for lam in (0.8, 0.0):
            cfg = TrainConfig(mode="gloria", epochs=4, rank=4, hidden=4, seed=3,
                              lam_orth=lam, warmup_steps=10, base_lr=0.003)
            m = make_model_for_world(world, cfg, data.bounds)
            _, log = train(cfg, m, data)
            orth[lam] = log.records[-1].orth_loss
        assert orth[0.8] < orth[0.0]


class TestEvaluate:
    def test_perfect_model_on_noiseless_data(self):
        spec = synthdata.WorldSpec(d=6, n_sites=2, regions=2, k_true=1,
                                   strength=0.0, sigma_y=0.0)
        world = synthdata.make_world(spec, 21)
        data = synthdata.sample_dataset(world, 40, make_rng(22))
        cfg = TrainConfig(mode="frozen", rank=2, hidden=4)
        m = make_model_for_world(world, cfg, data.bounds)
        metrics = evaluate(m, data)
        assert metrics.mean_loss == pytest.approx(0.0, abs=1e-20)
        for v in metrics.per_region.values():
            assert v == pytest.approx(0.0, abs=1e-20)

    def test_frozen_loss_matches_direct_computation(self, tiny_world):
        world, data = tiny_world
        cfg = TrainConfig(mode="frozen", rank=2, hidden=4)
        m = make_model_for_world(world, cfg, data.bounds)
        from gloria.model import backbone_forward, task_loss
        direct = np.mean([
            task_loss(backbone_forward(m, data.x[i], data.coord(i))[0], data.y[i])
            for i in range(data.n)])
        assert evaluate(m, data).mean_loss == pytest.approx(direct, rel=1e-12)

    def test_region_losses_recombine(self, tiny_world):
        world, data = tiny_world
        cfg = TrainConfig(mode="frozen", rank=2, hidden=4)
        m = make_model_for_world(world, cfg, data.bounds)
        metrics = evaluate(m, data)
        weighted = sum(metrics.per_region[r] * metrics.counts[r]
                       for r in metrics.per_region) / data.n
        assert weighted == pytest.approx(metrics.mean_loss, rel=1e-12)

    def test_missing_region_reported(self, tiny_world):
        world, data = tiny_world
        cfg = TrainConfig(mode="frozen", rank=2, hidden=4)
        m = make_model_for_world(world, cfg, data.bounds)
        sub = data.subset(np.flatnonzero(data.region != 2))
        metrics = evaluate(m, sub, region_count=4)
        assert metrics.missing_regions == [2]
        assert 2 not in metrics.per_region


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = TrainConfig(mode="lora", epochs=7, seed=42, lam_sp=1.25)
        save_config(cfg, tmp_path / "c.txt")
        loaded = load_config(tmp_path / "c.txt")
        assert loaded == cfg

    def test_unknown_key_rejected(self, tmp_path):
        (tmp_path / "c.txt").write_text("bogus=1\n")
        with pytest.raises(InputError):
            load_config(tmp_path / "c.txt")

    def test_runlog_csv(self, tiny_world, tmp_path):
        world, data = tiny_world
        cfg = TrainConfig(mode="gloria", epochs=2, rank=2, hidden=4,
                          warmup_steps=10)
        m = make_model_for_world(world, cfg, data.bounds)
        _, log = train(cfg, m, data)
        log.to_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,lr,train_loss,val_loss,orth_loss,mean_entropy"
        assert len(lines) == 3
