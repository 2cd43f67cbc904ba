import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from patchforge.dataio import load_dataset, load_manifest
from patchforge.train import (
    PAPER_PRETRAIN_SCHEDULE,
    Checkpoint,
    CheckpointError,
    OptimizerConfig,
    TrainConfig,
    TrainingError,
    build_jigsaw_model,
    checkpoint_name,
    jigsaw_loss,
    load_checkpoint,
    load_jigsaw_model,
    lr_at,
    parse_schedule,
    save_checkpoint,
    sgd_step,
    train_jigsaw,
)

SMALL = TrainConfig(batch_size=2, steps=6, base_lr=0.01, hidden=32, checkpoint_steps=(3,))


@pytest.fixture
def small_set(tiny_corpus):
    _, paths = tiny_corpus
    return load_dataset(load_manifest(paths["train"]))


class TestLoss:
    def test_uniform_g3(self):
        assert jigsaw_loss(torch.zeros(9, 9), torch.arange(9)).item() == pytest.approx(math.log(9), abs=1e-6)

    def test_uniform_g5(self):
        labels = torch.randperm(25)
        assert jigsaw_loss(torch.zeros(25, 25), labels).item() == pytest.approx(math.log(25), abs=1e-6)

    def test_two_cells_by_hand(self):
        logits = torch.tensor([[2.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        want = 0.5 * (-math.log(math.e**2 / (math.e**2 + 1)) - math.log(math.e / (1 + math.e)))
        assert jigsaw_loss(logits, torch.tensor([0, 1])).item() == pytest.approx(want, abs=1e-12)
        assert want == pytest.approx(0.2201, abs=1e-4)

    def test_batch_mean(self):
        a = torch.randn(9, 9)
        b = torch.randn(9, 9)
        la, lb = torch.randperm(9), torch.randperm(9)
        both = jigsaw_loss(torch.stack([a, b]), torch.stack([la, lb]))
        assert both.item() == pytest.approx(0.5 * (jigsaw_loss(a, la) + jigsaw_loss(b, lb)).item(), rel=1e-6)

    def test_non_negative(self):
        for seed in range(20):
            g = torch.Generator().manual_seed(seed)
            logits = torch.randn(9, 9, generator=g) * 10
            assert jigsaw_loss(logits, torch.randperm(9, generator=g)).item() >= 0

    @pytest.mark.parametrize("bad", [-1, 9])
    def test_label_range(self, bad):
        labels = torch.arange(9)
        labels[2] = bad
        with pytest.raises(ValueError):
            jigsaw_loss(torch.zeros(9, 9), labels)


class TestSGD:
    def test_plain(self):
        p, v = torch.tensor([1.0]), torch.zeros(1)
        sgd_step([p], [torch.tensor([2.0])], [v], lr=0.1, momentum=0.0)
        assert p.item() == pytest.approx(0.8)

    def test_two_momentum_steps(self):
        p, v = torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64)
        for _ in range(2):
            sgd_step([p], [torch.ones(1, dtype=torch.float64)], [v], lr=1.0, momentum=0.9)
        assert p.item() == pytest.approx(-2.9, abs=1e-12)

    def test_zero_grad(self):
        p = torch.randn(3, 3)
        before = p.clone()
        sgd_step([p], [torch.zeros(3, 3)], [torch.zeros(3, 3)], lr=0.5, momentum=0.9)
        assert torch.equal(p, before)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step([torch.zeros(2)], [torch.zeros(3)], [torch.zeros(2)], 0.1, 0.9)


class TestSchedule:
    def test_paper_schedule(self):
        cfg = OptimizerConfig(0.1, 0.9, PAPER_PRETRAIN_SCHEDULE)
        assert lr_at(cfg, 0) == 0.1
        assert lr_at(cfg, 9_999) == 0.1
        assert lr_at(cfg, 10_000) == pytest.approx(0.02)
        assert lr_at(cfg, 20_000) == pytest.approx(0.002)

    def test_empty(self):
        cfg = OptimizerConfig(0.3)
        assert {lr_at(cfg, s) for s in (0, 1, 10**6)} == {0.3}

    def test_invalid(self):
        with pytest.raises(ValueError):
            OptimizerConfig(0.1, 0.9, ((10, 0.5), (10, 0.5)))
        with pytest.raises(ValueError):
            OptimizerConfig(0.1, 0.9, ((10, 0.0),))

    def test_parse(self):
        assert parse_schedule("10000:0.2, 20000:0.1") == ((10000, 0.2), (20000, 0.1))
        assert parse_schedule("") == ()


class TestCheckpoint:
    def _ckpt(self):
        model = build_jigsaw_model(replace(SMALL, hidden=8))
        state = {k: v.clone() for k, v in model.state_dict().items()}
        vel = {n: torch.randn_like(p) for n, p in model.named_parameters()}
        rng = np.random.default_rng(4)
        return model, Checkpoint(7, state, vel, {"numpy": rng.bit_generator.state}, model.backbone.fingerprint())

    def test_roundtrip(self, tmp_path):
        model, ck = self._ckpt()
        back = load_checkpoint(save_checkpoint(ck, tmp_path / "a.ckpt"), model.backbone.fingerprint())
        assert back.step == 7 and back.rng_state == ck.rng_state
        for k, v in ck.params.items():
            assert torch.equal(back.params[k], v) and back.params[k].dtype == v.dtype
        for k, v in ck.optimizer_state.items():
            assert torch.equal(back.optimizer_state[k], v)

    def test_wrong_arch(self, tmp_path):
        _, ck = self._ckpt()
        other = build_jigsaw_model(replace(SMALL, norm=False)).backbone.fingerprint()
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(save_checkpoint(ck, tmp_path / "a.ckpt"), other)

    def test_truncated(self, tmp_path):
        _, ck = self._ckpt()
        path = save_checkpoint(ck, tmp_path / "a.ckpt")
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_name(self):
        assert checkpoint_name(10000) == "param-at-10000.ckpt"


class TestTrainJigsaw:
    def test_zero_steps(self, small_set, tmp_path):
        model0 = build_jigsaw_model(replace(SMALL, steps=0))
        _, rows = train_jigsaw(replace(SMALL, steps=0, checkpoint_steps=()), small_set, tmp_path)
        assert rows == []
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["param-at-0.ckpt"]
        ck = load_checkpoint(tmp_path / "param-at-0.ckpt")
        for k, v in model0.state_dict().items():
            assert torch.equal(ck.params[k], v)

    def test_outputs(self, small_set, tmp_path):
        _, rows = train_jigsaw(SMALL, small_set, tmp_path)
        assert [int(r["step"]) for r in rows] == list(range(1, 7))
        assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == "step,lr,loss,patch_acc"
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [
            "param-at-0.ckpt", "param-at-3.ckpt", "param-at-6.ckpt"]
        assert load_checkpoint(tmp_path / "param-at-6.ckpt").step == 6

    def test_deterministic(self, small_set, tmp_path):
        train_jigsaw(SMALL, small_set, tmp_path / "a")
        train_jigsaw(SMALL, small_set, tmp_path / "b")
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
        a = load_checkpoint(tmp_path / "a/param-at-6.ckpt")
        b = load_checkpoint(tmp_path / "b/param-at-6.ckpt")
        assert all(torch.equal(a.params[k], b.params[k]) for k in a.params)

    def test_resume_bit_exact(self, small_set, tmp_path):
        full, _ = train_jigsaw(SMALL, small_set, tmp_path / "full")
        train_jigsaw(SMALL, small_set, tmp_path / "part")
        # simulate an interrupted run: keep only rows and checkpoints up to step 3
        (tmp_path / "part/param-at-6.ckpt").unlink()
        ck = load_checkpoint(tmp_path / "part/param-at-3.ckpt")
        resumed, _ = train_jigsaw(SMALL, small_set, tmp_path / "part", resume=ck)
        assert (tmp_path / "full/metrics.csv").read_bytes() == (tmp_path / "part/metrics.csv").read_bytes()
        for (k, v), w in zip(full.state_dict().items(), resumed.state_dict().values()):
            assert torch.equal(v, w), k

    def test_resume_wrong_backbone(self, small_set, tmp_path):
        train_jigsaw(SMALL, small_set, tmp_path)
        ck = load_checkpoint(tmp_path / "param-at-3.ckpt")
        with pytest.raises(CheckpointError):
            train_jigsaw(replace(SMALL, norm=False), small_set, tmp_path / "b", resume=ck)

    def test_load_model(self, small_set, tmp_path):
        model, _ = train_jigsaw(SMALL, small_set, tmp_path)
        back = load_jigsaw_model(load_checkpoint(tmp_path / "param-at-6.ckpt"))
        x = torch.randn(1, 3, 96, 96)
        model.eval(), back.eval()
        with torch.no_grad():
            assert torch.equal(model(x), back(x))

    def test_bad_crop(self, small_set, tmp_path):
        from patchforge.archspec import ResolutionMismatchError
        with pytest.raises(ResolutionMismatchError):
            train_jigsaw(replace(SMALL, crop_size=64), small_set, tmp_path)

    def test_non_finite_loss(self, small_set, tmp_path):
        with pytest.raises(TrainingError, match="non-finite"):
            train_jigsaw(replace(SMALL, base_lr=1e12, norm=False), small_set, tmp_path)

    def test_early_loss_decrease(self, small_set, tmp_path):
        # the per-batch loss is noisy, so compare means over 4 windows of 15 steps
        cfg = replace(SMALL, steps=60, batch_size=4, base_lr=0.05, mirror_prob=0.0,
                      scale_range=(1.0, 1.0), checkpoint_steps=())
        decreasing = 0
        for seed in range(5):
            _, rows = train_jigsaw(replace(cfg, seed=seed), small_set, tmp_path / str(seed))
            loss = np.array([float(r["loss"]) for r in rows]).reshape(4, 15).mean(1)
            decreasing += bool(np.all(np.diff(loss) < 0))
        assert decreasing >= 4
