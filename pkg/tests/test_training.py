import json
import math

import numpy as np
import pytest
import torch
from PIL import Image
from scipy.stats import chisquare

from dkic.checkpoint import load_checkpoint, save_checkpoint
from dkic.codec import NumericFailure
from dkic.model import DKIC, ModelConfig
from dkic.training import (
    LAMBDA_GRID,
    TrainConfig,
    crop_origins,
    evaluate_loss,
    ingest_dataset,
    lambda_index,
    learning_rate,
    make_optimizer,
    rd_loss,
    train,
    train_step,
)


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return DKIC(ModelConfig.toy())


def write_images(directory, sizes, seed=0):
    rng = np.random.default_rng(seed)
    for k, (h, w) in enumerate(sizes):
        arr = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        Image.fromarray(arr).save(directory / f"img{k}.png")


class TestRdLoss:
    def test_zero_distortion(self):
        x = torch.rand(1, 3, 16, 16)
        ly, lz = torch.full((1, 4, 1, 1), 0.25), torch.full((1, 2, 1, 1), 0.5)
        s = rd_loss(x, x.clone(), ly, lz, 0.013)
        assert s.distortion.item() == 0
        assert s.loss.item() == pytest.approx(s.rate_y.item() + s.rate_z.item())

    def test_half_likelihoods(self):
        c, h, w, H, W = 40, 4, 4, 64, 64
        x = torch.rand(1, 3, H, W)
        s = rd_loss(x, x, torch.full((1, c, h, w), 0.5), torch.full((1, 24, 1, 1), 0.5), 0.013)
        assert s.rate_y.item() == pytest.approx(c * h * w / (H * W))
        assert s.rate_z.item() == pytest.approx(24 / (H * W))

    def test_distortion_scale(self):
        x = torch.zeros(1, 3, 8, 8)
        s = rd_loss(x, x + 1 / 255, torch.ones(1, 1, 1, 1), torch.ones(1, 1, 1, 1), 1.0)
        assert s.distortion.item() == pytest.approx(1.0, rel=1e-5)

    def test_lambda_validation(self):
        x = torch.rand(1, 3, 8, 8)
        one = torch.ones(1, 1, 1, 1)
        assert 0.0130 in LAMBDA_GRID and len(LAMBDA_GRID) == 7
        rd_loss(x, x, one, one, 0.0130)
        with pytest.raises(ValueError):
            rd_loss(x, x, one, one, 0.0)
        with pytest.raises(ValueError):
            TrainConfig(lam=0.0)

    def test_non_finite(self):
        x = torch.rand(1, 3, 8, 8)
        with pytest.raises(NumericFailure):
            rd_loss(x, x * float("nan"), torch.ones(1, 1, 1, 1), torch.ones(1, 1, 1, 1), 0.01)

    def test_distortion_gradient_finite_difference(self):
        torch.manual_seed(0)
        x = torch.rand(1, 3, 4, 4, dtype=torch.float64)
        x_hat = torch.rand(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        one = torch.ones(1, 1, 1, 1, dtype=torch.float64)
        lam = 0.0483
        rd_loss(x, x_hat, one, one, lam).loss.backward()
        idx = (0, 1, 2, 3)
        eps = 1e-4
        with torch.no_grad():
            up, down = x_hat.clone(), x_hat.clone()
            up[idx] += eps
            down[idx] -= eps
            fd = (rd_loss(x, up, one, one, lam).loss - rd_loss(x, down, one, one, lam).loss) / (2 * eps)
        assert abs(fd.item() - x_hat.grad[idx].item()) < 1e-4 * abs(fd.item())

    def test_lambda_index(self):
        assert lambda_index(0.0130) == 2
        assert lambda_index(0.02) == 255


class TestSchedule:
    def test_full_scale_learning_rate(self):
        cfg = TrainConfig(epoch_size=80, batch_size=8)
        assert learning_rate(0, cfg) == 1e-4
        assert learning_rate(380 * 10 - 1, cfg) == 1e-4
        assert learning_rate(380 * 10, cfg) == 1e-5

    def test_toy_preset(self):
        cfg = TrainConfig.toy()
        assert cfg.steps_per_epoch == 63
        assert cfg.total_steps == 2016
        assert cfg.lr_drop_epoch / cfg.epochs == pytest.approx(0.95, abs=0.02)

    def test_crop_must_be_multiple_of_64(self):
        with pytest.raises(ValueError):
            TrainConfig(crop=100)

    def test_unknown_keys(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"lam": 0.0067, "momentum": 0.9}))
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_json(tmp_path / "c.json")
        (tmp_path / "c.json").write_text(json.dumps({"lam": 0.0067, "crop": 128}))
        assert TrainConfig.from_json(tmp_path / "c.json").crop == 128


class TestStep:
    def test_single_step_reduces_loss(self):
        model = tiny_model()
        cfg = TrainConfig.toy(lr_initial=1e-4)
        batch = torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(0))
        before = evaluate_loss(model, batch, cfg.lam)["loss"]
        train_step(batch, model, make_optimizer(model, cfg), cfg, torch.Generator().manual_seed(1))
        after = evaluate_loss(model, batch, cfg.lam)["loss"]
        assert after < before
        assert model.trained_steps == 1

    def test_optimizer_settings(self):
        opt = make_optimizer(tiny_model(), TrainConfig())
        assert isinstance(opt, torch.optim.AdamW)
        assert opt.defaults["betas"] == (0.9, 0.999)

    def test_nan_reports_diagnostics(self):
        model = tiny_model()
        cfg = TrainConfig.toy()
        with torch.no_grad():
            model.g_s.layers[0].weight.fill_(float("nan"))
        with pytest.raises(NumericFailure, match="diagnostics"):
            train_step(torch.rand(1, 3, 64, 64), model, make_optimizer(model, cfg), cfg)

    def test_deterministic_under_seed(self, tmp_path):
        write_images(tmp_path, [(96, 96), (128, 80)])
        cfg = TrainConfig.toy(batch_size=2, dataset_path=str(tmp_path), seed=3)
        runs = []
        for _ in range(2):
            model = tiny_model()
            runs.append([r["loss"] for r in train(model, cfg, steps=3)])
        assert runs[0] == runs[1]

    def test_train_writes_log_and_checkpoint(self, tmp_path):
        data = tmp_path / "data"
        data.mkdir()
        write_images(data, [(64, 64)])
        cfg = TrainConfig.toy(batch_size=1, dataset_path=str(data), checkpoint_every=2)
        train(tiny_model(), cfg, out_dir=tmp_path / "run", steps=2)
        lines = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert set(json.loads(lines[0])) == {"step", "loss", "D", "R_y", "R_z", "lr"}
        assert (tmp_path / "run" / "model.npz").is_file()
        assert (tmp_path / "run" / "step_000002.npz").is_file()

    def test_checkpoint_round_trip_same_stats(self, tmp_path):
        model = tiny_model()
        cfg = TrainConfig.toy()
        batch = torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(0))
        train_step(batch, model, make_optimizer(model, cfg), cfg)
        save_checkpoint(model, tmp_path / "m.npz")
        loaded, meta = load_checkpoint(tmp_path / "m.npz")
        assert meta["step"] == 1
        assert evaluate_loss(loaded, batch, cfg.lam) == evaluate_loss(model, batch, cfg.lam)


class TestIngest:
    def test_unique_crop_is_whole_image(self, tmp_path):
        write_images(tmp_path, [(256, 256)])
        batch = next(ingest_dataset(tmp_path, 256, seed=0, batch_size=2))
        arr = np.asarray(Image.open(tmp_path / "img0.png"), dtype=np.float32) / 255
        want = torch.from_numpy(arr).permute(2, 0, 1)
        torch.testing.assert_close(batch[0], want)
        torch.testing.assert_close(batch[1], want)

    def test_seeded(self, tmp_path):
        write_images(tmp_path, [(200, 300), (128, 128)])
        a = ingest_dataset(tmp_path, 64, seed=7, batch_size=4)
        b = ingest_dataset(tmp_path, 64, seed=7, batch_size=4)
        for _ in range(3):
            assert torch.equal(next(a), next(b))
        c = ingest_dataset(tmp_path, 64, seed=8, batch_size=4)
        assert not torch.equal(next(c), next(ingest_dataset(tmp_path, 64, seed=7, batch_size=4)))

    def test_range_and_shape(self, tmp_path):
        write_images(tmp_path, [(130, 70)])
        batch = next(ingest_dataset(tmp_path, 64, seed=0, batch_size=3))
        assert batch.shape == (3, 3, 64, 64)
        assert batch.min() >= 0 and batch.max() <= 1

    def test_small_images_skipped(self, tmp_path):
        write_images(tmp_path, [(32, 200), (64, 64)])
        with pytest.warns(UserWarning, match="skipping"):
            it = ingest_dataset(tmp_path, 64, seed=0)
        assert next(it).shape[-1] == 64

    def test_empty_set(self, tmp_path):
        write_images(tmp_path, [(32, 32)])
        with pytest.warns(UserWarning), pytest.raises(ValueError, match="no usable images"):
            ingest_dataset(tmp_path, 64, seed=0)

    def test_origin_uniformity(self):
        rng = np.random.default_rng(2024)
        crop, size = 256, 512
        origins = np.array([crop_origins(rng, (size, size), crop) for _ in range(10_000)])
        positions = size - crop + 1
        for axis in range(2):
            counts = np.bincount(origins[:, axis], minlength=positions)
            assert len(counts) == positions
            assert chisquare(counts).pvalue > 0.01
