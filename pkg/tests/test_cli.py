import json
import subprocess
import sys

import numpy as np
import pytest
import torch
from PIL import Image

from dkic.checkpoint import save_checkpoint
from dkic.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, resolve_train_config
from dkic.evaluation import RdCurve
from dkic.model import DKIC, ModelConfig
from dkic.range_coder import unpack_bitstream


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    torch.manual_seed(0)
    save_checkpoint(DKIC(ModelConfig.toy()), root / "model.npz")
    rng = np.random.default_rng(0)
    (root / "imgs").mkdir()
    for name, (h, w) in {"a.png": (50, 70), "b.png": (64, 64)}.items():
        Image.fromarray(rng.integers(0, 256, (h, w, 3), dtype=np.uint8)).save(root / "imgs" / name)
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestCodecCommands:
    def test_round_trip(self, workdir, tmp_path, capsys):
        src = workdir / "imgs" / "a.png"
        code, out, _ = run(capsys, "compress", src, "-o", tmp_path / "a.dkic", "--model", workdir / "model.npz")
        assert code == EXIT_OK
        enc_bpp = float(out.split()[0])
        b = unpack_bitstream((tmp_path / "a.dkic").read_bytes())
        assert (b.width, b.height) == (70, 50)
        assert enc_bpp == pytest.approx(8 * (tmp_path / "a.dkic").stat().st_size / (70 * 50), abs=1e-6)
        code, out, _ = run(capsys, "decompress", tmp_path / "a.dkic", "-o", tmp_path / "a.png", "--model", workdir / "model.npz")
        assert code == EXIT_OK
        assert float(out.split()[0]) == enc_bpp
        assert Image.open(tmp_path / "a.png").size == (70, 50)

    def test_model_dir_env(self, workdir, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("DKIC_MODEL_DIR", str(workdir))
        code, _, _ = run(capsys, "compress", workdir / "imgs" / "b.png", "-o", tmp_path / "b.dkic")
        assert code == EXIT_OK
        monkeypatch.delenv("DKIC_MODEL_DIR")
        code, _, err = run(capsys, "compress", workdir / "imgs" / "b.png", "-o", tmp_path / "c.dkic")
        assert code == EXIT_USAGE and "DKIC_MODEL_DIR" in err

    def test_byte_identical(self, workdir, tmp_path, capsys):
        for name in ("x1", "x2"):
            run(capsys, "compress", workdir / "imgs" / "a.png", "-o", tmp_path / name, "--model", workdir / "model.npz")
        assert (tmp_path / "x1").read_bytes() == (tmp_path / "x2").read_bytes()

    def test_missing_input(self, workdir, tmp_path, capsys):
        code, _, err = run(capsys, "compress", tmp_path / "nope.png", "-o", tmp_path / "o", "--model", workdir / "model.npz")
        assert code == EXIT_DATA
        assert err.startswith("dkic: error[data]:") and len(err.strip().splitlines()) == 1
        assert not list(tmp_path.iterdir())

    def test_corrupt_bitstream_leaves_no_output(self, workdir, tmp_path, capsys):
        (tmp_path / "bad.dkic").write_bytes(b"DKIC" + bytes(10))
        code, _, err = run(capsys, "decompress", tmp_path / "bad.dkic", "-o", tmp_path / "out.png", "--model", workdir / "model.npz")
        assert code == EXIT_DATA and "error[data]" in err
        assert sorted(p.name for p in tmp_path.iterdir()) == ["bad.dkic"]

    def test_eval(self, workdir, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--model", workdir / "model.npz", "--dir", workdir / "imgs", "-o", tmp_path / "rd.csv")
        assert code == EXIT_OK
        lines = (tmp_path / "rd.csv").read_text().splitlines()
        assert lines[0] == "name,width,height,bpp,psnr"
        assert [line.split(",")[0] for line in lines[1:]] == ["a.png", "b.png", "mean"]
        assert out.endswith("dB\n")


class TestBdrateCommand:
    def test_self_comparison(self, tmp_path, capsys):
        RdCurve([(0.1, 28), (0.2, 30), (0.4, 32), (0.8, 34)]).to_csv(tmp_path / "a.csv")
        code, out, _ = run(capsys, "bdrate", "--test", tmp_path / "a.csv", "--anchor", tmp_path / "a.csv")
        assert code == EXIT_OK and out.strip() == "0.00%"

    def test_scaled_anchor_json(self, tmp_path, capsys):
        pts = [(0.1, 28), (0.2, 30), (0.4, 32), (0.8, 34)]
        RdCurve(pts).to_json(tmp_path / "t.json")
        RdCurve([(r * 1.1, d) for r, d in pts]).to_json(tmp_path / "a.json")
        code, out, _ = run(capsys, "bdrate", "--test", tmp_path / "t.json", "--anchor", tmp_path / "a.json")
        assert out.strip() == "-9.09%"

    def test_too_few_points(self, tmp_path, capsys):
        RdCurve([(0.1, 28), (0.2, 30)]).to_csv(tmp_path / "a.csv")
        code, _, err = run(capsys, "bdrate", "--test", tmp_path / "a.csv", "--anchor", tmp_path / "a.csv")
        assert code == EXIT_DATA and "at least 4" in err


class TestUsage:
    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "compress", "--frobnicate")
        assert code == EXIT_USAGE
        assert err.startswith("usage:")
        assert "error[usage]" in err

    def test_no_command(self, capsys):
        assert run(capsys)[0] == EXIT_USAGE

    def test_unknown_set_key(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--set", "momentum=0.9", "-o", tmp_path / "run")
        assert code == EXIT_USAGE and "momentum" in err

    def test_inspect_needs_mode(self, workdir, capsys):
        code, _, _ = run(capsys, "inspect", "--model", workdir / "model.npz")
        assert code == EXIT_USAGE


class TestInspectCommand:
    def test_offsets_and_stats(self, workdir, tmp_path, capsys):
        code, out, _ = run(
            capsys, "inspect", "--model", workdir / "model.npz", "--offsets", "--latent-stats",
            "--image", workdir / "imgs" / "b.png", "--target", "4,4", "-o", tmp_path / "b",
        )
        assert code == EXIT_OK
        assert "untrained" in out
        rec = json.loads((tmp_path / "b.offsets.json").read_text())
        assert rec["target"] == [4, 4]
        assert (tmp_path / "b.offsets.png").is_file()
        assert len(json.loads((tmp_path / "b.latent.json").read_text())["groups"]) == 5

    def test_bad_target(self, workdir, tmp_path, capsys):
        code, _, err = run(
            capsys, "inspect", "--model", workdir / "model.npz", "--offsets",
            "--image", workdir / "imgs" / "b.png", "--target", "999,0", "-o", tmp_path / "b",
        )
        assert code == EXIT_DATA and "outside" in err


class TestConfig:
    def test_precedence(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"lam": 0.0067, "seed": 1, "entropy": {"hyper_channels": 16}}))
        tcfg, mcfg, resolved = resolve_train_config(tmp_path / "c.json", ["lam=0.025", "transform.kernel_side=5"], seed=9)
        assert tcfg.lam == 0.025 and tcfg.seed == 9
        assert mcfg.entropy.hyper_channels == 16
        assert mcfg.transform.kernel_side == 5
        assert resolved["preset"] == "toy"
        json.dumps(resolved)

    def test_bad_json(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text("{not json")
        code, _, err = run(capsys, "train", "--config", tmp_path / "c.json", "-o", tmp_path / "run")
        assert code == EXIT_DATA and "valid JSON" in err

    def test_bad_value(self, tmp_path, capsys):
        code, _, _ = run(capsys, "train", "--set", "lam=0", "-o", tmp_path / "run")
        assert code == EXIT_DATA


class TestTrainCommand:
    def test_short_run(self, workdir, tmp_path, capsys):
        with pytest.warns(UserWarning, match="a.png"):
            code, out, _ = run(
                capsys, "train", "--dataset", workdir / "imgs", "--set", "batch_size=2", "--steps", 2, "-o", tmp_path / "run"
            )
        assert code == EXIT_OK
        summary = json.loads(out)
        assert summary["steps"] == 2
        assert (tmp_path / "run" / "model.npz").is_file()
        assert json.loads((tmp_path / "run" / "config.json").read_text())["batch_size"] == 2

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--dataset", tmp_path / "none", "--steps", 1, "-o", tmp_path / "run")
        assert code == EXIT_DATA and "error[data]" in err


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dkic", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "compress", "decompress", "eval", "bdrate", "inspect"):
        assert cmd in proc.stdout
