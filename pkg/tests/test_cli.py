import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from cycletrans.cli import main
from cycletrans.config import ExperimentConfig, load_config
from cycletrans.data import load_split, save_nifti, save_png_slices
from cycletrans.evaluation import aggregate_rows, parse_aggregates_markdown, read_rows_csv
from cycletrans.models import DiscriminatorSpec, GeneratorSpec, make_model, save_checkpoint
from cycletrans.training import LossHistory

ROOT = Path(__file__).resolve().parents[1]

TINY = """
output_dir = "{out}"

[toy]
n_test = 3

[toy.spec]
image_size = 16
n_images = 6

[model.generator]
image_size = 16
base_width = 4
n_residual_blocks = 2

[model.discriminator]
image_size = 16
base_width = 4
n_layers = 2

[train]
epochs = 2
freeze_disc_epochs = 0
checkpoint_every = 1

[train.weights]
lambda1 = 10.0
lambda2 = 5.0

[finetune]
epochs = 3
freeze_disc_epochs = 1
decay = "linear"

[finetune.weights]
lambda1 = 10.0
lambda2 = 5.0

[eval]
bins = 32
"""


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_config(tmp_path, text=TINY, name="cfg.toml", out="run"):
    path = tmp_path / name
    path.write_text(text.format(out=(tmp_path / out).as_posix()))
    return path


@pytest.fixture
def toy_run(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["toy", "--config", str(cfg)]) == 0
    return cfg, tmp_path / "run"


def test_prepare_is_deterministic_and_consistent(tmp_path, capsys):
    rng = np.random.default_rng(0)
    paths = {}
    for dom in ("x", "y"):
        paths[dom] = []
        for i in range(4):
            p = tmp_path / f"{dom}{i}.nii.gz"
            save_nifti(p, rng.normal(100, 20, (5, 12, 12)).astype(np.float32))
            paths[dom].append(p.as_posix())
    text = (f'output_dir = "{(tmp_path / "run").as_posix()}"\n[data]\n'
            f"x_paths = {json.dumps(paths['x'])}\ny_paths = {json.dumps(paths['y'])}\n"
            'axes = ["axial"]\ncrop_size = 16\ntest_fraction = 0.25\nseed = 3\n')
    cfg = tmp_path / "prep.toml"
    cfg.write_text(text)
    assert main(["prepare", "--config", str(cfg)]) == 0
    manifest = tmp_path / "run/data/manifest.json"
    first = manifest.read_bytes()
    assert main(["prepare", "--config", str(cfg)]) == 1  # refuses to clobber
    assert main(["prepare", "--config", str(cfg), "--force"]) == 0
    assert manifest.read_bytes() == first
    m = json.loads(first)
    train = load_split(tmp_path / "run/data", "train")
    assert m["splits"]["train"]["slices"] == train.counts() == {"x": 36, "y": 36}
    assert (tmp_path / "run/data/config.frozen.toml").is_file()


def test_prepare_bad_path(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(f'output_dir = "{tmp_path.as_posix()}/run"\n[data]\n'
                   'x_paths = ["/no/such/volume.nii.gz"]\ny_paths = ["/no/such/other.nii.gz"]\n')
    assert main(["prepare", "--config", str(cfg)]) != 0
    assert "/no/such/volume.nii.gz" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY.replace("n_layers = 2", "n_layers = 2\nn_layer = 2"))
    assert main(["toy", "--config", str(cfg)]) == 1
    assert "n_layer" in capsys.readouterr().err
    with pytest.raises(Exception):
        load_config(cfg)


def test_weights_must_be_explicit(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY.replace("[train.weights]\nlambda1 = 10.0\nlambda2 = 5.0\n", ""))
    assert main(["toy", "--config", str(cfg)]) == 1
    assert "lambda1" in capsys.readouterr().err


def test_frozen_config_reloads(toy_run):
    cfg, out = toy_run
    frozen = load_config(out / "data/config.frozen.toml")
    assert frozen == load_config(cfg)
    assert isinstance(frozen, ExperimentConfig)


def test_train_artifacts_and_determinism(toy_run, tmp_path, capsys):
    cfg, out = toy_run
    assert main(["train", "--config", str(cfg), "--deterministic"]) == 0
    lines = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert lines[-1]["event"] == "done"
    first = sha(out / "train/checkpoints/scratch_final.pt")
    hist = LossHistory.from_csv(out / "train/history.csv")
    assert len(hist) == lines[-1]["iterations"] == 2 * 6
    assert (out / "train/loss_curves.png").stat().st_size > 0
    assert sorted(p.name for p in (out / "train/checkpoints").iterdir()) == ["scratch_epoch0001.pt", "scratch_final.pt"]
    assert main(["train", "--config", str(cfg), "--deterministic"]) == 1  # no clobbering
    assert main(["train", "--config", str(cfg), "--deterministic", "--force"]) == 0
    assert sha(out / "train/checkpoints/scratch_final.pt") == first
    info = json.loads((out / "train/run_info.json").read_text())
    assert info["final_checkpoint_sha256"] == first


def test_no_truth_leakage_into_training(toy_run):
    cfg, out = toy_run
    assert main(["train", "--config", str(cfg)]) == 0
    truth = json.loads((out / "toy_truth.json").read_text())
    assert truth["format"] == "cycletrans-toy-truth-v1"
    for path in list((out / "data").rglob("*")) + list((out / "train").rglob("*")):
        if path.is_file() and path.suffix in (".json", ".toml", ".csv"):
            assert "toy_truth" not in path.read_text(), path
        if path.suffix == ".npz":
            with np.load(path) as z:
                assert set(z.files) == {"pixels", "volume_id", "axis", "index", "degenerate"}


def test_finetune_freezes_then_updates(toy_run, capsys):
    cfg, out = toy_run
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["finetune", "--config", str(cfg)]) == 0
    hist = LossHistory.from_csv(out / "finetune/history.csv")
    assert sorted(hist.epoch_lr) == [0, 1, 2]
    assert hist.epoch_lr[0] == 2e-4
    assert (out / "finetune/checkpoints/finetune_final.pt").is_file()


def test_finetune_spec_mismatch_before_mutation(toy_run, tmp_path, capsys):
    cfg, out = toy_run
    other = make_model(GeneratorSpec(base_width=2, n_residual_blocks=1, image_size=16),
                       DiscriminatorSpec(base_width=2, n_layers=1, image_size=16))
    ckpt = save_checkpoint(tmp_path / "other.pt", other)
    assert main(["finetune", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 1
    assert "mismatch" in capsys.readouterr().err
    assert not (out / "finetune").exists()


def test_divergence_exit_code(toy_run, tmp_path, capsys):
    cfg, out = toy_run
    c = load_config(cfg)
    model = make_model(c.model.generator, c.model.discriminator)
    with torch.no_grad():
        next(model.gen_y_to_x.parameters()).fill_(float("nan"))
    ckpt = save_checkpoint(tmp_path / "nan.pt", model)
    assert main(["finetune", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 3
    assert "last checkpoint" in capsys.readouterr().err


def identity_checkpoint(path, size=16):
    model = make_model(GeneratorSpec(base_width=4, n_residual_blocks=2, image_size=size, init="identity"),
                       DiscriminatorSpec(base_width=4, n_layers=2, image_size=size, init="constant"))
    return save_checkpoint(path, model)


def test_translate_png_directory(tmp_path, capsys):
    rng = np.random.default_rng(0)
    save_png_slices(tmp_path / "in", [rng.uniform(-1, 1, (16, 16)) for _ in range(5)])
    ckpt = identity_checkpoint(tmp_path / "id.pt")
    args = ["translate", "--checkpoint", str(ckpt), "--input", str(tmp_path / "in"),
            "--direction", "x_to_y", "--output-dir", str(tmp_path / "run")]
    assert main(args) == 0
    out = tmp_path / "run/translate/in_x_to_y"
    outputs = sorted(p for p in out.glob("slice_*.png"))
    assert len(outputs) == 5 and (out / "panel.png").is_file()
    hashes = [sha(p) for p in outputs]
    for src, dst in zip(sorted((tmp_path / "in").glob("*.png")), outputs):
        a = np.asarray(Image.open(src), float) / 65535 * 2 - 1
        b = np.asarray(Image.open(dst), float) / 65535 * 2 - 1
        # min-max normalized input; identity init outputs tanh(x)
        a = (a - a.min()) / (a.max() - a.min()) * 2 - 1
        assert np.mean(np.abs(a - b)) < 0.1
    assert main(args + ["--force"]) == 0
    assert [sha(p) for p in outputs] == hashes


def test_translate_nifti_and_bad_direction(tmp_path, capsys):
    save_nifti(tmp_path / "vol.nii.gz", np.random.default_rng(0).normal(size=(3, 16, 16)).astype(np.float32))
    ckpt = identity_checkpoint(tmp_path / "id.pt")
    assert main(["translate", "--checkpoint", str(ckpt), "--input", str(tmp_path / "vol.nii.gz"),
                 "--direction", "y_to_x", "--axis", "sagittal", "--output-dir", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run/translate/vol_y_to_x/vol_y_to_x.nii.gz").is_file()
    with pytest.raises(SystemExit) as exc:
        main(["translate", "--checkpoint", str(ckpt), "--input", str(tmp_path / "vol.nii.gz"),
              "--direction", "sideways"])
    assert exc.value.code == 2


def test_evaluate_identity_checkpoint(toy_run, tmp_path, capsys):
    cfg, out = toy_run
    ckpt = identity_checkpoint(tmp_path / "id.pt")
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(ckpt),
                 "--truth", str(out / "toy_truth.json")]) == 0
    tables = json.loads((out / "eval/tables.json").read_text())
    for direction in ("x_to_y", "y_to_x"):
        same = [r for r in tables[direction]["rows"] if r["method"].startswith("No Translation X vs X")][0]
        assert same["bd"] == pytest.approx(0.0, abs=1e-12) and same["hc"] == pytest.approx(1.0, abs=1e-12)
    rows = read_rows_csv(out / "eval/rows.csv")
    assert len(rows) == 2 * 3
    assert parse_aggregates_markdown((out / "eval/tables.md").read_text()) == aggregate_rows(rows)
    assert (out / "eval/ssim_x_to_y.png").is_file() and (out / "eval/oracle.json").is_file()
    assert main(["report", "--config", str(cfg)]) == 0
    assert "aggregates match rows.csv: True" in (out / "report/report.md").read_text()


def test_evaluate_missing_test_split(toy_run, tmp_path, capsys):
    cfg, out = toy_run
    (out / "data/test_x.npz").unlink()
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(identity_checkpoint(tmp_path / "id.pt"))]) != 0


def test_report_without_outputs(tmp_path, capsys):
    assert main(["report", "--output-dir", str(tmp_path / "empty")]) == 1


@pytest.mark.slow
def test_toy_config_one_epoch_under_two_minutes(tmp_path, capsys):
    start = time.perf_counter()
    out = tmp_path / "toy"
    assert main(["toy", "--config", str(ROOT / "configs/toy.toml"), "--output-dir", str(out)]) == 0
    assert main(["train", "--config", str(ROOT / "configs/toy.toml"), "--output-dir", str(out),
                 "--epochs", "1", "--deterministic"]) == 0
    elapsed = time.perf_counter() - start
    assert elapsed < 120, f"{elapsed:.1f}s"
    assert len(LossHistory.from_csv(out / "train/history.csv")) == 200
