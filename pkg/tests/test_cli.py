import filecmp
import math
import os

import numpy as np
import pytest

from maevi import cli, events, voxel

SCENE = """\
height = 32
width = 32
background = 0.3
shape = rectangle color=0.9,0.8,0.2 pos=10,16 vel=2,0 size=8,6
"""

SMALL = ["n_time_bins=4", "embed_dim=4", "widths=2,2,3", "head_hidden=4"]


@pytest.fixture
def dataset(tmp_path):
    (tmp_path / "scene.txt").write_text(SCENE)
    out = tmp_path / "ds"
    assert cli.main(["gen", "--config", str(tmp_path / "scene.txt"), "--n", "2", "--out", str(out),
                     "n_random_shapes=1"]) == 0
    return out


def parse_table(text):
    rows = [line.split("\t") for line in text.strip().splitlines()]
    assert rows[0] == ["sample", "psnr", "ssim", "masked_psnr"]
    return rows[1:]


def test_gen_train_eval_smoke(dataset, tmp_path, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", str(dataset), "--out", str(run), "max_steps=3", "batch_size=1", *SMALL]) == 0
    assert (run / "final.ckpt").exists() and (run / "loss.tsv").exists()
    capsys.readouterr()
    assert cli.main(["eval", str(run / "final.ckpt"), str(dataset)]) == 0
    rows = parse_table(capsys.readouterr().out)
    assert [r[0] for r in rows] == ["sample_00000", "sample_00001", "mean"]
    assert all(math.isfinite(float(r[1])) for r in rows)


def test_eval_ground_truth_against_itself(dataset, capsys):
    assert cli.main(["eval", str(dataset), str(dataset)]) == 0
    rows = parse_table(capsys.readouterr().out)
    for r in rows:
        assert r[1] == "inf" and float(r[2]) == 1.0


def test_interp_is_deterministic(dataset, tmp_path):
    ck = tmp_path / "tied.ckpt"
    assert cli.main(["init", "--out", str(ck), "--tie-branches", "--seed", "3", "zero_head=false", *SMALL]) == 0
    sample = dataset / "sample_00000"
    for name in ("a", "b"):
        assert cli.main(["interp", str(ck), str(sample), "--out", str(tmp_path / name), "--branches"]) == 0
    names = ["frame_0.png", "standard.png", "filtered.png"]
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors
    img = events.read_image(str(tmp_path / "a" / "frame_0.png"))
    assert img.shape == (3, 32, 32)


def test_interp_over_dataset_root(dataset, tmp_path):
    ck = tmp_path / "m.ckpt"
    cli.main(["init", "--out", str(ck), *SMALL])
    assert cli.main(["interp", str(ck), str(dataset), "--out", str(tmp_path / "pred")]) == 0
    assert sorted(os.listdir(tmp_path / "pred")) == ["sample_00000", "sample_00001"]


def test_voxelize_and_filter(dataset, tmp_path):
    sample = str(dataset / "sample_00000")
    assert cli.main(["voxelize", sample, "--out", str(tmp_path / "v.bin"), "n_time_bins=4"]) == 0
    grid = voxel.load_grid(str(tmp_path / "v.bin"))
    np.testing.assert_array_equal(grid, voxel.voxelize_sample(events.load_sample(sample), 4).data)
    assert cli.main(["filter", sample, "--out", str(tmp_path / "f")]) == 0
    assert "loss_filter.png" in os.listdir(tmp_path / "f")


def test_gen_is_deterministic_per_seed(tmp_path):
    (tmp_path / "scene.txt").write_text(SCENE + "n_random_shapes = 2\n")
    for name, seed in (("a", "4"), ("b", "4"), ("c", "5")):
        cli.main(["gen", "--config", str(tmp_path / "scene.txt"), "--seed", seed, "--out", str(tmp_path / name)])
    same = filecmp.cmp(tmp_path / "a/sample_00000/frame_0.png", tmp_path / "b/sample_00000/frame_0.png", shallow=False)
    diff = filecmp.cmp(tmp_path / "a/sample_00000/frame_0.png", tmp_path / "c/sample_00000/frame_0.png", shallow=False)
    assert same and not diff


def test_overrides_beat_config_file(tmp_path):
    (tmp_path / "scene.txt").write_text(SCENE)
    cli.main(["gen", "--config", str(tmp_path / "scene.txt"), "--out", str(tmp_path / "d"), "width=40"])
    assert events.load_sample(str(tmp_path / "d" / "sample_00000")).width == 40


@pytest.mark.parametrize("argv, needle", [
    (["eval", "missing.ckpt", "nowhere"], "not a directory"),
    (["train", "{ds}", "--out", "{tmp}/r", "bogus=1"], "bogus"),
    (["train", "{ds}", "--out", "{tmp}/r", "lr0=fast"], "lr0"),
    (["voxelize", "{tmp}/nope", "--out", "{tmp}/v.bin"], "nope"),
    (["gen", "--n", "1"], "--out"),
    (["eval", "{tmp}/missing.ckpt", "{ds}"], "missing.ckpt"),
])
def test_errors_exit_nonzero_with_message(dataset, tmp_path, capsys, argv, needle):
    argv = [a.format(ds=dataset, tmp=tmp_path) for a in argv]
    assert cli.main(argv) != 0
    assert needle in capsys.readouterr().err


def test_config_file_unknown_key_names_it(dataset, tmp_path, capsys):
    (tmp_path / "train.txt").write_text("epochs = 1\nlearning_rate = 0.1\n")
    assert cli.main(["train", str(dataset), "--config", str(tmp_path / "train.txt"), "--out", str(tmp_path / "r")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_threads_env(monkeypatch):
    monkeypatch.setenv("MAEVI_THREADS", "2")
    assert cli.max_workers() == 2
    monkeypatch.setenv("MAEVI_THREADS", "0")
    with pytest.raises(cli.CliError):
        cli.max_workers()


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "a", "b", "--bogus"])
    assert exc.value.code == 2
