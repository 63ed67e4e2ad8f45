import json

import pytest

from vidtune.checkpoint import load_tensor_file
from vidtune.cli import main, parse_args, read_config
from vidtune.errors import ConfigurationError
from vidtune.harness.bench import read_csv
from vidtune.harness.export import read_ppm


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    rc = main(["pretrain", "--corpus-size", "200", "--resolution", "16", "--steps", "3", "--batch", "2",
               "--T", "50", "--base-width", "8", "--d-cond", "4", "--out", str(out)])
    assert rc == 0
    return out


def test_pretrain_outputs(pretrained):
    for name in ("t2i.ckpt", "losses.csv", "losses.png", "manifest.json"):
        assert (pretrained / name).exists(), name
    man = json.loads((pretrained / "manifest.json").read_text())
    assert man["command"] == "pretrain" and man["seeds"]["train"] == 0
    assert {"numpy", "python", "vidtune"} <= set(man["versions"])


def test_tune_sample_extend(pretrained, tmp_path):
    ck = str(pretrained / "t2i.ckpt")
    tuned = tmp_path / "tuned"
    assert main(["tune", "--checkpoint", ck, "--frames", "4", "--size", "4", "--dx", "1", "--resolution", "16",
                 "--steps", "2", "--out", str(tuned)]) == 0
    assert len(list((tuned / "clip").glob("frame_*.ppm"))) == 4

    run = tmp_path / "run"
    assert main(["sample", "--checkpoint", str(tuned / "tuned.ckpt"), "--prompt", "blue square moving right on white",
                 "--frames", "4", "--steps", "3", "--resolution", "16", "--out", str(run)]) == 0
    assert len(load_tensor_file(run / "trajectory.bin").tensors) == 4

    ext = tmp_path / "ext"
    assert main(["extend", "--run-dir", str(run), "-k", "2", "--out", str(ext)]) == 0
    for i in range(1, 5):
        a = (run / f"frame_{i:04d}.ppm").read_bytes()
        assert (ext / f"frame_{i:04d}.ppm").read_bytes() == a
    assert (ext / "frame_0006.ppm").exists()
    man = json.loads((ext / "manifest.json").read_text())
    assert man["prefix_deviation"] == 0.0
    assert read_ppm(ext / "contact_sheet.ppm").shape == (3, 16, 96)


def test_sample_is_reproducible(pretrained, tmp_path):
    args = ["sample", "--checkpoint", str(pretrained / "t2i.ckpt"), "--prompt", "red circle on gray",
            "--frames", "2", "--steps", "2", "--resolution", "16"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "contact_sheet.ppm").read_bytes() == (tmp_path / "b" / "contact_sheet.ppm").read_bytes()


def test_unknown_prompt_token_fails(pretrained, tmp_path, capsys):
    rc = main(["sample", "--checkpoint", str(pretrained / "t2i.ckpt"), "--prompt", "red hexagon",
               "--frames", "2", "--steps", "2", "--resolution", "16", "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "hexagon" in capsys.readouterr().err


def test_bench_writes_csv_and_figure(tmp_path):
    assert main(["bench", "--m", "1", "2", "--N", "4", "--repetitions", "1", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "bench.csv")
    assert len(rows) == 8 and all(r.dot_products == r.closed_form for r in rows)
    assert (tmp_path / "bench.png").stat().st_size > 0


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--module", "tensor", "--seeds", "1", "--max-entries", "4", "--out", str(tmp_path)]) == 0
    assert "PASS" in (tmp_path / "gradcheck.csv").read_text()


def test_config_file_with_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# bench settings\nm = 1, 2, 4\nN = 16\nrepetitions = 2\nout = " + str(tmp_path / "o") + "\n")
    args = parse_args(["bench", "--config", str(cfg), "--repetitions", "3"])
    assert args.m == [1, 2, 4] and args.N == [16] and args.repetitions == 3
    assert args.out == str(tmp_path / "o")


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no equals sign here\n")
    with pytest.raises(ConfigurationError):
        read_config(bad)
    unknown = tmp_path / "unknown.cfg"
    unknown.write_text("colour = red\n")
    assert main(["bench", "--config", str(unknown), "--out", str(tmp_path)]) == 2
