import os

import numpy as np
import pytest

from pointcl.cli import main
from pointcl.pointcloud import load_dataset


def run(args):
    return main(args)


@pytest.fixture
def data_files(tmp_path):
    train = tmp_path / "train.pcds"
    test = tmp_path / "test.pcds"
    assert run(["gen-data", "--classes", "sphere,cube,cylinder,torus",
                "--per-class", "10", "--points", "32", "--seed", "1",
                "--out", str(train)]) == 0
    assert run(["gen-data", "--classes", "sphere,cube,cylinder,torus",
                "--per-class", "5", "--points", "32", "--seed", "2",
                "--split", "test", "--out", str(test)]) == 0
    return train, test


def test_gen_data_counts(tmp_path):
    out = tmp_path / "ds.pcds"
    assert run(["gen-data", "--classes", "sphere,cube", "--per-class", "50",
                "--points", "128", "--seed", "1", "--out", str(out)]) == 0
    ds = load_dataset(out)
    assert len(ds) == 100
    assert (out.parent / (out.name + ".manifest.txt")).exists()


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a.pcds", tmp_path / "b.pcds"
    cmd = ["gen-data", "--classes", "sphere,cube", "--per-class", "10",
           "--points", "64", "--seed", "3"]
    assert run(cmd + ["--out", str(a)]) == 0
    assert run(cmd + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_data_unknown_class(tmp_path, capsys):
    rc = run(["gen-data", "--classes", "dodecahedron", "--out",
              str(tmp_path / "x.pcds")])
    assert rc == 2


def test_pretrain_and_probe(tmp_path, data_files):
    train, test = data_files
    out = tmp_path / "run"
    rc = run(["pretrain", "--data", str(train), "--out", str(out),
              "--pairs", "4", "--epochs", "2", "--points", "32",
              "--encoder-widths", "8,16", "--head-widths", "8,4",
              "--dropout", "0"])
    assert rc == 0
    assert (out / "checkpoint_final.pclm").exists()
    assert (out / "loss_curve.csv").exists()
    assert (out / "resolved_config.txt").exists()

    probe_out = tmp_path / "probe"
    rc = run(["probe", "--train-data", str(train), "--test-data", str(test),
              "--checkpoint", str(out / "checkpoint_final.pclm"),
              "--out", str(probe_out), "--points", "32",
              "--probe-epochs", "20", "--features", "both",
              "--encoder-widths", "8,16", "--head-widths", "8,4"])
    assert rc == 0
    csv = (probe_out / "probe_metrics.csv").read_text().splitlines()
    assert len(csv) == 3  # header + encoder row + head row
    assert (probe_out / "predictions_encoder.csv").exists()
    assert (probe_out / "predictions_head.csv").exists()


def test_finetune_head_init_pair(tmp_path, data_files):
    train, test = data_files
    out = tmp_path / "run"
    run(["pretrain", "--data", str(train), "--out", str(out),
         "--pairs", "4", "--epochs", "1", "--points", "32",
         "--encoder-widths", "8,16", "--head-widths", "8,4", "--dropout", "0"])
    ft = tmp_path / "ft"
    rc = run(["finetune", "--train-data", str(train), "--test-data", str(test),
              "--checkpoint", str(out / "checkpoint_final.pclm"),
              "--out", str(ft), "--points", "32", "--pairs", "4",
              "--finetune-epochs", "1", "--init-head",
              "--encoder-widths", "8,16", "--head-widths", "8,4"])
    assert rc == 0
    rows = (ft / "finetune_metrics.csv").read_text().splitlines()
    assert len(rows) == 3  # header + head-init off + on


def test_config_file_and_override(tmp_path, data_files):
    train, _ = data_files
    cfg = tmp_path / "run.cfg"
    cfg.write_text('transform = "rotate:y:180"\npairs = 4\nepochs = 1\n'
                   "points = 32\ndropout = 0\n"
                   "encoder_widths = 8,16\nhead_widths = 8,4\n")
    out = tmp_path / "run"
    rc = run(["pretrain", "--data", str(train), "--config", str(cfg),
              "--out", str(out), "--epochs", "2"])
    assert rc == 0
    resolved = (out / "resolved_config.txt").read_text()
    assert "epochs = 2" in resolved  # flag overrides file
    assert "transform = rotate:y:180" in resolved


def test_unknown_config_key(tmp_path, data_files):
    train, _ = data_files
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("warp_factor = 9\n")
    rc = run(["pretrain", "--data", str(train), "--config", str(cfg),
              "--out", str(tmp_path / "o")])
    assert rc == 2


def test_bad_transform_exit_2(tmp_path, data_files):
    train, _ = data_files
    rc = run(["pretrain", "--data", str(train), "--out", str(tmp_path / "o"),
              "--transform", "spin:z:10"])
    assert rc == 2


def test_missing_data_runtime_failure(tmp_path):
    rc = run(["pretrain", "--data", str(tmp_path / "nope.pcds"),
              "--out", str(tmp_path / "o"), "--epochs", "1"])
    assert rc == 1
    assert (tmp_path / "o" / ".failed").exists()


def test_export_features(tmp_path, data_files):
    train, _ = data_files
    out = tmp_path / "run"
    run(["pretrain", "--data", str(train), "--out", str(out),
         "--pairs", "4", "--epochs", "1", "--points", "32",
         "--encoder-widths", "8,16", "--head-widths", "8,4", "--dropout", "0"])
    feat_out = tmp_path / "feats"
    rc = run(["export-features", "--data", str(train),
              "--checkpoint", str(out / "checkpoint_final.pclm"),
              "--out", str(feat_out), "--points", "32"])
    assert rc == 0
    lines = (feat_out / "features_encoder.csv").read_text().splitlines()
    assert len(lines) == 41  # header + 40 samples
    assert lines[0].startswith("id,label,f0")


def test_segment_command(tmp_path):
    train = tmp_path / "seg.pcds"
    run(["gen-data", "--classes", "cylinder,cube", "--per-class", "5",
         "--points", "32", "--seed", "4", "--with-parts", "--out", str(train)])
    out = tmp_path / "segrun"
    rc = run(["segment", "--data", str(train), "--test-data", str(train),
              "--out", str(out), "--pairs", "2", "--epochs", "1",
              "--points", "32", "--probe-epochs", "10",
              "--encoder-widths", "8,16", "--head-widths", "8,4",
              "--seg-widths", "8,4", "--dropout", "0"])
    assert rc == 0
    assert (out / "segmentation_metrics.csv").exists()


def test_ablate_suites_shape(tmp_path, data_files):
    train, test = data_files
    for suite, expected_rows in (("table4", 11), ("table5", 5)):
        out = tmp_path / f"ablate_{suite}"
        rc = run(["ablate", "--suite", suite, "--data", str(train),
                  "--test-data", str(test), "--out", str(out),
                  "--pairs", "4", "--epochs", "1", "--points", "32",
                  "--probe-epochs", "10",
                  "--encoder-widths", "8,16", "--head-widths", "8,4",
                  "--dropout", "0"])
        assert rc == 0
        rows = (out / f"ablation_{suite}.csv").read_text().splitlines()
        assert len(rows) == expected_rows + 1
