import csv

import numpy as np
import pytest

from cyclingnet.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, main
from cyclingnet.config import ConfigError, parse_override, resolve
from cyclingnet.imaging import read_image, write_image
from cyclingnet.pipeline import ClipManifest, write_manifest


@pytest.fixture
def demo(tmp_path, monkeypatch):
    """A synthetic corpus plus its config, written by the synth command."""
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "--out", "demo", "--clips", "4", "--val-clips", "1", "--test-clips", "1",
                 "--frames", "7", "-q"]) == 0
    return tmp_path / "demo" / "config.toml"


def run(capsys, *argv):
    code = main(list(argv) + ["-q"])
    return code, capsys.readouterr().out


def test_config_precedence(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('flow.window_size = 9\ntrain.max_epochs = 7\ntrain.early_stop_patience = 3\n[paths]\noutput_dir = "x"\n')
    config = resolve(path, ["flow.window_size=11"], seed=4)
    assert config.flow.window_size == 11 and config.train.max_epochs == 7
    assert config.paths.output_dir == "x" and config.model.seed == config.train.seed == 4


@pytest.mark.parametrize("override", ["flow.nope=1", "nosection.x=1", "train.max_epochs=abc",
                                      "flow.window_size=4", "model.input_shape=[24,32,3]"])
def test_config_errors(override):
    with pytest.raises(ConfigError):
        resolve(overrides=[override])


def test_override_parsing():
    assert parse_override("model.variant=cnn") == ("model.variant", "cnn")
    assert parse_override("train.learning_rate=1e-3") == ("train.learning_rate", 1e-3)
    assert parse_override("model.dense_widths=[8,4]") == ("model.dense_widths", [8, 4])
    with pytest.raises(ConfigError):
        parse_override("no_equals")


def test_input_shape_follows_frame_size():
    config = resolve(overrides=["data.frame_height=48", "data.frame_width=64"])
    assert config.model.input_shape == (48, 64, 3)


def test_summary_golden_pass(tmp_path, capsys):
    code, out = run(capsys, "summary", "--golden", "--out", str(tmp_path))
    assert code == 0
    assert "total_trainable\t\t\t4383902" in out and "total_non_trainable\t\t\t456" in out
    assert out.rstrip().endswith("golden\tPASS")


def test_summary_golden_hidden_128_fails(tmp_path, capsys):
    code, out = run(capsys, "summary", "--golden", "--out", str(tmp_path), "--set", "model.lstm_hidden=128")
    assert code == EXIT_CHECK
    assert "diff\tbidirectional_1: params 263168 != expected 2625536" in out


def test_summary_cnn_variant(tmp_path, capsys):
    code, out = run(capsys, "summary", "--out", str(tmp_path), "--set", "model.variant=cnn")
    names = [line.split("\t")[0] for line in out.splitlines()]
    assert code == 0 and "attention" not in names and "bidirectional_1" not in names


def test_config_error_exit(tmp_path, capsys):
    code, _ = run(capsys, "summary", "--out", str(tmp_path), "--set", "model.variant=rnn")
    assert code == EXIT_CONFIG
    assert run(capsys, "summary", "--config", str(tmp_path / "missing.toml"))[0] == EXIT_CONFIG


def test_flow_is_idempotent(demo, capsys):
    code, out = run(capsys, "flow", "--config", str(demo))
    assert code == 0
    rows = [l.split("\t") for l in out.splitlines()[1:-1]]
    assert all(r[1] == "7" and r[2] == "6" and r[3] == "6" for r in rows)
    files = sorted((demo.parent / "flow_cache").rglob("*.flo"))
    assert len(files) == 6 * 6
    before = [f.read_bytes() for f in files]
    code, out = run(capsys, "flow", "--config", str(demo))
    assert all(l.split("\t")[3] == "0" for l in out.splitlines()[1:-1])
    assert [f.read_bytes() for f in files] == before


def test_flow_emit_color_static_clip_is_black(tmp_path, capsys):
    frames = tmp_path / "frames" / "still"
    frames.mkdir(parents=True)
    for t in range(5):
        write_image(frames / f"{t}.png", np.full((24, 32, 3), 90, np.uint8))
    write_manifest(tmp_path / "m.txt", [ClipManifest("still", frames, 5, [0] * 5)])
    code, _ = run(capsys, "flow", "--manifest", str(tmp_path / "m.txt"), "--cache", str(tmp_path / "c"),
                  "--out", str(tmp_path / "out"), "--set", "data.frame_height=24",
                  "--set", "data.frame_width=32", "--emit-color")
    images = sorted((tmp_path / "out" / "flow_color" / "still").glob("*.png"))
    assert code == 0 and len(images) == 4
    assert all(read_image(p).max() == 0 for p in images)


def test_flow_reports_unreadable_clip(tmp_path, capsys):
    good = tmp_path / "good"
    good.mkdir()
    for t in range(3):
        write_image(good / f"{t}.png", np.zeros((24, 32, 3), np.uint8))
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "0.png").write_bytes(b"not an image")
    (bad / "1.png").write_bytes(b"not an image")
    write_manifest(tmp_path / "m.txt", [ClipManifest("good", good, 3, [0] * 3),
                                        ClipManifest("bad", bad, 2, [0] * 2)])
    code, out = run(capsys, "flow", "--manifest", str(tmp_path / "m.txt"), "--cache", str(tmp_path / "c"),
                    "--out", str(tmp_path / "o"), "--set", "data.frame_height=24", "--set", "data.frame_width=32")
    assert code == EXIT_DATA
    assert "good\t3\t2\t2\tok" in out and "bad\t2\t-\t-\terror" in out


def test_train_without_flows_names_flow_command(demo, capsys, caplog):
    code, _ = run(capsys, "train", "--config", str(demo))
    assert code == EXIT_DATA
    assert "run the `flow` command first" in caplog.text


def test_train_eval_predict_end_to_end(demo, capsys):
    out_dir = demo.parent / "runs"
    assert run(capsys, "flow", "--config", str(demo))[0] == 0
    code, out = run(capsys, "train", "--config", str(demo), "--set", "train.max_epochs=3",
                    "--set", "train.early_stop_patience=2")
    assert code == 0 and "epochs\t3" in out and "accuracy\t" in out
    for name in ("weights.cynw", "history.csv", "history.png", "metrics_val.txt", "resolved_config.toml"):
        assert (out_dir / name).is_file(), name
    history = (out_dir / "history.csv").read_bytes()

    code, out = run(capsys, "eval", "--config", str(demo), "--sweep")
    assert code == 0 and "precision\t" in out
    sweep = list(csv.DictReader(open(out_dir / "sweep.csv")))
    recalls = [float(r["recall"]) for r in sweep]
    assert len(sweep) == 19 and all(a >= b for a, b in zip(recalls, recalls[1:]))
    assert (out_dir / "sweep.png").is_file() and (out_dir / "predictions.png").is_file()
    rows = list(csv.reader(open(out_dir / "predictions.csv")))
    assert rows[0] == ["clip_id", "frame_index", "probability", "predicted", "label"] and len(rows) == 4

    clip = demo.parent / "frames" / "test005"
    code, out = run(capsys, "predict", "--config", str(demo), "--clip", str(clip))
    assert code == 0 and out.startswith("intervals\ttest005\t")
    assert len(list(csv.reader(open(out_dir / "predictions.csv")))) == 1 + 3

    # same seed, same history
    assert run(capsys, "train", "--config", str(demo), "--set", "train.max_epochs=3",
               "--set", "train.early_stop_patience=2")[0] == 0
    assert (out_dir / "history.csv").read_bytes() == history


def test_resolved_config_reproduces(demo, capsys):
    out_dir = demo.parent / "runs"
    run(capsys, "summary", "--config", str(demo), "--set", "model.dropout=0.1", "--seed", "9")
    echoed = resolve(out_dir / "resolved_config.toml")
    assert echoed == resolve(demo, ["model.dropout=0.1"], seed=9)


def test_eval_architecture_mismatch(demo, capsys):
    assert run(capsys, "flow", "--config", str(demo))[0] == 0
    assert run(capsys, "train", "--config", str(demo), "--set", "train.max_epochs=2",
               "--set", "train.early_stop_patience=1")[0] == 0
    code, _ = run(capsys, "eval", "--config", str(demo), "--set", "model.variant=cnn")
    assert code == EXIT_DATA


def test_fuse_writes_composites(demo, capsys):
    assert run(capsys, "flow", "--config", str(demo))[0] == 0
    code, out = run(capsys, "fuse", "--config", str(demo), "--clip-id", "train000", "--limit", "2")
    assert code == 0 and out.startswith("fused\t2\t")
    assert len(list((demo.parent / "runs" / "fused" / "train000").glob("*.png"))) == 2


def test_predict_short_clip(tmp_path, capsys):
    from cyclingnet.network import ModelConfig, build_model, save_weights

    clip = tmp_path / "short"
    clip.mkdir()
    for t in range(3):
        write_image(clip / f"{t}.png", np.zeros((24, 32, 3), np.uint8))
    save_weights(build_model(ModelConfig.shrunken()), tmp_path / "w.cynw")
    shrunk = ["--set", "model.conv_kernels=[3,3,2,2,3]", "--set", "model.conv_strides=[1,1,1,1,1]",
              "--set", "model.conv_filters=[4,4,6,6,8]", "--set", "model.lstm_hidden=6",
              "--set", "model.attention_units=4", "--set", "model.dense_widths=[8,4]",
              "--set", "data.frame_height=24", "--set", "data.frame_width=32"]
    with pytest.warns(UserWarning):
        code, out = run(capsys, "predict", "--clip", str(clip), "--weights", str(tmp_path / "w.cynw"),
                        "--out", str(tmp_path / "o"), *shrunk)
    assert code == 0 and "intervals\tshort\t0\tnone" in out and "predictions\t0" in out


def test_selftest_perturbation_names_op(tmp_path, capsys):
    code, out = run(capsys, "selftest", "--seeds", "2", "--out", str(tmp_path), "--perturb-grad", "conv2d")
    assert code == EXIT_CHECK
    failing = [l.split("\t")[1] for l in out.splitlines() if l.startswith("FAIL")]
    assert "grad conv2d" in failing and "grad dense" not in failing


def test_train_on_default_synthetic_corpus_overfits(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "--out", "demo", "-q"]) == 0
    config = str(tmp_path / "demo" / "config.toml")
    assert run(capsys, "flow", "--config", config)[0] == 0
    code, out = run(capsys, "train", "--config", config)
    rows = list(csv.DictReader(open(tmp_path / "demo" / "runs" / "history.csv")))
    assert code == 0 and len(rows) <= 200
    assert max(float(r["train_acc"]) for r in rows) >= 0.95


def test_selftest_passes(tmp_path, capsys):
    code, out = run(capsys, "selftest", "--out", str(tmp_path))
    assert code == 0, out
    assert out.splitlines()[-1].startswith("selftest\tPASS")
