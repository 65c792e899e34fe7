import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from lvt import cli
from lvt import data_io as dio
from lvt import latent_transformer as lt
from lvt import training as tr

TINY = """\
seed = 0
data.T = 4
data.H = 8
data.W = 8
data.size = 3
data.count = 4
codec.K = 8
codec.D = 8
codec.n_c = 2
codec.H = 8
codec.W = 8
codec.hidden = 8
codec.residual_hidden = 4
codec.residual_blocks = 1
lvt.factor = 4,1,1
lvt.d_model = 8
lvt.heads = 2
lvt.encoder_layers = 1
lvt.decoder_layers = 1
lvt.ff_width = 8
lvt.max_relative = 2,2,2
sampler.frames = 4
sampler.prime_frames = 1
train.codec_batch = 2
train.lvt_videos = 4
train.log_every = 1
"""


def run(argv, capsys):
    try:
        code = cli.main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """make-data, train-codec and an untrained train-lvt run over the tiny config."""
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(TINY)
    assert cli.main(["make-data", "--spec", str(root / "run.cfg"), "--out", str(root / "data")]) == 0
    assert cli.main(["train-codec", "--config", str(root / "run.cfg"), "--out", str(root / "codec.ckpt"),
                     "--steps", "5", "--data", str(root / "data")]) == 0
    assert cli.main(["train-lvt", "--config", str(root / "run.cfg"), "--codec", str(root / "codec.ckpt"),
                     "--out", str(root / "lvt.ckpt"), "--steps", "0", "--data", str(root / "data")]) == 0
    return root


def test_make_data_outputs(workspace):
    names = (workspace / "data" / "manifest.txt").read_text().split()
    assert names == [f"video_{i:05d}.lvtv" for i in range(4)]
    assert dio.read_video(workspace / "data" / names[0]).shape == (4, 8, 8, 3)
    assert "config_digest" in json.loads((workspace / "data" / "manifest.txt.json").read_text())


def test_train_codec_writes_checkpoint_and_log(workspace):
    state = tr.codec_from_checkpoint(dio.load_checkpoint(workspace / "codec.ckpt"))
    assert state.params.step == 5
    lines = (workspace / "codec.ckpt.log.csv").read_text().splitlines()
    assert lines[0] == "step,loss,bits_per_dim,wall_clock" and len(lines) == 6


def test_eval_untrained_lvt_is_uniform(workspace, capsys):
    code, _, err = run(["eval", "--codec", workspace / "codec.ckpt", "--lvt", workspace / "lvt.ckpt",
                        "--data", workspace / "data", "--out", workspace / "report", "--t0", 1], capsys)
    assert code == 0, err
    report = json.loads((workspace / "report.json").read_text())
    assert abs(report["bits_per_dim"] - 3.0) <= 0.02 * 3.0
    np.testing.assert_allclose(np.sum(report["usage_histogram"], axis=1), 1.0)
    assert report["config_digest"]
    assert "bits_per_dim=" in (workspace / "report.txt").read_text()


def test_encode_then_inspect(workspace, capsys):
    video = workspace / "data" / "video_00001.lvtv"
    code, _, err = run(["encode", "--codec", workspace / "codec.ckpt", "--video", video,
                        "--out", workspace / "z.lvtz"], capsys)
    assert code == 0, err
    grid, K = dio.read_latent(workspace / "z.lvtz")
    assert grid.shape == (4, 2, 2, 2) and K == 8
    code, _, err = run(["inspect-codes", "--latent", workspace / "z.lvtz", "--out", workspace / "inspect",
                        "--scale", 4], capsys)
    assert code == 0, err
    assert dio.read_ppm(workspace / "inspect" / "codes_1" / "codes_0003.ppm").shape == (8, 8, 3)
    masks = sorted((workspace / "inspect" / "changes_0").glob("*.ppm"))
    assert len(masks) == 3
    summary = json.loads((workspace / "inspect" / "summary.json").read_text())
    assert summary["K"] == 8 and len(summary["mass80_count"]) == 2


def test_generate_same_seed_same_file(workspace, capsys):
    outs = []
    for name, seed in (("a", 4), ("b", 4), ("c", 5)):
        code, _, err = run(["generate", "--codec", workspace / "codec.ckpt", "--lvt", workspace / "lvt.ckpt",
                            "--prime", workspace / "data" / "video_00000.lvtv", "--t0", 1, "--frames", 4,
                            "--seed", seed, "--out", workspace / f"{name}.lvtv"], capsys)
        assert code == 0, err
        outs.append((workspace / f"{name}.lvtv").read_bytes())
    assert outs[0] == outs[1] and outs[0] != outs[2]
    assert "lvt_digest" in json.loads((workspace / "a.lvtv.json").read_text())


def test_constant_dataset_codec_reaches_low_mse(tmp_path, capsys):
    (tmp_path / "gray.cfg").write_text(
        "data.kind = constant_gray\ndata.H = 16\ndata.W = 16\ndata.count = 4\n"
        "codec.K = 16\ncodec.D = 16\ncodec.H = 16\ncodec.W = 16\ncodec.hidden = 16\n"
        "codec.residual_hidden = 8\ncodec.residual_blocks = 1\ntrain.codec_batch = 2\ntrain.log_every = 500\n")
    assert run(["make-data", "--spec", tmp_path / "gray.cfg", "--out", tmp_path / "data"], capsys)[0] == 0
    code, _, err = run(["train-codec", "--config", tmp_path / "gray.cfg", "--out", tmp_path / "c.ckpt",
                        "--steps", 2000, "--data", tmp_path / "data"], capsys)
    assert code == 0, err
    code, _, err = run(["eval", "--codec", tmp_path / "c.ckpt", "--data", tmp_path / "data",
                        "--out", tmp_path / "rep"], capsys)
    assert code == 0, err
    assert json.loads((tmp_path / "rep.json").read_text())["mse"] < 1e-4


def _error_line(err):
    lines = err.strip().splitlines()
    assert lines[-1].startswith("lvt: error kind=")
    kind, _, reason = lines[-1][len("lvt: error kind="):].partition(" reason=")
    return kind, json.loads(reason)


def test_config_error_exit_2(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("codec.D = 9\ncodec.n_c = 2\n")
    code, _, err = run(["train-codec", "--config", tmp_path / "bad.cfg", "--out", tmp_path / "x"], capsys)
    assert code == 2
    kind, reason = _error_line(err)
    assert kind == "config" and "not divisible" in reason
    assert len(err.strip().splitlines()) == 1


def test_data_error_exit_3(workspace, tmp_path, capsys):
    (tmp_path / "junk.lvtv").write_bytes(b"LVTV\x01")
    code, _, err = run(["encode", "--codec", workspace / "codec.ckpt", "--video", tmp_path / "junk.lvtv",
                        "--out", tmp_path / "z.lvtz"], capsys)
    assert code == 3 and _error_line(err)[0] == "data"
    code, _, err = run(["eval", "--codec", workspace / "codec.ckpt", "--data", tmp_path, "--out", tmp_path / "r"],
                       capsys)
    assert code == 3 and "manifest" in _error_line(err)[1]


def test_numeric_error_exit_4(workspace, tmp_path, capsys):
    state = tr.lvt_from_checkpoint(dio.load_checkpoint(workspace / "lvt.ckpt"))
    with torch.no_grad():
        state.params["head.b2"].fill_(float("nan"))
    dio.save_checkpoint(tmp_path / "nan.ckpt", tr.lvt_checkpoint(state))
    code, _, err = run(["generate", "--codec", workspace / "codec.ckpt", "--lvt", tmp_path / "nan.ckpt",
                        "--prime", workspace / "data" / "video_00000.lvtv", "--t0", 1, "--frames", 4,
                        "--out", tmp_path / "g.lvtv"], capsys)
    assert code == 4 and _error_line(err)[0] == "numeric"


def test_unknown_flag_is_an_error(capsys):
    code, _, err = run(["eval", "--codec", "c", "--data", "d", "--out", "o", "--bogus"], capsys)
    assert code == 2 and "--bogus" in _error_line(err)[1]


@pytest.mark.parametrize("command", ["make-data", "train-codec", "train-lvt", "encode", "generate", "eval",
                                     "inspect-codes"])
def test_help_lists_every_flag(command):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command").choices[command]
    flags = [opt for action in sub._actions for opt in action.option_strings if opt.startswith("--")]
    text = subprocess.run([sys.executable, "-m", "lvt.cli", command, "--help"], capture_output=True, text=True,
                          check=True).stdout
    for flag in flags:
        assert flag in text


def test_model_config_carried_by_checkpoint(workspace):
    state = tr.lvt_from_checkpoint(dio.load_checkpoint(workspace / "lvt.ckpt"))
    assert isinstance(state.config, lt.TransformerConfig)
    assert state.config.extents == (4, 2, 2) and state.config.K == 8
