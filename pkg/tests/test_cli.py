import orjson
import pytest

from cli import ConfigError, main, parse_override
from dataset import load_sample, load_video, read_manifest
from keyframe import select_key_frame
from utils import dump_json, load_json

PHANTOMS = {
    "num_samples": 4,
    "frame_count": 16,
    "height": 32,
    "width": 32,
    "tumors_per_sample_range": [1, 2],
    "tumor_radius_range": [3.0, 5.0],
    "train_fraction": 0.5,
}
TRAINING = {
    "epochs": 1,
    "tdl_warmup_epochs": 0,
    "batch_size": 4,
    "base_width": 4,
    "depth": 2,
    "val_fraction": 0.0,
}


def _last_json(text):
    lines = [line for line in text.splitlines() if line.startswith("{")]
    assert lines, text
    return orjson.loads(lines[-1])


def _error(text):
    lines = [line for line in text.splitlines() if line.startswith('{"error"')]
    assert lines, text
    return orjson.loads(lines[-1])


@pytest.fixture
def phantom_config(tmp_path):
    path = tmp_path / "phantoms.json"
    dump_json(PHANTOMS, path)
    return path


@pytest.fixture
def generated(tmp_path, phantom_config):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(phantom_config), "--out", str(out)]) == 0
    return out


def test_parse_override():
    assert parse_override("epochs=3") == ("epochs", 3)
    assert parse_override("lambda0=0.5") == ("lambda0", 0.5)
    assert parse_override("device=cpu") == ("device", "cpu")
    assert parse_override("tumors_per_sample_range=[1,3]") == ("tumors_per_sample_range", [1, 3])
    with pytest.raises(ConfigError):
        parse_override("epochs")


def test_gen_data(generated, capsys):
    manifest = load_json(generated / "manifest.json")
    assert len(manifest["samples"]) == 4
    assert (generated / "config.json").exists()
    assert (generated / "run.log").exists()
    assert (generated / "sample_0000" / "frame_015.png").exists()


def test_gen_data_refuses_to_overwrite(generated, phantom_config, capsys):
    before = (generated / "manifest.json").read_bytes()
    capsys.readouterr()
    assert main(["gen-data", "--config", str(phantom_config), "--out", str(generated)]) == 1
    assert _error(capsys.readouterr().err)["error"] == "FileExistsError"
    assert (generated / "manifest.json").read_bytes() == before
    args = ["gen-data", "--config", str(phantom_config), "--out", str(generated), "--overwrite"]
    assert main(args) == 0
    assert (generated / "manifest.json").read_bytes() == before


def test_gen_data_overwrite_replaces_longer_run(tmp_path, phantom_config):
    out = tmp_path / "data"
    longer = ["--override", "frame_count=20", "--override", "num_samples=5"]
    assert main(["gen-data", "--config", str(phantom_config), "--out", str(out)] + longer) == 0
    assert (out / "sample_0004").exists()

    assert main(["gen-data", "--config", str(phantom_config), "--out", str(out), "--overwrite"]) == 0
    manifest = read_manifest(out)
    assert manifest.config["frame_count"] == 16
    for entry in manifest.samples:
        assert load_sample(manifest, entry.id).video.frame_count == 16
    assert not (out / "sample_0000" / "frame_019.png").exists()
    assert sorted(p.name for p in out.glob("sample_*")) == [e.id for e in manifest.samples]


def test_select_keyframe(generated, capsys):
    video_dir = generated / "sample_0001"
    capsys.readouterr()
    assert main(["select-keyframe", "--video", str(video_dir)]) == 0
    output = _last_json(capsys.readouterr().out)
    assert output["key_frame_index"] == select_key_frame(load_video(video_dir)).index
    assert len(output["scores"]) == 13


def test_extract_motion(generated, tmp_path):
    out = tmp_path / "maps"
    args = ["extract-motion", "--video", str(generated / "sample_0000"), "--kind", "frame_difference", "--frame", "12", "--out", str(out)]
    assert main(args) == 0
    assert (out / "frame_difference_frame_012.png").exists()


def test_unknown_flag(tmp_path, capsys):
    out = tmp_path / "never"
    assert main(["gen-data", "--out", str(out), "--frobnicate"]) == 2
    assert _error(capsys.readouterr().err)["error"] == "config_error"
    assert not out.exists()


def test_unknown_command(capsys):
    assert main(["paint"]) == 2
    assert main([]) == 2


@pytest.mark.parametrize(
    "override",
    ["bogus_key=3", "frame_count=abc", "frame_count=10", "tumors_per_sample_range=7"],
)
def test_invalid_config_values(tmp_path, capsys, override):
    out = tmp_path / "never"
    assert main(["gen-data", "--out", str(out), "--override", override]) == 2
    assert _error(capsys.readouterr().err)["error"] == "config_error"
    assert not out.exists()


def test_unknown_variant(generated, tmp_path, capsys):
    args = ["train", "--data", str(generated), "--out", str(tmp_path / "run"), "--override", "variant=kf+sparkle"]
    assert main(args) == 2
    assert _error(capsys.readouterr().err)["error"] == "config_error"


def test_missing_checkpoint(generated, tmp_path, capsys):
    args = ["evaluate", "--data", str(generated), "--checkpoint", str(tmp_path / "absent.pt"), "--out", str(tmp_path / "eval")]
    assert main(args) == 1
    assert _error(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_train_then_evaluate(generated, tmp_path, capsys):
    config = tmp_path / "train.json"
    dump_json(TRAINING, config)
    run = tmp_path / "run"
    assert main(["train", "--data", str(generated), "--config", str(config), "--out", str(run), "--seed", "3"]) == 0
    assert (run / "best.pt").exists()
    assert load_json(run / "config.json")["seed"] == 3

    evaluation = tmp_path / "eval"
    args = ["evaluate", "--data", str(generated), "--checkpoint", str(run / "best.pt"), "--out", str(evaluation)]
    capsys.readouterr()
    assert main(args) == 0
    assert _last_json(capsys.readouterr().out)["samples"] == 2
    report = load_json(evaluation / "evaluation.json")
    assert len(report["per_sample"]) == 2
