import json
import time
from pathlib import Path

import numpy as np
import pytest

from stdet.cli import FrameAnalysisRecord, analyze_frames, main, parse_range
from stdet.data import ingest
from stdet.detector import ModelConfig, build_model, save_checkpoint
from stdet.geometry import PixelBox

SYNTH_YAML = "synth:\n  n_videos: 3\n  frames: 24\n  size: 64\n"
TRAIN_YAML = """model:
  width: 8
  image_size: 64
train:
  epochs: 1
  steps_per_epoch: 4
  batch_size: 2
"""


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.yaml").write_text(SYNTH_YAML)
    (root / "train.yaml").write_text(TRAIN_YAML)
    assert main(["synth", "--config", str(root / "synth.yaml"), "--out", str(root / "data"), "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "run_base"
    t0 = time.perf_counter()
    assert main(["train", "--config", str(workspace / "train.yaml"), "--data", str(workspace / "data"),
                 "--out", str(out), "--seed", "0"]) == 0
    return out, time.perf_counter() - t0


def test_synth_output_ingests(workspace, capsys):
    videos = ingest(workspace / "data")
    assert len(videos) == 3 and all(len(v) == 24 for v in videos)
    assert (workspace / "data" / "synth_config.yaml").exists()


def test_synth_is_byte_identical(workspace, tmp_path, capsys):
    assert main(["synth", "--config", str(workspace / "synth.yaml"), "--out", str(tmp_path / "again"), "--seed", "3"]) == 0
    assert "wrote 3 videos, 72 frames" in capsys.readouterr().out
    assert _tree(tmp_path / "again") == _tree(workspace / "data")


def test_synth_short_video_warns(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("synth:\n  n_videos: 1\n  frames: 2\n  size: 32\n")
    assert main(["synth", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "d")]) == 0
    assert "warning" in capsys.readouterr().err
    assert len(ingest(tmp_path / "d")[0]) == 2


def test_synth_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub")]) != 0


def test_config_error_points_at_line_and_writes_nothing(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("synth:\n  n_videos: 2\n  colour: red\n")
    out = tmp_path / "never"
    assert main(["synth", "--config", str(tmp_path / "bad.yaml"), "--out", str(out)]) == 1
    assert "bad.yaml:3" in capsys.readouterr().err
    assert not out.exists()


def test_train_smoke(trained):
    out, seconds = trained
    assert seconds < 60
    for name in ("best.ckpt", "last.ckpt", "metrics.csv", "config.yaml", "split.json"):
        assert (out / name).exists()
    assert (out / "metrics.csv").read_text().splitlines()[0] == "epoch,box,obj,cls,val_P,val_R,val_mAP50,val_mAP50_95"


def test_train_is_byte_identical(workspace, trained):
    out = workspace / "run_base_again"
    assert main(["train", "--config", str(workspace / "train.yaml"), "--data", str(workspace / "data"),
                 "--out", str(out), "--seed", "0"]) == 0
    assert _tree(out) == _tree(trained[0])


def test_train_warm_start_reports_count(workspace, trained, capsys):
    out = workspace / "run_temporal"
    code = main(["train", "--config", str(workspace / "train.yaml"), "--data", str(workspace / "data"), "--out", str(out),
                 "--variant", "temporal", "--init", str(trained[0] / "best.ckpt")])
    assert code == 0
    n_base = len(json.loads(__import__("zipfile").ZipFile(trained[0] / "best.ckpt").read("header.json"))["tensors"])
    assert f"transferred {n_base} of " in capsys.readouterr().out


def test_train_usage_errors(workspace, tmp_path, capsys):
    args = ["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "x")]
    assert main(args + ["--variant", "resnet"]) == 1
    assert "unknown variant" in capsys.readouterr().err
    (tmp_path / "t.yaml").write_text("train:\n  epochs: 0\n")
    assert main(args + ["--config", str(tmp_path / "t.yaml")]) == 1
    assert "t.yaml:2" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()
    (tmp_path / "m.yaml").write_text("model:\n  num_classes: 5\n")
    assert main(args + ["--config", str(tmp_path / "m.yaml")]) == 2


def test_eval_outputs_and_determinism(workspace, trained, capsys):
    outs = []
    for k in range(2):
        out = workspace / f"eval{k}"
        assert main(["eval", "--checkpoint", str(trained[0] / "best.ckpt"), "--data", str(workspace / "data"),
                     "--out", str(out), "--split", "test"]) == 0
        outs.append(out)
    assert _tree(outs[0]) == _tree(outs[1])
    lines = (outs[0] / "metrics.csv").read_text().splitlines()
    assert lines[0] == "Class,Instances,P,R,mAP50,mAP50-95"
    assert lines[1].startswith("all,")
    last = capsys.readouterr().out.strip().splitlines()[-1].split()
    assert len(last) == 4 and all(0 <= float(x) <= 1 for x in last)


def test_eval_errors(workspace, trained, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "e")]) == 2
    m = build_model(ModelConfig(width=4, image_size=64, num_classes=7), 0)
    save_checkpoint(tmp_path / "seven.ckpt", m)
    assert main(["eval", "--checkpoint", str(tmp_path / "seven.ckpt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "e")]) == 2
    assert not (tmp_path / "e").exists()


def test_eval_empty_split(tmp_path, trained):
    (tmp_path / "c.yaml").write_text("synth:\n  n_videos: 1\n  frames: 4\n  size: 64\n")
    assert main(["synth", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "one")]) == 0
    assert main(["eval", "--checkpoint", str(trained[0] / "best.ckpt"), "--data", str(tmp_path / "one"),
                 "--out", str(tmp_path / "e")]) == 2


@pytest.mark.parametrize("seed", range(5))
def test_random_weights_score_near_zero(workspace, tmp_path, seed):
    m = build_model(ModelConfig(width=8, image_size=64, num_classes=3), seed)
    save_checkpoint(tmp_path / "r.ckpt", m)
    assert main(["eval", "--checkpoint", str(tmp_path / "r.ckpt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "e"), "--split", "val"]) == 0
    rows = (tmp_path / "e" / "metrics.csv").read_text().splitlines()
    assert float(rows[1].split(",")[4]) < 0.1


def test_analyze_range_and_determinism(workspace, trained):
    outs = []
    for k in range(2):
        out = workspace / f"an{k}"
        assert main(["analyze", "--checkpoint", str(trained[0] / "best.ckpt"), "--data", str(workspace / "data"),
                     "--video", "video_000", "--frames", "21-23", "--out", str(out), "--conf", "0.01"]) == 0
        outs.append(out)
    assert _tree(outs[0]) == _tree(outs[1])
    payload = json.loads((outs[0] / "records.json").read_text())
    assert [r["frame_index"] for r in payload["records"]] == [21, 22, 23]
    assert len(list((outs[0] / "frames").glob("*.png"))) == 3
    assert (outs[0] / "confidence.csv").read_text().splitlines()[0] == "frame_index,top_confidence,n_detections"
    for r in payload["records"]:
        assert FrameAnalysisRecord.from_dict(r).to_dict() == r


def test_analyze_errors(workspace, trained, tmp_path):
    base = ["analyze", "--checkpoint", str(trained[0] / "best.ckpt"), "--data", str(workspace / "data"), "--out",
            str(tmp_path / "a")]
    assert main(base + ["--video", "video_000", "--frames", "20-24"]) == 2
    assert main(base + ["--video", "nope", "--frames", "1-2"]) == 2
    assert main(base + ["--video", "video_000", "--frames", "5"]) == 1
    assert not (tmp_path / "a").exists()


def test_parse_range():
    assert parse_range("21-23") == (21, 23)
    assert parse_range("4-4") == (4, 4)


def test_all_negative_objectness_gives_empty_records(workspace):
    cfg = ModelConfig(variant="temporal", width=4, image_size=64, num_classes=3)
    m = build_model(cfg, 0)
    for s in ("p3", "p4", "p5"):
        m.params[f"head.{s}.w"].data[...] = 0
        m.params[f"head.{s}.b"].data.reshape(3, -1)[:, 4] = -50
    video = ingest(workspace / "data")[0]
    records = analyze_frames(m, video, 0, 2, ["a", "b", "c"], conf_thr=0.001)
    assert [r.frame_index for r in records] == [0, 1, 2]
    assert all(r.detections == [] and r.top_confidence is None for r in records)
    assert "top_confidence" not in records[0].to_dict()


def test_record_round_trip():
    r = FrameAnalysisRecord(3, [("fish", 0.5, PixelBox(1.0, 2.0, 3.0, 4.0, 0, 0.5))], 0.5)
    d = json.loads(json.dumps(r.to_dict()))
    assert FrameAnalysisRecord.from_dict(d).to_dict() == d


def test_usage_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 1
