import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from fastconv import cli, tensor
from fastconv.data import extract_slice
from fastconv.training import LrSchedule, lr_at

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, tmp_path, *argv):
    code = cli.main(["--run-dir", str(tmp_path / "runs"), *argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


def test_audit_tiny_conv3d_matches_golden(capsys, tmp_path):
    code, report = run(capsys, tmp_path, "audit", "--arch", "tiny", "--kind", "conv3d")
    assert code == 0
    assert report == json.loads((GOLDEN / "audit_tiny_conv3d.json").read_text())
    resolved = json.loads((tmp_path / "runs/audit/resolved_config.json").read_text())
    assert resolved["command"] == "audit" and resolved["kind"] == "conv3d"


def test_audit_resnet34_fast(capsys, tmp_path):
    code, report = run(capsys, tmp_path, "audit", "--arch", "resnet34", "--kind", "fast")
    assert code == 0
    assert abs(report["total_params"] - 43.48e6) <= 0.2 * 43.48e6
    ref = report["reference"]
    assert ref["param_order_ok"] and ref["depth_order_ok"] and ref["param_within_band"]
    assert ref["depth_delta"] == report["depth"] - 157


def test_audit_input_override(capsys, tmp_path):
    code, report = run(capsys, tmp_path, "audit", "--kind", "fast", "--input", "4,16,16", "--classes", "3")
    assert code == 0 and report["input_shape"] == [1, 3, 4, 16, 16] and report["num_classes"] == 3


@pytest.mark.parametrize("argv", [
    ["audit", "--kind", "bogus"],
    ["gradcheck", "--seed", "x"],
    ["audit", "--input", "1,2"],
    ["bench", "--shape", "1,2,3"],
])
def test_usage_errors_exit_2(capsys, tmp_path, argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--run-dir", str(tmp_path), *argv])
    assert exc.value.code == 2
    assert capsys.readouterr().err


def test_missing_config_exit_2(capsys, tmp_path):
    code = cli.main(["--run-dir", str(tmp_path), "train", "--config", str(tmp_path / "nope.json")])
    assert code == 2
    assert "cannot read config" in capsys.readouterr().err


def test_gradcheck_pass_and_sentinel(capsys, tmp_path):
    code, report = run(capsys, tmp_path, "gradcheck", "--kind", "fast,p3d_b", "--seed", "4")
    assert code == 0 and report["passed"]
    assert [r["kind"] for r in report["results"]] == ["fast", "p3d_b"]
    code, report = run(capsys, tmp_path, "gradcheck", "--kind", "fast", "--corrupt", "1.01")
    assert code == 1 and not report["passed"]


def small_train_config(tmp_path) -> Path:
    cfg = {
        "net": {"preset": "tiny", "kind": "fast"},
        "data": {"synthetic": {"frames": 4, "height": 16, "width": 16}, "train_per_class": 4,
                 "val_per_class": 2, "seed": 5},
        "epochs": 2,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_artifacts_deterministic(capsys, tmp_path):
    cfg = small_train_config(tmp_path)
    outs = []
    for i, threads in enumerate(("1", "1", "2")):
        out = tmp_path / f"run{i}"
        code, summary = run(capsys, tmp_path, "--threads", threads, "train", "--config", str(cfg),
                            "--out", str(out))
        assert code == 0 and summary["epochs"] == 2 and summary["lr_matches_schedule"]
        outs.append(out)
    for name in ("train.csv", "train.json", "resolved_config.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert (outs[0] / "train.csv").read_bytes() == (outs[2] / "train.csv").read_bytes()
    rows = list(csv.DictReader(io.StringIO((outs[0] / "train.csv").read_text())))
    resolved = json.loads((outs[0] / "resolved_config.json").read_text())
    sched = LrSchedule(**resolved["schedule"])
    assert [float(r["lr"]) for r in rows] == [lr_at(sched, e) for e in range(2)]
    assert (outs[0] / "weights" / "manifest.json").exists()


def test_train_flags_override_file(capsys, tmp_path):
    cfg = small_train_config(tmp_path)
    code, summary = run(capsys, tmp_path, "train", "--config", str(cfg), "--epochs", "1",
                        "--kind", "conv3d", "--lr-max", "0.01", "--out", str(tmp_path / "o"))
    assert code == 0 and summary["epochs"] == 1
    resolved = json.loads((tmp_path / "o" / "resolved_config.json").read_text())
    assert resolved["net"]["kind"] == "conv3d" and resolved["schedule"]["lr_max0"] == 0.01
    assert resolved["data"]["synthetic"]["frames"] == 4


def test_bench_report(capsys, tmp_path):
    code, report = run(capsys, tmp_path, "bench", "--kind", "fast,conv3d", "--shape", "1,64,2,4,4",
                       "--repeats", "3", "--oracle")
    assert code == 0
    assert [r["kind"] for r in report["kinds"]] == ["fast", "conv3d"]
    assert all("forward_us_stdev" in r and r["clips_per_s"] > 0 for r in report["kinds"])
    assert report["oracle_slower"]


def test_slices_cli(capsys, tmp_path):
    clip_path = tmp_path / "clip.t5b"
    code, _ = run(capsys, tmp_path, "gen", "--motion", "move_right", "--noise", "0", "--seed", "1",
                  "--frames", "10", "--out", str(clip_path))
    assert code == 0
    out = tmp_path / "slices"
    code, report = run(capsys, tmp_path, "slices", "--in", str(clip_path), "--out", str(out))
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["xt.pgm", "yt.pgm"]
    clip = tensor.load_t5b(clip_path)
    xt = extract_slice(clip, "xt", report["xt"]["row"])
    assert report["xt"]["shape"] == list(xt.shape) == [10, 32]
    assert abs(report["xt"]["argmax_slope"] - 2) <= 0.5
    assert (tmp_path / "runs/slices/resolved_config.json").exists()


def test_slices_bad_input(capsys, tmp_path):
    code = cli.main(["--run-dir", str(tmp_path), "slices", "--in", str(tmp_path / "none.t5b"),
                     "--out", str(tmp_path / "o")])
    assert code == 2


def test_gen_dataset(capsys, tmp_path):
    code, report = run(capsys, tmp_path, "gen", "--per-class", "1", "--size", "8,8", "--frames", "2",
                       "--out", str(tmp_path / "ds"))
    assert code == 0 and report["clips"] == 6


def test_threads_env(monkeypatch, capsys, tmp_path):
    monkeypatch.setenv("FASTCONV_THREADS", "oops")
    assert cli.main(["--run-dir", str(tmp_path), "audit"]) == 2
    monkeypatch.setenv("FASTCONV_THREADS", "1")
    code, report = run(capsys, tmp_path, "audit")
    assert code == 0 and report["kind"] == "fast"


def test_oracle_equality_independent_of_threads():
    from threadpoolctl import threadpool_limits

    from fastconv.conv import ConvSpec, conv3d_forward, init_weights

    spec = ConvSpec((3, 3, 3), 8, 8)
    wts = init_weights(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((2, 8, 4, 6, 6)).astype(np.float32)
    outs = []
    for n in (1, 2, 4):
        with threadpool_limits(n):
            outs.append(conv3d_forward(x, spec, wts).tobytes())
    assert len(set(outs)) == 1
