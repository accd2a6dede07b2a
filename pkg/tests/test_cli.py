import re
import subprocess
import sys

import pytest

from mobileutr.cli import main, parse_overrides
from mobileutr.errors import UsageError


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_complexity_in_band(capsys):
    code, out, _ = run(capsys, "complexity", "--config", "mobileutr", "--summary")
    assert code == 0
    params = int(re.search(r"total_params = (\d+)", out).group(1))
    assert 1.18e6 <= params <= 1.60e6


def test_complexity_ablation_and_multiple_configs(capsys):
    code, out, _ = run(capsys, "complexity", "--ablation", "--config", "tiny", "--config", "mobileutr")
    assert code == 0
    assert out.count("adaptive_lgl skip3") == 2


def test_complexity_strict_doubles(capsys):
    _, loose, _ = run(capsys, "complexity", "--summary")
    _, strict, _ = run(capsys, "complexity", "--summary", "--strict")
    macs = int(re.search(r"total_macs = (\d+)", loose).group(1))
    flops = int(re.search(r"total_flops = (\d+)", strict).group(1))
    assert flops == 2 * macs


def test_gradcheck_blocks(capsys):
    code, out, _ = run(capsys, "gradcheck", "--config", "tiny", "--seeds", "1", "--skip-end-to-end")
    assert code == 0
    errs = dict(re.findall(r"^(\w+)\s+max_rel_error = (\S+)", out, re.M))
    assert {"convutr", "lgl", "transformer", "decoder_stage", "skip_fusion", "loss"} <= set(errs)
    assert all(float(v) < 1e-5 for v in errs.values())


def test_train_missing_data_names_path(capsys, tmp_path):
    missing = tmp_path / "no_such_dataset"
    code, _, err = run(capsys, "train", "--data", str(missing), "--out", str(tmp_path / "o"))
    assert code == 1
    assert str(missing) in err


@pytest.mark.parametrize("argv", [
    ["complexity", "--set", "skips=9"],
    ["complexity", "--set", "nonsense"],
    ["complexity", "--config", "missing-preset"],
    ["frobnicate"],
    [],
])
def test_usage_errors_exit_1(capsys, argv):
    assert run(capsys, *argv)[0] == 1


def test_parse_error_exits_2(capsys, tmp_path):
    ds = tmp_path / "ds"
    assert run(capsys, "synth", "--out", str(ds), "--count", "3", "--size", "32", "--diameter", "12")[0] == 0
    (ds / "images" / "synth00000.ppm").write_bytes(b"P7\n")
    code, _, err = run(capsys, "train", "--config", "tiny", "--data", str(ds), "--out", str(tmp_path / "o"),
                       "--size", "32", "--epochs", "1")
    assert code == 2 and "byte offset" in err


def test_synth_train_eval_deterministic(capsys, tmp_path):
    ds = tmp_path / "ds"
    assert run(capsys, "synth", "--out", str(ds), "--count", "6", "--size", "32", "--diameter", "12",
               "--seed", "2")[0] == 0
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, _, _ = run(capsys, "train", "--config", "tiny", "--data", str(ds), "--out", str(out),
                         "--epochs", "1", "--batch", "2", "--size", "32", "--set", "skips=2", "--seed", "1")
        assert code == 0
        outs.append(out)
    for f in sorted(p for p in outs[0].rglob("*") if p.is_file()):
        assert f.read_bytes() == (outs[1] / f.relative_to(outs[0])).read_bytes()
    code, text, _ = run(capsys, "eval", "--data", str(ds), "--checkpoint", str(outs[0] / "checkpoint"),
                        "--size", "32", "--seed", "1")
    assert code == 0
    assert "mean_iou = " in text and "class1_hd95 = " in text


def test_parse_overrides():
    assert parse_overrides(["skips=2", "channels=[1,2,3,4,5]", "bottleneck=lgl"]) == {
        "skips": 2, "channels": [1, 2, 3, 4, 5], "bottleneck": "lgl"}
    with pytest.raises(UsageError):
        parse_overrides(["=3"])


def test_console_script_entry():
    proc = subprocess.run([sys.executable, "-m", "mobileutr.cli", "complexity", "--summary"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "GFLOPs = 2.8557" in proc.stdout
