import json

import pytest

from smso import cli, gradcheck
from smso.gradcheck import Op

SMALL = {"k_classes": 2, "n_locations": 12, "c_channels": 4, "train_per_class": 20, "val_per_class": 10,
         "test_per_class": 10, "p": 3, "epochs": 3, "batch_size": 8}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_pipeline(tmp_path, config_file, capsys):
    data, run = tmp_path / "d", tmp_path / "run1"
    assert cli.main(["gen-data", "--config", str(config_file), "--out", str(data)]) == 0
    assert (data / "manifest.json").exists()
    assert cli.main(["train", "--config", str(config_file), "--data", str(data), "--out", str(run)]) == 0
    assert (run / "best.smck").exists() and (run / "last.smck").exists()
    rows = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert cli.main(["eval", "--config", str(config_file), "--data", str(data), "--ckpt", str(run / "best.smck"),
                     "--split", "test"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["n"] == 20 and 0.0 <= result["accuracy"] <= 1.0


def test_distcheck_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.jsonl"
        code = cli.main(["distcheck", "--seed", "5", "--n-samples", "300", "--out", str(out)])
        assert code in (0, 1)
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    rows = [json.loads(line) for line in outs[0].decode().splitlines()]
    assert {r["stage"] for r in rows} == {"x", "z", "z''"}


def test_histogram_csv(tmp_path):
    out = tmp_path / "h.csv"
    assert cli.main(["histogram", "--seed", "1", "--n-samples", "200", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "bin_left,bin_right,count,stage,dim"
    counts = {}
    for line in lines[1:]:
        left, right, count, stage, dim = line.split(",")
        assert float(left) < float(right)
        counts[(stage, dim)] = counts.get((stage, dim), 0) + int(count)
    assert set(counts.values()) == {200}


def test_gradcheck_single_op(tmp_path):
    out = tmp_path / "g.jsonl"
    assert cli.main(["gradcheck", "--op", "pv", "--instances", "3", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["op_name"] == "pv" and report["passed"]


def test_gradcheck_corrupted_exits_1(monkeypatch, tmp_path):
    real = gradcheck.default_registry

    def corrupted():
        reg = real()
        good = reg["covariance_pool"]
        reg["covariance_pool"] = Op(good.name, good.fwd, lambda d, g: {"X": 1.01 * good.bwd(d, g)["X"]},
                                    good.sample, good.wrt)
        return {"covariance_pool": reg["covariance_pool"], "pv": reg["pv"]}

    monkeypatch.setattr(gradcheck, "default_registry", corrupted)
    assert cli.main(["gradcheck", "--op", "all", "--instances", "3", "--out", str(tmp_path / "g.jsonl")]) == 1


def test_bench_csv(tmp_path):
    out = tmp_path / "b.csv"
    assert cli.main(["bench", "--n", "16,32", "--c", "8", "--p", "2", "--reps", "2", "--warmup", "0",
                     "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "path,n,c,p,wall_ns,flop_estimate,reps,max_rel_diff"
    assert len(lines) == 1 + 4


@pytest.mark.parametrize("argv", [["train"], ["bench", "--bogus", "1"], ["nosuch"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == 2


def test_missing_config_file(tmp_path, capsys):
    code = cli.main(["gen-data", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "d")])
    assert code == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "none.json" in err


def test_unknown_op(capsys):
    assert cli.main(["gradcheck", "--op", "nope"]) == 2


@pytest.mark.parametrize("command", ["gen-data", "train", "eval", "gradcheck", "distcheck", "bench", "histogram"])
def test_help_lists_flags_with_defaults(command, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    flags = [line.split()[0] for line in text.splitlines() if line.strip().startswith("--")]
    assert "--seed" in flags and "--threads" in flags
    assert text.count("(default:") == len(flags)


def test_seed_overrides_config(tmp_path, config_file):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["gen-data", "--config", str(config_file), "--out", str(a), "--seed", "3"])
    cli.main(["gen-data", "--config", str(config_file), "--out", str(b)])
    assert (a / "train_X.smst").read_bytes() != (b / "train_X.smst").read_bytes()
    assert json.loads((a / "manifest.json").read_text())["seed"] == 3
