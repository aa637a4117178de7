import json

import numpy as np
import pytest

from holomamba.cli import RunConfig, main
from holomamba.tensor import precision

SMALL = {"d": 16, "d_state": 4, "n_layers": 1, "L": 12, "batch_size": 8, "epochs": 2,
         "synthetic_users": 24, "synthetic_cycle": 3, "bench_lengths": [8, 16], "bench_repeats": 2}


@pytest.fixture(autouse=True)
def single_precision():
    with precision(32):
        yield


def write_config(tmp_path, **overrides):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, **overrides}))
    return str(path)


def run(tmp_path, command, *extra, out="run", **overrides):
    return main([command, "--config", write_config(tmp_path, **overrides), "--out", str(tmp_path / out), *extra])


def test_full_pipeline(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(tmp_path, "ingest") == 0
    assert (out / "split.hmr").exists() and (out / "split.json").exists()
    assert run(tmp_path, "train") == 0
    metrics = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
    assert [m["epoch"] for m in metrics] == [1, 2]
    assert (out / "model.hmr").exists()
    capsys.readouterr()
    assert run(tmp_path, "eval") == 0
    record = json.loads(capsys.readouterr().out)
    assert set(record) == {"hr10", "ndcg10", "compressed", "users"} and record["users"] == 24
    assert run(tmp_path, "bench") == 0
    bench = [json.loads(x) for x in (out / "bench.jsonl").read_text().splitlines()]
    assert {(b["mode"], b["L"]) for b in bench} == {(m, L) for m in ("scan", "recurrent", "bundled") for L in (8, 16)}


def test_config_echo_is_fully_resolved(tmp_path):
    assert run(tmp_path, "ingest") == 0
    echoed = json.loads((tmp_path / "run" / "ingest_config.json").read_text())
    assert set(echoed) == set(RunConfig.__dataclass_fields__)
    assert echoed["n_layers"] == 1 and echoed["lr"] == 1e-3
    assert echoed["checkpoint"].endswith("model.hmr")


def test_flags_override_config_file(tmp_path):
    assert run(tmp_path, "ingest", "--seed", "7", "--layers", "3", "--use-binding", "false") == 0
    echoed = json.loads((tmp_path / "run" / "ingest_config.json").read_text())
    assert (echoed["seed"], echoed["n_layers"], echoed["use_binding"]) == (7, 3, False)


def test_ingest_is_byte_identical_on_rerun(tmp_path):
    assert run(tmp_path, "ingest", out="a") == 0
    assert run(tmp_path, "ingest", out="b") == 0
    for name in ("split.hmr", "split.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_metric_log_reproducible(tmp_path):
    logs = []
    for out in ("a", "b"):
        assert run(tmp_path, "ingest", out=out) == 0
        assert run(tmp_path, "train", out=out) == 0
        rows = [json.loads(x) for x in (tmp_path / out / "metrics.jsonl").read_text().splitlines()]
        logs.append([{k: v for k, v in r.items() if k != "seconds"} for r in rows])
        assert (tmp_path / out / "model.hmr").read_bytes() == (tmp_path / "a" / "model.hmr").read_bytes()
    assert logs[0] == logs[1]


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--epochs", "many"])
    assert exc.value.code == 1
    assert run(tmp_path, "ingest", bogus_key=3) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["ingest", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert main(["ingest", "--dataset", "movielens", "--out", str(tmp_path / "x")]) == 1
    assert run(tmp_path, "ingest", d=0) == 0  # ingest does not build a model
    assert run(tmp_path, "train", d=0) == 1


def test_data_errors_exit_2(tmp_path):
    assert run(tmp_path, "train", out="empty") == 2  # no cached split
    missing = str(tmp_path / "nope.dat")
    assert main(["ingest", "--dataset", "movielens", "--ratings-path", missing, "--movies-path", missing,
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["ingest", "--dataset", "amazon", "--amazon-path", missing, "--out", str(tmp_path / "x")]) == 2
    assert run(tmp_path, "ingest") == 0
    assert run(tmp_path, "eval") == 2  # no checkpoint yet


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_exits_3(tmp_path, capsys):
    assert run(tmp_path, "ingest") == 0
    assert run(tmp_path, "train", lr=1e30, epochs=3) == 3
    assert "training error" in capsys.readouterr().err


def test_vocab_mismatch_exits_1(tmp_path):
    assert run(tmp_path, "ingest", out="a") == 0
    assert run(tmp_path, "train", out="a", epochs=1) == 0
    assert run(tmp_path, "ingest", out="b", synthetic_users=30) == 0
    ckpt = str(tmp_path / "a" / "model.hmr")
    assert run(tmp_path, "eval", "--checkpoint", ckpt, out="b", synthetic_users=30) == 1


def test_compressed_eval_flag(tmp_path, capsys):
    assert run(tmp_path, "ingest") == 0
    assert run(tmp_path, "train", epochs=30) == 0
    capsys.readouterr()
    assert run(tmp_path, "eval") == 0
    plain = json.loads(capsys.readouterr().out)
    assert run(tmp_path, "eval", "--compressed") == 0
    squeezed = json.loads(capsys.readouterr().out)
    assert squeezed["compressed"] is True and plain["compressed"] is False
    assert plain["hr10"] > squeezed["hr10"]
    lines = (tmp_path / "run" / "eval.jsonl").read_text().splitlines()
    assert len(lines) == 2


def test_bench_reports_bundled_positions(tmp_path):
    assert run(tmp_path, "ingest") == 0
    assert run(tmp_path, "train", epochs=1) == 0
    assert run(tmp_path, "bench", bench_lengths=[512], bench_repeats=1) == 0
    recs = {r["mode"]: r for r in map(json.loads, (tmp_path / "run" / "bench.jsonl").read_text().splitlines())}
    assert recs["bundled"]["positions"] == 128
    assert recs["scan"]["positions"] == 512
    assert all(np.isfinite(r["latency_ms"]) for r in recs.values())
