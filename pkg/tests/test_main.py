import json

import pytest
from typer.testing import CliRunner

from causal_fuzz.errors import EXIT_LEAK, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE
from causal_fuzz.main import MODEL_URL_ENV, app

runner = CliRunner()


def invoke(*args, **kwargs):
    return runner.invoke(app, [str(a) for a in args], **kwargs)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "proxy.csv"
    assert invoke("gen-data", "--family", "proxy", "--n", 5000, "--seed", 0, "--out", data).exit_code == EXIT_OK
    model = root / "model.json"
    assert invoke("unlearn", "--data", data, "--target", "smoking", "--outcome", "risk", "--out", model).exit_code == EXIT_OK
    sem = root / "fitted.sem.json"
    result = invoke("fit-sem", "--graph", root / "proxy.graph.json", "--data", data, "--out", sem)
    assert result.exit_code == EXIT_OK, result.output
    return root


def fuzz_args(root, report, *extra):
    return (
        "fuzz",
        "--graph", root / "proxy.graph.json",
        "--sem", root / "fitted.sem.json",
        "--model", root / "model.json",
        "--data", root / "proxy.csv",
        "--target", "smoking",
        "--budget", 4000,
        "--report", report,
        *extra,
    )


def test_gen_data_writes_companions(workspace):
    for name in ("proxy.csv", "proxy.graph.json", "proxy.sem.json", "proxy.truth.csv"):
        assert (workspace / name).exists()
    assert "TOTAL" in (workspace / "proxy.truth.csv").read_text()


def test_fuzz_reports_leak(workspace):
    report = workspace / "leak.json"
    result = invoke(*fuzz_args(workspace, report))
    assert result.exit_code == EXIT_LEAK, result.output
    payload = json.loads(report.read_text())
    assert payload["overall"] == "leak"
    assert payload["header"]["budget_used"] <= 4000
    assert payload["header"]["target"] == "smoking"


def test_reruns_are_byte_identical(workspace):
    first = workspace / "first.json"
    second = workspace / "second.json"
    invoke(*fuzz_args(workspace, first, "--seed", 7))
    invoke(*fuzz_args(workspace, second, "--seed", 7))
    assert first.read_bytes() == second.read_bytes()

    result = invoke("diff", "--old", first, "--new", second)
    assert result.exit_code == EXIT_OK
    assert "no differences" in result.output


def test_text_report_on_stdout(workspace):
    args = [a for a in fuzz_args(workspace, "unused") if a not in ("--report", "unused")]
    result = invoke(*args, "--format", "text")
    assert result.exit_code == EXIT_LEAK
    assert "overall: LEAK" in result.output


def test_model_from_environment(workspace):
    args = list(fuzz_args(workspace, workspace / "env.json"))
    at = args.index("--model")
    del args[at : at + 2]
    result = invoke(*args, env={MODEL_URL_ENV: str(workspace / "model.json")})
    assert result.exit_code == EXIT_LEAK, result.output


def test_no_path_graph_exits_ok(workspace):
    graph = json.loads((workspace / "proxy.graph.json").read_text())
    graph["edges"] = [["bp", "risk"], ["bmi", "risk"]]
    cut = workspace / "cut.graph.json"
    cut.write_text(json.dumps(graph))
    sem = workspace / "cut.sem.json"
    assert invoke("fit-sem", "--graph", cut, "--data", workspace / "proxy.csv", "--out", sem).exit_code == EXIT_OK
    report = workspace / "cut.json"
    result = invoke(
        "fuzz", "--graph", cut, "--sem", sem, "--model", workspace / "model.json",
        "--data", workspace / "proxy.csv", "--target", "smoking", "--report", report,
    )
    assert result.exit_code == EXIT_OK, result.output
    payload = json.loads(report.read_text())
    assert payload["header"]["status"] == "no-path"
    assert payload["entries"] == []


def test_cyclic_graph_is_a_usage_error(workspace):
    graph = json.loads((workspace / "proxy.graph.json").read_text())
    graph["edges"] += [["bp", "bmi"], ["bmi", "bp"]]
    bad = workspace / "cycle.graph.json"
    bad.write_text(json.dumps(graph))
    result = invoke("fit-sem", "--graph", bad, "--data", workspace / "proxy.csv", "--out", workspace / "x.json")
    assert result.exit_code == EXIT_USAGE
    assert "cycle detected" in result.output


def test_missing_flag_is_a_usage_error(workspace):
    result = invoke("fuzz", "--graph", workspace / "proxy.graph.json")
    assert result.exit_code == EXIT_USAGE


def test_bad_subgroup_is_a_usage_error(workspace):
    result = invoke(*fuzz_args(workspace, workspace / "bad.json", "--subgroup", "age~3"))
    assert result.exit_code == EXIT_USAGE
    assert "bad subgroup predicate" in result.output


def test_budget_below_minimum_is_a_usage_error(workspace):
    args = list(fuzz_args(workspace, workspace / "tiny.json"))
    args[args.index("--budget") + 1] = 50
    result = invoke(*args)
    assert result.exit_code == EXIT_USAGE
    assert "below the minimum" in result.output


def test_fit_failure_is_a_runtime_error(tmp_path):
    data = tmp_path / "tiny.csv"
    assert invoke("gen-data", "--family", "proxy", "--n", 15, "--out", data).exit_code == EXIT_OK
    result = invoke("fit-sem", "--graph", tmp_path / "tiny.graph.json", "--data", data, "--out", tmp_path / "s.json")
    assert result.exit_code == EXIT_RUNTIME
    assert "coefficients" in result.output


def test_undecodable_graph_is_a_usage_error(workspace, tmp_path):
    bad = tmp_path / "latin1.graph.json"
    bad.write_bytes((workspace / "proxy.graph.json").read_bytes().replace(b'"bp"', b'"b\xff"'))
    result = invoke("fit-sem", "--graph", bad, "--data", workspace / "proxy.csv", "--out", tmp_path / "s.json")
    assert result.exit_code == EXIT_USAGE
    assert "not valid UTF-8" in result.output


def test_undecodable_csv_is_a_usage_error(tmp_path):
    data = tmp_path / "bad.csv"
    data.write_bytes(b"a,y\n1,0\n\xff,1\n")
    result = invoke("train", "--data", data, "--outcome", "y", "--out", tmp_path / "m.json")
    assert result.exit_code == EXIT_USAGE
    assert "not valid UTF-8" in result.output


@pytest.mark.parametrize("command", ["fuzz", "baselines"])
def test_unexpected_failure_is_never_a_leak(workspace, monkeypatch, command):
    def broken(path):
        raise ZeroDivisionError("division by zero")

    monkeypatch.setattr("causal_fuzz.main.load_model", broken)
    if command == "fuzz":
        args = fuzz_args(workspace, workspace / "broken.json")
    else:
        args = ("baselines", "--model", workspace / "model.json", "--data", workspace / "proxy.csv", "--target", "smoking")
    result = invoke(*args)
    assert result.exit_code == EXIT_RUNTIME
    assert "unexpected ZeroDivisionError" in result.output


def test_train_and_baselines(workspace):
    model = workspace / "full.json"
    assert invoke("train", "--data", workspace / "proxy.csv", "--outcome", "risk", "--out", model).exit_code == EXIT_OK
    assert json.loads(model.read_text())["schema"] == ["smoking", "bp", "bmi"]
    result = invoke(
        "baselines", "--model", model, "--data", workspace / "proxy.csv", "--target", "smoking", "--outcome", "risk"
    )
    assert result.exit_code == EXIT_OK, result.output
    summary = json.loads(result.stdout)
    assert summary["shapley"]["structural_zero"] is False
    assert summary["permutation_importance"]["feature"] == "smoking"


def test_diff_detects_new_leak(workspace, tmp_path):
    leak = workspace / "leak-base.json"
    invoke(*fuzz_args(workspace, leak))
    payload = json.loads(leak.read_text())
    for entry in payload["entries"]:
        if entry["verdict"] == "leak":
            entry["verdict"] = "pass"
    payload["overall"] = "pass"
    clean = tmp_path / "clean.json"
    clean.write_text(json.dumps(payload))
    result = invoke("diff", "--old", clean, "--new", leak)
    assert result.exit_code == EXIT_LEAK
    assert "new leaks:" in result.output
