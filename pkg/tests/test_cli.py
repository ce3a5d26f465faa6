import json
import logging
import sys

import pytest

import cli
import config
import constants
from checkpoint_store import load, save
from evaluation import sample_indices
from tests.conftest import make_checkpoint, write_jsonl

STUB_REPORT = {
    "results": [{
        "dataset": "hate_set",
        "segment": "hate",
        "labels": ["hate", "offensive", "normal"],
        "confusion_matrix": [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        "accuracy": 1.0,
        "macro_f1": 1.0,
        "samples": 3,
    }],
}


@pytest.fixture(autouse=True)
def restore_logging():
    # cli.main reconfigures the root logger
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def guard_files(tmp_path, guard):
    save(guard.base, tmp_path / "base.hm3")
    save(guard.jailbreak, tmp_path / "jailbreak.hm3")
    save(guard.hate, tmp_path / "hate.hm3")
    write_jsonl(tmp_path / "jailbreak_set.jsonl", guard.jailbreak_set.examples)
    write_jsonl(tmp_path / "hate_set.jsonl", guard.hate_set.examples)
    return tmp_path


def _recipe(path, **values):
    path.write_text(json.dumps(values))
    return str(path)


def test_expand(guard_files):
    out = guard_files / "expanded"
    code = cli.main(["expand", "--model", str(guard_files / "jailbreak.hm3"), "--model", str(guard_files / "hate.hm3"),
                     "--base", str(guard_files / "base.hm3"), "--out", str(out)])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "base.expanded.hm3", "hate.expanded.hm3", "jailbreak.expanded.hm3", "layout.json"]
    layout = json.loads((out / "layout.json").read_text())
    assert layout["total_width"] == 5
    assert [s["model_id"] for s in layout["segments"]] == ["jailbreak", "hate"]
    assert load(out / "hate.expanded.hm3").arch.head_out_dim == 5


def test_expand_incompatible_models(tmp_path, rng, capsys):
    save(make_checkpoint(rng, ["a", "b"], embed_dim=6), tmp_path / "one.hm3")
    save(make_checkpoint(rng, ["c", "d"], embed_dim=4), tmp_path / "two.hm3")
    code = cli.main(["expand", "--model", str(tmp_path / "one.hm3"), "--model", str(tmp_path / "two.hm3"),
                     "--out", str(tmp_path / "out")])
    assert code == 3
    assert "embed_dim" in capsys.readouterr().err


def test_merge_without_base_needs_base(guard_files, capsys):
    code = cli.main(["merge", "--model", str(guard_files / "hate.hm3"),
                     "--recipe", _recipe(guard_files / "r.json", strategy="ties"), "--out", str(guard_files / "m")])
    assert code == 2
    assert "base required for task vectors" in capsys.readouterr().err


def test_merge_soup_of_duplicated_model(guard_files):
    hate = str(guard_files / "hate.hm3")
    code = cli.main(["merge", "--model", hate, "--model", hate,
                     "--recipe", _recipe(guard_files / "r.json", strategy="soup"), "--out", str(guard_files / "m")])
    assert code == 0
    merged = load(guard_files / "m" / "merged.hm3")
    original = load(hate)
    for name in (constants.EMBED_WEIGHT, constants.DENSE_WEIGHT, constants.DENSE_BIAS):
        assert merged.tensors[name].tobytes() == original.tensors[name].tobytes()
    assert merged.recipe["strategy"] == "soup"
    assert [s["model_id"] for s in merged.layout] == ["hate", "hate_2"]


def test_merge_dare_ties_density_one_single_model(guard_files, capsys):
    recipe = _recipe(guard_files / "r.json", strategy="dare_ties", density=1.0, seed=4)
    code = cli.main(["merge", "--model", str(guard_files / "hate.hm3"), "--base", str(guard_files / "base.hm3"),
                     "--recipe", recipe, "--out", str(guard_files / "m")])
    assert code == 0
    merged = load(guard_files / "m" / "merged.hm3")
    original = load(guard_files / "hate.hm3")
    for name in constants.REQUIRED_TENSORS:
        assert merged.tensors[name].tobytes() == original.tensors[name].tobytes()
    assert json.loads(capsys.readouterr().out)["density"] == 1.0


def test_merge_does_not_touch_inputs(guard_files):
    before = (guard_files / "hate.hm3").read_bytes()
    cli.main(["merge", "--model", str(guard_files / "hate.hm3"), "--model", str(guard_files / "jailbreak.hm3"),
              "--base", str(guard_files / "base.hm3"), "--out", str(guard_files / "m")])
    assert (guard_files / "hate.hm3").read_bytes() == before


def test_search_smoke(guard_files):
    search_config = guard_files / "search.json"
    search_config.write_text(json.dumps({"trials": 5, "val_samples": 40, "test_samples": 60}))
    out = guard_files / "search"
    code = cli.main(["search", "--model", str(guard_files / "jailbreak.hm3"), "--model", str(guard_files / "hate.hm3"),
                     "--base", str(guard_files / "base.hm3"),
                     "--dataset", str(guard_files / "jailbreak_set.jsonl"),
                     "--dataset", str(guard_files / "hate_set.jsonl"),
                     "--search-config", str(search_config), "--seed", "3", "--out", str(out)])
    assert code == 0
    assert len((out / "trials.jsonl").read_text().splitlines()) == 5
    for name in ("scatter.csv", "best_recipe.json", "summary.json", "layout.json", "best.hm3"):
        assert (out / name).exists()
    assert json.loads((out / "summary.json").read_text())["config"]["base_seed"] == 3


def test_self_merge_requires_one_model(guard_files):
    code = cli.main(["self-merge", "--model", str(guard_files / "jailbreak.hm3"),
                     "--model", str(guard_files / "hate.hm3"), "--base", str(guard_files / "base.hm3"),
                     "--dataset", str(guard_files / "hate_set.jsonl"), "--out", str(guard_files / "s")])
    assert code == 2


def test_eval_builtin_with_plan(guard_files, capsys):
    cli.main(["merge", "--model", str(guard_files / "jailbreak.hm3"), "--model", str(guard_files / "hate.hm3"),
              "--base", str(guard_files / "base.hm3"), "--out", str(guard_files / "m")])
    plan = guard_files / "plan.json"
    plan.write_text(json.dumps([{"dataset": "hate_set", "segment": "jailbreak", "expected_label": "benign"}]))
    capsys.readouterr()

    out = guard_files / "eval"
    code = cli.main(["eval", "--model", str(guard_files / "m" / "merged.hm3"),
                     "--dataset", str(guard_files / "jailbreak_set.jsonl"),
                     "--dataset", f"{guard_files / 'hate_set.jsonl'}@hate",
                     "--plan", str(plan), "--sample-cap", "100", "--out", str(out)])
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["confusion_hate_set_hate.csv", "confusion_hate_set_jailbreak.csv",
                     "confusion_jailbreak_set_jailbreak.csv", "report.json", "scores.csv"]
    summary = json.loads(capsys.readouterr().out)
    assert summary["per_segment_mean_macro_f1"]["hate"] == 1.0


def test_eval_external_report_passthrough(guard_files):
    stub = guard_files / "stub.py"
    stub.write_text(f"import json\nprint(json.dumps({STUB_REPORT!r}))\n")
    out = guard_files / "eval"
    code = cli.main(["eval", "--model", str(guard_files / "hate.hm3"),
                     "--dataset", str(guard_files / "hate_set.jsonl"),
                     "--evaluator", "external", "--evaluator-cmd", f"{sys.executable} {stub}", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["results"] == STUB_REPORT["results"]


def test_eval_external_failure_is_runtime_error(guard_files, capsys):
    stub = guard_files / "fail.py"
    stub.write_text("import sys\nsys.stderr.write('no gpu')\nsys.exit(5)\n")
    code = cli.main(["eval", "--model", str(guard_files / "hate.hm3"),
                     "--dataset", str(guard_files / "hate_set.jsonl"),
                     "--evaluator", "external", "--evaluator-cmd", f"{sys.executable} {stub}",
                     "--out", str(guard_files / "eval")])
    assert code == 4
    assert "external evaluator failed (exit code 5)" in capsys.readouterr().err


def test_external_evaluator_needs_command(guard_files):
    code = cli.main(["eval", "--model", str(guard_files / "hate.hm3"),
                     "--dataset", str(guard_files / "hate_set.jsonl"),
                     "--evaluator", "external", "--out", str(guard_files / "eval")])
    assert code == 2


def test_eval_bad_dataset_is_validation_error(guard_files):
    bad = guard_files / "bad.jsonl"
    bad.write_text('{"text": "x"}\n')
    code = cli.main(["eval", "--model", str(guard_files / "hate.hm3"), "--dataset", str(bad),
                     "--out", str(guard_files / "eval")])
    assert code == 3


def test_compare_runtime(guard_files, capsys):
    cli.main(["merge", "--model", str(guard_files / "jailbreak.hm3"), "--model", str(guard_files / "hate.hm3"),
              "--base", str(guard_files / "base.hm3"), "--out", str(guard_files / "m")])
    capsys.readouterr()
    out = guard_files / "runtime"
    code = cli.main(["compare-runtime", "--model", str(guard_files / "jailbreak.hm3"),
                     "--model", str(guard_files / "hate.hm3"), "--merged", str(guard_files / "m" / "merged.hm3"),
                     "--dataset", str(guard_files / "hate_set.jsonl"), "--out", str(out)])
    assert code == 0
    assert (out / "runtime.csv").exists() and (out / "runtime.json").exists()
    table = json.loads(capsys.readouterr().out)
    assert [row["metric"] for row in table] == ["load_duration_ms", "inference_duration_ms", "total_duration_ms"]


def test_report_rebuilds_files(guard_files):
    out = guard_files / "eval"
    cli.main(["eval", "--model", str(guard_files / "hate.hm3"), "--dataset", str(guard_files / "hate_set.jsonl"),
              "--out", str(out)])
    rebuilt = guard_files / "rebuilt"
    code = cli.main(["report", "--report", str(out / "report.json"),
                     "--baseline-report", str(out / "report.json"), "--out", str(rebuilt)])
    assert code == 0
    assert (rebuilt / "scores.csv").read_bytes() == (out / "scores.csv").read_bytes()
    assert (rebuilt / "accuracy_comparison.csv").exists()


def test_argument_errors():
    assert cli.main(["expand", "--out", "x"]) == 2
    assert cli.main(["not-a-command"]) == 2
    assert cli.main([]) == 2


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("HM3_THREADS", "3")
    assert config.get_thread_count(None) == 3
    assert config.get_thread_count(2) == 2
    monkeypatch.setenv("HM3_THREADS", "many")
    assert config.get_thread_count(None) == 1


def test_model_ids_and_dataset_args():
    assert cli.model_ids(["a/x.hm3", "b/x.hm3", "y.bin"]) == ["x", "x_2", "y.bin"]
    assert cli.split_dataset_arg("data/hate.jsonl@hate") == ("data/hate.jsonl", "hate")
    assert cli.split_dataset_arg("data/hate.jsonl") == ("data/hate.jsonl", None)
    assert cli.split_dataset_arg("me@host/data.jsonl") == ("me@host/data.jsonl", None)


RECORDING_STUB = """import json, sys
from pathlib import Path
argv = sys.argv[1:]
received = {}
for flag, value in zip(argv, argv[1:]):
    if flag == "--dataset":
        rows = [json.loads(line) for line in Path(value).read_text().splitlines() if line.strip()]
        received[Path(value).stem] = [row["text"] for row in rows]
Path(sys.argv[0]).with_suffix(".received.json").write_text(json.dumps(received))
print(json.dumps(REPORT))
"""


def test_eval_external_receives_capped_seeded_subsets(guard_files, guard):
    stub = guard_files / "recorder.py"
    stub.write_text(f"REPORT = {STUB_REPORT!r}\n" + RECORDING_STUB)
    code = cli.main(["eval", "--model", str(guard_files / "hate.hm3"),
                     "--dataset", str(guard_files / "hate_set.jsonl"),
                     "--evaluator", "external", "--evaluator-cmd", f"{sys.executable} {stub}",
                     "--sample-cap", "7", "--seed", "5", "--out", str(guard_files / "eval")])
    assert code == 0
    received = json.loads((guard_files / "recorder.received.json").read_text())
    expected = [guard.hate_set.examples[i][0]
                for i in sample_indices(len(guard.hate_set.examples), 7, 5, "hate_set")]
    assert received == {"hate_set": expected}


def test_eval_external_warns_about_cross_checks(guard_files, capsys):
    stub = guard_files / "stub.py"
    stub.write_text(f"import json\nprint(json.dumps({STUB_REPORT!r}))\n")
    cli.main(["merge", "--model", str(guard_files / "jailbreak.hm3"), "--model", str(guard_files / "hate.hm3"),
              "--base", str(guard_files / "base.hm3"), "--out", str(guard_files / "m")])
    plan = guard_files / "plan.json"
    plan.write_text(json.dumps([{"dataset": "hate_set", "segment": "jailbreak", "expected_label": "benign"}]))
    capsys.readouterr()

    code = cli.main(["eval", "--model", str(guard_files / "m" / "merged.hm3"),
                     "--dataset", f"{guard_files / 'hate_set.jsonl'}@hate", "--plan", str(plan),
                     "--evaluator", "external", "--evaluator-cmd", f"{sys.executable} {stub}",
                     "--out", str(guard_files / "eval")])
    assert code == 0
    assert "1 cross-check pairs are left to the command itself" in capsys.readouterr().err


def test_datasets_sharing_a_stem_get_distinct_names(guard_files, guard):
    for folder, dataset in (("jailbreak", guard.jailbreak_set), ("hate", guard.hate_set)):
        (guard_files / folder).mkdir()
        write_jsonl(guard_files / folder / "test.jsonl", dataset.examples)
    cli.main(["merge", "--model", str(guard_files / "jailbreak.hm3"), "--model", str(guard_files / "hate.hm3"),
              "--base", str(guard_files / "base.hm3"), "--out", str(guard_files / "m")])

    out = guard_files / "eval"
    code = cli.main(["eval", "--model", str(guard_files / "m" / "merged.hm3"),
                     "--dataset", str(guard_files / "jailbreak" / "test.jsonl"),
                     "--dataset", str(guard_files / "hate" / "test.jsonl"), "--out", str(out)])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "confusion_test_2_hate.csv", "confusion_test_jailbreak.csv", "report.json", "scores.csv"]
    scores = (out / "scores.csv").read_text().splitlines()
    assert [line.split(",")[:2] for line in scores[1:]] == [["test", "jailbreak"], ["test_2", "hate"]]

    search_config = guard_files / "search.json"
    search_config.write_text(json.dumps({"trials": 3, "val_samples": 20, "test_samples": 40}))
    code = cli.main(["search", "--model", str(guard_files / "jailbreak.hm3"), "--model", str(guard_files / "hate.hm3"),
                     "--base", str(guard_files / "base.hm3"),
                     "--dataset", str(guard_files / "jailbreak" / "test.jsonl"),
                     "--dataset", str(guard_files / "hate" / "test.jsonl"),
                     "--search-config", str(search_config), "--out", str(guard_files / "search")])
    assert code == 0
    trials = [json.loads(line) for line in (guard_files / "search" / "trials.jsonl").read_text().splitlines()]
    assert any(set(trial["val_scores"]) == {"test", "test_2"} for trial in trials)


def test_eval_report_is_stable_across_runs(guard_files):
    runs = []
    for name in ("first", "second"):
        out = guard_files / name
        assert cli.main(["eval", "--model", str(guard_files / "hate.hm3"),
                         "--dataset", str(guard_files / "hate_set.jsonl"), "--out", str(out)]) == 0
        runs.append(json.loads((out / "report.json").read_text()))
    metadata = [run.pop("metadata") for run in runs]
    assert runs[0] == runs[1]
    assert "timings" not in runs[0]

    rebuilt = guard_files / "rebuilt"
    assert cli.main(["report", "--report", str(guard_files / "first" / "report.json"), "--out", str(rebuilt)]) == 0
    assert json.loads((rebuilt / "report.json").read_text())["metadata"]["timings"] == metadata[0]["timings"]
