import json

import pytest
from click.testing import CliRunner

from sanigen import imaging, wire
from sanigen.cli import main
from tests.conftest import make_corpus


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workspace(tmp_path):
    """Reference corpus on disk: request.json, refs/, manifest.json."""
    images, manifest = make_corpus(n=5, size=64, seed=4)
    refs = tmp_path / "refs"
    refs.mkdir()
    for name, img in images:
        imaging.write_png(refs / name, img)
    wire.save_manifest(tmp_path / "manifest.json", manifest)
    (tmp_path / "request.json").write_text(
        json.dumps(
            {
                "target_objects": ["dog"],
                "background": "bedroom",
                "training_objective": "dog status watcher",
                "label_classes": ["eating", "sitting", "sleeping", "playing"],
                "task_kind": "classification",
            }
        )
    )
    return tmp_path


def invoke(runner, *args):
    result = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
    return result


class TestSanitizeCommand:
    def test_l0_bundle_has_no_payloads(self, runner, workspace):
        out = workspace / "bundle.json"
        result = invoke(
            runner, "sanitize",
            "--request", workspace / "request.json",
            "--images", workspace / "refs",
            "--manifest", workspace / "manifest.json",
            "--preference", "t=L0,b=L0",
            "--out", out,
        )
        assert result.exit_code == 0, result.output
        bundle = wire.load_bundle(out)
        assert all(s.payload is None for e in bundle.images for s in e.segments)

    def test_bad_preference_fails_with_single_line(self, runner, workspace):
        result = runner.invoke(
            main,
            ["sanitize", "--request", str(workspace / "request.json"),
             "--images", str(workspace / "refs"),
             "--manifest", str(workspace / "manifest.json"),
             "--preference", "t=L9,b=L0", "--out", str(workspace / "x.json")],
        )
        assert result.exit_code == 1
        stderr = result.stderr if hasattr(result, "stderr") else result.output
        lines = [l for l in stderr.strip().splitlines() if l]
        assert len(lines) == 1
        assert lines[0].startswith("error: invalid-argument:")


class TestPipelineCommands:
    def _sanitize(self, runner, workspace, pref, name):
        out = workspace / name
        result = invoke(
            runner, "sanitize",
            "--request", workspace / "request.json",
            "--images", workspace / "refs",
            "--manifest", workspace / "manifest.json",
            "--preference", pref,
            "--out", out, "--seed", 3,
        )
        assert result.exit_code == 0, result.output
        return out

    def test_measure_generate_evaluate(self, runner, workspace):
        bundle_path = self._sanitize(runner, workspace, "t=L2,b=L0", "b.json")

        report_path = workspace / "privacy.json"
        result = invoke(
            runner, "measure-privacy",
            "--refs", workspace / "refs",
            "--bundle", bundle_path,
            "--manifest", workspace / "manifest.json",
            "--out", report_path, "--csv", workspace / "privacy.csv",
        )
        assert result.exit_code == 0, result.output
        report = json.loads(report_path.read_text())
        by_role = {r["role"]: r["mi"] for r in report["roles"]}
        assert by_role["t"] == pytest.approx(1.0, abs=1e-9)

        dataset_dir = workspace / "ds"
        result = invoke(
            runner, "generate", "--bundle", bundle_path, "--backend", "mock",
            "--count", 3, "--seed", 2, "--out", dataset_dir,
        )
        assert result.exit_code == 0, result.output
        assert len(list((dataset_dir / "images").glob("*.png"))) == 12

        out = workspace / "utility.json"
        result = invoke(
            runner, "evaluate", "--dataset", dataset_dir, "--backend", "mock",
            "--split", 0.75, "--seed", 1, "--out", out,
            "--predictions", workspace / "predictions.json",
        )
        assert result.exit_code == 0, result.output
        doc = json.loads(out.read_text())
        assert doc["metric"] == "accuracy" and 0.0 <= doc["value"] <= 1.0
        assert doc["provenance"]["train_fraction"] == 0.75
        task, preds = wire.load_predictions(workspace / "predictions.json")
        assert len(preds) == 4  # one validation sample per class

    def test_tradeoff_mi_strictly_increasing(self, runner, workspace):
        out = workspace / "tradeoff.csv"
        result = invoke(
            runner, "tradeoff",
            "--request", workspace / "request.json",
            "--images", workspace / "refs",
            "--manifest", workspace / "manifest.json",
            "--preferences", "t=L0,b=L0;t=L1,b=L0;t=L2,b=L0",
            "--backend", "mock", "--count", 3, "--seed", 5,
            "--out", out, "--plot-data", workspace / "tradeoff.plot.json",
        )
        assert result.exit_code == 0, result.output
        rows = out.read_text().strip().splitlines()[1:]
        assert len(rows) == 3
        mi_values = [float(r.rsplit(",", 5)[1]) for r in rows]
        assert mi_values[0] < mi_values[1] < mi_values[2]
        plot = json.loads((workspace / "tradeoff.plot.json").read_text())
        assert len(plot["rows"]) == 3

    def test_tradeoff_reproducible(self, runner, workspace):
        outputs = []
        for name in ("a.csv", "b.csv"):
            out = workspace / name
            result = invoke(
                runner, "tradeoff",
                "--request", workspace / "request.json",
                "--images", workspace / "refs",
                "--manifest", workspace / "manifest.json",
                "--preferences", "t=L0,b=L0;t=L2,b=L2",
                "--backend", "mock", "--count", 2, "--seed", 11,
                "--out", out,
            )
            assert result.exit_code == 0, result.output
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]

    def test_noise_sweep_rows(self, runner, workspace):
        out = workspace / "noise.csv"
        result = invoke(
            runner, "noise-sweep",
            "--request", workspace / "request.json",
            "--images", workspace / "refs",
            "--manifest", workspace / "manifest.json",
            "--sigma", "5,10,50", "--backend", "mock", "--count", 2, "--seed", 1,
            "--out", out,
        )
        assert result.exit_code == 0, result.output
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("sigma,")
        assert [l.split(",")[0] for l in lines[1:]] == ["5", "10", "50"]
