import json
import os

import pytest
from click.testing import CliRunner

from terasim.cli import main
from terasim.road import load_network

from conftest import cutin_rear_end_doc, grid_traffic_doc


@pytest.fixture
def runner():
    return CliRunner()


def write_config(tmp_path, doc, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


class TestGenmap:
    @pytest.mark.parametrize("template", ["highway2", "ring", "grid3x3"])
    def test_writes_loadable_map(self, runner, tmp_path, template):
        out = tmp_path / f"{template}.json"
        result = runner.invoke(main, ["genmap", "--template", template,
                                      "--out", str(out)])
        assert result.exit_code == 0, result.output
        net = load_network(str(out))
        assert net.lanes

    def test_unknown_template_rejected(self, runner, tmp_path):
        result = runner.invoke(main, ["genmap", "--template", "sphere",
                                      "--out", str(tmp_path / "x.json")])
        assert result.exit_code != 0


class TestRunEstimateReport:
    def test_run_writes_records_and_estimate(self, runner, tmp_path):
        cfg = write_config(tmp_path, cutin_rear_end_doc(seed=0))
        out = tmp_path / "out"
        result = runner.invoke(main, [
            "run", "--config", cfg, "--episodes", "3", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        records = (out / "records.jsonl").read_text().strip().splitlines()
        assert len(records) == 3
        est = json.loads((out / "estimate.json").read_text())
        assert est["n_episodes"] == 3
        assert est["n_crashes_raw"] == 3
        assert (out / "logs").is_dir()  # crash logs kept by default

    def test_run_mode_and_seed_overrides(self, runner, tmp_path):
        cfg = write_config(tmp_path, cutin_rear_end_doc(seed=0))
        out = tmp_path / "out"
        result = runner.invoke(main, [
            "run", "--config", cfg, "--episodes", "1", "--out", str(out),
            "--mode", "nde", "--seed", "123",
        ])
        assert result.exit_code == 0, result.output
        rec = json.loads((out / "records.jsonl").read_text().splitlines()[0])
        assert rec["mode"] == "NDE"
        assert rec["seed"] == 123

    def test_invalid_config_exits_2(self, runner, tmp_path):
        doc = grid_traffic_doc()
        doc["av"] = {"spawn": ["bogus_lane", 0.0]}
        cfg = write_config(tmp_path, doc)
        result = runner.invoke(main, ["run", "--config", cfg])
        assert result.exit_code == 2
        assert "config error" in result.output

    def test_malformed_json_exits_2(self, runner, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{ nope")
        result = runner.invoke(main, ["run", "--config", str(path)])
        assert result.exit_code == 2

    def test_estimate_from_records(self, runner, tmp_path):
        cfg = write_config(tmp_path, cutin_rear_end_doc(seed=0))
        out = tmp_path / "out"
        runner.invoke(main, ["run", "--config", cfg, "--episodes", "2",
                             "--out", str(out)])
        result = runner.invoke(main, ["estimate", "--records", str(out)])
        assert result.exit_code == 0, result.output
        assert json.loads(result.output)["n_crashes_raw"] == 2

    def test_estimate_zero_crashes_exits_4(self, runner, tmp_path):
        doc = grid_traffic_doc(duration=5.0, spawn_rate=0.0)
        cfg = write_config(tmp_path, doc)
        out = tmp_path / "out"
        runner.invoke(main, ["run", "--config", cfg, "--episodes", "1",
                             "--out", str(out)])
        result = runner.invoke(main, ["estimate", "--records", str(out)])
        assert result.exit_code == 4
        assert "insufficient" in result.output

    def test_report_outputs_text_json_figures(self, runner, tmp_path):
        cfg = write_config(tmp_path, cutin_rear_end_doc(seed=0))
        out = tmp_path / "out"
        runner.invoke(main, ["run", "--config", cfg, "--episodes", "2",
                             "--out", str(out), "--save-logs", "all"])
        result = runner.invoke(main, [
            "report", "--records", str(out), "--logs", str(out / "logs"),
        ])
        assert result.exit_code == 0, result.output
        assert (out / "report.txt").exists()
        report = json.loads((out / "report.json").read_text())
        assert report["estimate"]["n_crashes_raw"] == 2
        assert {s["spec_id"] for s in report["per_adversity"]} == {"cut_in", "rear_end"}
        figures = os.listdir(out / "figures")
        assert "crash_rate.png" in figures
        assert "timeline.png" in figures

    def test_report_no_figures_flag(self, runner, tmp_path):
        cfg = write_config(tmp_path, cutin_rear_end_doc(seed=0))
        out = tmp_path / "out"
        runner.invoke(main, ["run", "--config", cfg, "--episodes", "1",
                             "--out", str(out)])
        result = runner.invoke(main, ["report", "--records", str(out),
                                      "--no-figures"])
        assert result.exit_code == 0, result.output
        assert not (out / "figures").exists()


class TestReplay:
    def test_replay_prints_digest_without_publish(self, runner, tmp_path):
        cfg = write_config(tmp_path, cutin_rear_end_doc(seed=0))
        out = tmp_path / "out"
        runner.invoke(main, ["run", "--config", cfg, "--episodes", "1",
                             "--out", str(out), "--save-logs", "all"])
        log_path = out / "logs" / "episode_0.jsonl"
        result = runner.invoke(main, ["replay", "--log", str(log_path)])
        assert result.exit_code == 0, result.output
        assert "digest" in result.output

    def test_replay_publish_serves_log(self, runner, tmp_path):
        import threading
        from test_cosim import Client

        cfg = write_config(tmp_path, cutin_rear_end_doc(seed=0))
        out = tmp_path / "out"
        runner.invoke(main, ["run", "--config", cfg, "--episodes", "1",
                             "--out", str(out), "--save-logs", "all"])
        log_path = out / "logs" / "episode_0.jsonl"

        got = {}

        def run_replay():
            got["result"] = runner.invoke(main, [
                "replay", "--log", str(log_path), "--publish",
                "--listen", "127.0.0.1:16381", "--rate", "0",
            ])

        thread = threading.Thread(target=run_replay)
        thread.start()
        import time
        payload = None
        for _ in range(100):
            time.sleep(0.05)
            try:
                c = Client("127.0.0.1", 16381)
                payload = c.command("GET", "terasim-actor-info")
                c.close()
                if isinstance(payload, bytes):
                    break
            except OSError:
                continue
        thread.join(timeout=30)
        assert got["result"].exit_code == 0, got["result"].output
        assert payload is not None
        doc = json.loads(payload)
        assert any(a["type"] == "AV" for a in doc["actors"])


class TestCosimTimeoutExit:
    def test_run_exits_3_when_no_client_appears(self, runner, tmp_path):
        doc = {
            "map": {"generator": "highway2"},
            "episode": {"dt": 0.1, "max_duration": 5.0, "nominal_miles": 1.0},
            "av": {"spawn": ["hw_0", 10.0], "speed": 10.0, "control": "COSIM"},
            "cosim": {"enabled": True, "listen": "127.0.0.1:0",
                      "handshake_timeout": 0.4},
            "seed": 0,
        }
        cfg = write_config(tmp_path, doc)
        result = runner.invoke(main, ["run", "--config", cfg,
                                      "--out", str(tmp_path / "out")])
        assert result.exit_code == 3
        assert "co-sim timeout" in result.output
