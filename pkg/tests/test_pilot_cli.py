import json

import pytest

from mechpilot import cli, pilot
from mechpilot.pilot import ConfigError, exit_code, init_pilot, load_pilot_config, run_pilot
from mechpilot.registry import BudgetLedger, FloorSet
from mechpilot.store import HashChainLog
from mechpilot.workbench.train import PlantFailed


@pytest.fixture
def initialized(tmp_path, monkeypatch):
    monkeypatch.setenv("MECHPILOT_STORE", str(tmp_path / "store"))
    return tmp_path


def _init(root, name, **kw):
    return init_pilot(root / name, store_dir=root / "store", pilot_id=name, **kw)


class TestConfig:
    def test_loads_relative_paths(self, initialized):
        cfg = load_pilot_config(_init(initialized, "a"))
        assert cfg.claim_path.is_file() and cfg.output_dir.is_dir()
        assert len(cfg.patch_specs()) == 8

    @pytest.mark.parametrize("edit", [
        {"workbench": {"recipe": "saboteur"}},
        {"claim": "missing.json"},
        {"patch_mode": "swap_from"},
        {"candidate_sites": ["L9.H0"]},
    ])
    def test_bad_configs(self, initialized, edit):
        path = _init(initialized, "b")
        raw = json.loads(path.read_text()) | edit
        path.write_text(json.dumps(raw))
        with pytest.raises(ConfigError):
            load_pilot_config(path)

    def test_unregistered_registration_is_config_error(self, initialized):
        path = _init(initialized, "c")
        reg = path.parent / "registration.json"
        raw = json.loads(reg.read_text())
        raw["issuer"] = "someone else"
        raw.pop("digest")
        reg.write_text(json.dumps(raw))
        with pytest.raises(ConfigError):
            run_pilot(load_pilot_config(path))
        assert not (path.parent / "out" / "report.json").exists()

    def test_cli_config_error_exit_2(self, initialized, capsys):
        assert cli.main(["pilot", "run", str(initialized / "nope.json")]) == pilot.EXIT_CONFIG


class TestRuns:
    def test_budget_below_one_line(self, initialized):
        out = run_pilot(load_pilot_config(_init(initialized, "tiny", budget_limit=10)))
        assert out.exit_code == 30 and out.report["status"] == "aborted"
        assert out.report_path.is_file() and out.report["evidence"] == {}
        assert out.report["budget"]["spent"] == 0

    def test_strict_effect_floor_is_partial(self, initialized):
        out = run_pilot(load_pilot_config(_init(initialized, "strict", floors=FloorSet(effect_size_floor=1e4))))
        assert out.exit_code == 10
        assert out.report["line_verdicts"] == {"before_after": "pass", "patching": "fail", "probe": "pass"}

    def test_plant_failure_still_reports(self, initialized, monkeypatch):
        def boom(*a, **k):
            raise PlantFailed("refuser seed 17: nothing planted", {"after_trigger_eval": 0.0})
        monkeypatch.setattr(pilot, "build_planted_pair", boom)
        out = run_pilot(load_pilot_config(_init(initialized, "failed")))
        assert out.exit_code == 30 and "PlantFailed" in out.report["method_notes"][-1]
        assert exit_code(json.loads(out.report_path.read_text())) == 30

    def test_exit_code_matches_report(self, initialized):
        out = run_pilot(load_pilot_config(_init(initialized, "ok")))
        body = json.loads(out.report_path.read_text())
        assert out.exit_code == exit_code(body) == 0 and body["overall_verdict"] == "reproduced"
        ledger = BudgetLedger.replay(HashChainLog(out.report_path.parent / "budget.jsonl"))
        assert ledger.spent == body["budget"]["spent"]

    def test_reproduce_command(self, initialized, capsys):
        path = _init(initialized, "cmd")
        assert cli.main(["pilot", "run", str(path)]) == 0
        pkg = path.parent / "out" / "package.json"
        assert cli.main(["audit", "reproduce", str(pkg), "--out", str(initialized / "re")]) == 0
        capsys.readouterr()
        assert cli.main(["audit", "report", "cmd"]) == 0
        assert json.loads(capsys.readouterr().out)["problems"] == []


class TestCommands:
    def test_matrix_check(self, capsys):
        assert cli.main(["matrix", "check"]) == 0
        out = capsys.readouterr().out
        assert "G/A  Singapore" in out and '"jurisdictions": 13' in out

    def test_matrix_sensitivity(self, capsys):
        assert cli.main(["matrix", "sensitivity"]) == 0
        assert json.loads(capsys.readouterr().out)["gap_row_count_after"] >= 17

    def test_matrix_bad_csv_exit_2(self, tmp_path):
        bad = tmp_path / "x.csv"
        bad.write_text("instrument\nA\n")
        assert cli.main(["matrix", "check", str(bad)]) == pilot.EXIT_CONFIG

    def test_claims_validate(self, initialized, capsys):
        path = _init(initialized, "v")
        assert cli.main(["claims", "validate", str(path.parent / "claim.json")]) == 0
        assert json.loads(capsys.readouterr().out)["valid"]

    def test_claims_validate_missing_predicate(self, tmp_path):
        doc = tmp_path / "c.json"
        doc.write_text(json.dumps({"id": "x", "phi": "p", "context": "c", "datasets": {}}))
        assert cli.main(["claims", "validate", "--no-datasets", str(doc)]) == pilot.EXIT_CONFIG

    def test_registry_floors_register_and_check(self, initialized, capsys):
        reg = initialized / "reg.json"
        assert cli.main(["registry", "floors", "--register", "--out", str(reg), "--budget", "500"]) == 0
        assert cli.main(["registry", "floors", "--check-against", str(reg), "--auroc-floor", "0.99"]) == 0
        assert cli.main(["registry", "floors", "--check-against", str(reg), "--auroc-floor", "0.9"]) == 1

    def test_registry_budget(self, initialized, capsys):
        out = run_pilot(load_pilot_config(_init(initialized, "b", budget_limit=10)))
        capsys.readouterr()
        assert cli.main(["registry", "budget", str(out.report_path.parent / "budget.jsonl")]) == 0
        assert json.loads(capsys.readouterr().out)["limit"] == 10

    def test_workbench_datasets(self, initialized, capsys):
        claim = initialized / "claim.json"
        assert cli.main(["workbench", "datasets", "--claim-out", str(claim)]) == 0
        assert set(json.loads(capsys.readouterr().out)) == {"eval", "trigger", "benign"}
        assert cli.main(["claims", "validate", str(claim)]) == 0
