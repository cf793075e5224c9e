"""Command line entry point: ``mechpilot <group> <command>``.

One-off module commands take flags; ``pilot run`` takes a config file so the
whole run configuration is hashable. The store root comes from
``MECHPILOT_STORE`` unless ``--store`` is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from mechpilot import audit, matrix, pilot
from mechpilot.canonical import document_bytes
from mechpilot.claims import ClaimError, claim_datasets, parse_claim
from mechpilot.evidence.lines import LINES, before_after_line, patching_line, probe_line
from mechpilot.registry import (
    BudgetLedger,
    FloorSet,
    MethodParams,
    PreRegistration,
    RegistryError,
    find_registration,
    register,
    registry_log,
    validate_contract,
)
from mechpilot.store import ArtifactStore, HashChainLog, StoreError, default_store_root
from mechpilot.workbench.checkpoint import ToyModelConfig, load_stored_checkpoint, store_checkpoint
from mechpilot.workbench.datasets import generate_datasets, publish_datasets, refusal_claim_document
from mechpilot.workbench.run import PatchSpec, Site
from mechpilot.workbench.train import RECIPES, PlantFailed, build_planted_pair, cell_rates

EXIT_OK = 0
EXIT_FAIL = 1


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _store(args: argparse.Namespace) -> ArtifactStore:
    return ArtifactStore(args.store or default_store_root())


def _read_json(path: str) -> Any:
    return json.loads(Path(path).read_text())


# -- claims ----------------------------------------------------------------


def cmd_claims_validate(args: argparse.Namespace) -> int:
    store = None if args.no_datasets else _store(args)
    claim = parse_claim(_read_json(args.claim), store)
    _emit({"id": claim.id, "predicate": claim.predicate_rule.to_json(), "valid": True})
    return EXIT_OK


# -- workbench -------------------------------------------------------------


def cmd_workbench_datasets(args: argparse.Namespace) -> int:
    store = _store(args)
    refs = publish_datasets(store, generate_datasets(args.seed, args.per_marker))
    if args.claim_out:
        Path(args.claim_out).write_bytes(document_bytes(refusal_claim_document(refs)))
    _emit(refs)
    return EXIT_OK


def cmd_workbench_build(args: argparse.Namespace) -> int:
    store = _store(args)
    config = ToyModelConfig(seed=args.seed)
    base, after = build_planted_pair(config, args.recipe)
    out = {
        "after": {"ref": store_checkpoint(store, after), "digest": after.digest, "stage": after.stage_tag,
                  "rates": cell_rates(after, 200, args.seed)},
        "base": {"ref": store_checkpoint(store, base), "digest": base.digest, "stage": base.stage_tag},
    }
    _emit(out)
    return EXIT_OK


# -- evidence --------------------------------------------------------------


def cmd_evidence_run(args: argparse.Namespace) -> int:
    store = _store(args)
    registration = PreRegistration.from_json(_read_json(args.registration))
    claim = parse_claim(_read_json(args.claim), store)
    datasets = claim_datasets(claim, store)
    after = load_stored_checkpoint(store, args.checkpoint)
    seed = registration.method.split_seed
    if args.line == "probe":
        result = probe_line(after, claim, seed, registration=registration, datasets=datasets)
    elif args.line == "patching":
        labels = args.sites or pilot.default_sites(after.config)
        specs = [PatchSpec(Site.parse(s), args.mode) for s in labels]
        result = patching_line(after, claim, specs, registration=registration, datasets=datasets)
    else:
        if not args.base:
            raise pilot.ConfigError("before_after needs --base")
        base = load_stored_checkpoint(store, args.base)
        result = before_after_line(base, after, claim, seed, registration=registration, datasets=datasets)
    _emit(result.to_json())
    return EXIT_OK if result.passed else EXIT_FAIL


# -- registry --------------------------------------------------------------


def _floors(args: argparse.Namespace) -> FloorSet:
    return FloorSet(args.auroc_floor, args.effect_size_floor, args.delta_floor, args.probe_layer,
                    args.min_heldout)


def cmd_registry_floors(args: argparse.Namespace) -> int:
    floors = _floors(args)
    if args.check_against:
        reg = PreRegistration.from_json(_read_json(args.check_against))
        decision = validate_contract(floors, reg)
        _emit({"accepted": decision.accepted, "reason": decision.reason})
        return EXIT_OK if decision.accepted else EXIT_FAIL
    if not args.register:
        _emit(floors.to_json())
        return EXIT_OK
    store = _store(args)
    store.root.mkdir(parents=True, exist_ok=True)
    reg = register(floors, args.budget, args.issuer, log=registry_log(store.root), pilot_id=args.pilot_id,
                   method=MethodParams(positions_per_unit=args.positions_per_unit))
    if args.out:
        Path(args.out).write_bytes(document_bytes(reg.to_json()))
    _emit(reg.to_json())
    return EXIT_OK


def cmd_registry_budget(args: argparse.Namespace) -> int:
    ledger = BudgetLedger.replay(HashChainLog(args.ledger))
    _emit(ledger.to_json() | {"remaining": ledger.remaining})
    return EXIT_OK


# -- audit -----------------------------------------------------------------


def cmd_audit_reproduce(args: argparse.Namespace) -> int:
    store = _store(args)
    pkg = audit.EvidencePackage.from_json(_read_json(args.package), store)
    log = registry_log(store.root)
    registration, _ = find_registration(log, pkg.registration_digest)
    out_dir = Path(args.out or Path(args.package).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    ledger = pilot.open_ledger(registration, out_dir / "reproduce-budget.jsonl")
    repro = audit.reproduce(pkg, store, ledger)
    status = "aborted" if repro.budget_exhausted else "completed"
    outcome = pilot.publish(pkg, repro, ledger, registration, store, out_dir, status=status, notes=())
    _emit({"enclave_hash": repro.enclave_hash, "deviations": [d.to_json() for d in repro.deviation_log],
           "overall_verdict": outcome.report["overall_verdict"], "report": str(outcome.report_path)})
    return outcome.exit_code


def cmd_audit_report(args: argparse.Namespace) -> int:
    store = _store(args)
    report = audit.load_report(store, args.pilot_id)
    problems = audit.check_certificate(report.body)
    _emit({"certificate": report.body["certificate"], "overall_verdict": report.overall_verdict,
           "problems": problems, "report_digest": report.report_digest, "status": report.status})
    return EXIT_OK if not problems else EXIT_FAIL


# -- matrix ----------------------------------------------------------------


def cmd_matrix_check(args: argparse.Namespace) -> int:
    rows = matrix.load_csv(args.csv or matrix.shipped_inventory_path())
    finding = matrix.aggregate_finding(rows)
    summary = matrix.summarize(rows)
    for r in rows:
        sys.stdout.write(f"{matrix.row_display(r):<4} {r.instrument}\n")
    _emit({"gap_row_count": finding.gap_row_count, "holds": finding.holds, "instruments": summary.instruments,
           "jurisdictions": summary.jurisdictions, "total_rows": summary.total_rows})
    return EXIT_OK


def cmd_matrix_sensitivity(args: argparse.Namespace) -> int:
    rows = matrix.load_csv(args.csv or matrix.shipped_inventory_path())
    recodings = matrix.load_recodings(args.recodings or matrix.shipped_recodings_path())
    _emit(matrix.sensitivity(rows, recodings).to_json())
    return EXIT_OK


# -- pilot -----------------------------------------------------------------


def cmd_pilot_init(args: argparse.Namespace) -> int:
    floors = _floors(args)
    path = pilot.init_pilot(
        args.dir, store_dir=args.store or default_store_root(), recipe=args.recipe, seed=args.seed,
        dataset_seed=args.dataset_seed, floors=floors, budget_limit=args.budget, issuer=args.issuer,
        pilot_id=args.pilot_id, method=MethodParams(positions_per_unit=args.positions_per_unit),
    )
    sys.stdout.write(f"{path}\n")
    return EXIT_OK


def cmd_pilot_run(args: argparse.Namespace) -> int:
    cfg = pilot.load_pilot_config(args.config)
    outcome = pilot.run_pilot(cfg)
    _emit({
        "exit_code": outcome.exit_code,
        "line_verdicts": outcome.report["line_verdicts"],
        "overall_verdict": outcome.report["overall_verdict"],
        "report": str(outcome.report_path),
        "report_digest": outcome.report_digest,
        "status": outcome.report["status"],
    })
    return outcome.exit_code


def _floor_flags(p: argparse.ArgumentParser) -> None:
    d = FloorSet()
    p.add_argument("--auroc-floor", type=float, default=d.auroc_floor)
    p.add_argument("--effect-size-floor", type=float, default=d.effect_size_floor)
    p.add_argument("--delta-floor", type=float, default=d.delta_floor)
    p.add_argument("--probe-layer", type=int, default=d.probe_layer)
    p.add_argument("--min-heldout", type=int, default=d.min_heldout_size)
    p.add_argument("--budget", type=int, default=86_400, help="budget limit in units")
    p.add_argument("--issuer", default="verifier")
    p.add_argument("--pilot-id", default="pilot")
    p.add_argument("--positions-per-unit", type=int, default=MethodParams().positions_per_unit)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mechpilot", description=__doc__.splitlines()[0])
    parser.add_argument("--store", help="artifact store root (default: $MECHPILOT_STORE)")
    groups = parser.add_subparsers(dest="group", required=True)

    claims = groups.add_parser("claims").add_subparsers(dest="command", required=True)
    p = claims.add_parser("validate", help="check a claim spec and its datasets")
    p.add_argument("claim")
    p.add_argument("--no-datasets", action="store_true", help="skip dataset resolution")
    p.set_defaults(func=cmd_claims_validate)

    wb = groups.add_parser("workbench").add_subparsers(dest="command", required=True)
    p = wb.add_parser("datasets", help="publish eval/trigger/benign datasets to the store")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-marker", type=int, default=200)
    p.add_argument("--claim-out", help="also write a refusal claim spec here")
    p.set_defaults(func=cmd_workbench_datasets)
    p = wb.add_parser("build", help="train a planted checkpoint pair and store it")
    p.add_argument("--recipe", choices=RECIPES, default="refuser")
    p.add_argument("--seed", type=int, default=17)
    p.set_defaults(func=cmd_workbench_build)

    ev = groups.add_parser("evidence").add_subparsers(dest="command", required=True)
    p = ev.add_parser("run", help="run one evidence line")
    p.add_argument("line", choices=LINES)
    p.add_argument("--claim", required=True)
    p.add_argument("--registration", required=True)
    p.add_argument("--checkpoint", required=True, help="store ref of the checkpoint under test")
    p.add_argument("--base", help="store ref of the base checkpoint (before_after)")
    p.add_argument("--sites", nargs="*", help="candidate sites such as L0.H1")
    p.add_argument("--mode", default="zero_ablate", choices=("zero_ablate", "mean_ablate"))
    p.set_defaults(func=cmd_evidence_run)

    reg = groups.add_parser("registry").add_subparsers(dest="command", required=True)
    p = reg.add_parser("floors", help="show, register, or check floors against a registration")
    _floor_flags(p)
    p.add_argument("--register", action="store_true")
    p.add_argument("--out", help="write the registration JSON here")
    p.add_argument("--check-against", help="registration JSON to validate these floors against")
    p.set_defaults(func=cmd_registry_floors)
    p = reg.add_parser("budget", help="replay a budget ledger file")
    p.add_argument("ledger")
    p.set_defaults(func=cmd_registry_budget)

    au = groups.add_parser("audit").add_subparsers(dest="command", required=True)
    p = au.add_parser("reproduce", help="re-execute an evidence package and emit a report")
    p.add_argument("package")
    p.add_argument("--out", help="directory for the report (default: the package's)")
    p.set_defaults(func=cmd_audit_reproduce)
    p = au.add_parser("report", help="show the stored report for a pilot id")
    p.add_argument("pilot_id")
    p.set_defaults(func=cmd_audit_report)

    mx = groups.add_parser("matrix").add_subparsers(dest="command", required=True)
    p = mx.add_parser("check", help="verify an inventory CSV and print row cells")
    p.add_argument("csv", nargs="?")
    p.set_defaults(func=cmd_matrix_check)
    p = mx.add_parser("sensitivity", help="apply recodings and recompute the finding")
    p.add_argument("csv", nargs="?")
    p.add_argument("recodings", nargs="?")
    p.set_defaults(func=cmd_matrix_sensitivity)

    pl = groups.add_parser("pilot").add_subparsers(dest="command", required=True)
    p = pl.add_parser("init", help="publish datasets, register floors, write a pilot config")
    p.add_argument("dir")
    p.add_argument("--recipe", choices=RECIPES, default="refuser")
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--dataset-seed", type=int, default=0)
    _floor_flags(p)
    p.set_defaults(func=cmd_pilot_init)
    p = pl.add_parser("run", help="run a full pilot from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_pilot_run)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (pilot.ConfigError, ClaimError, RegistryError, matrix.MatrixError, StoreError, OSError,
            json.JSONDecodeError, PlantFailed) as exc:
        sys.stderr.write(f"mechpilot: {type(exc).__name__}: {exc}\n")
        return pilot.EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
