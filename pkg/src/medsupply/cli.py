"""Command line entry point: ``medsupply run | verify-audit | replay``.

Exit codes: 0 success, 1 configuration or usage error, 2 invariant violation,
3 audit or replay failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .coordination import InvariantViolation, RoundAbort
from .crosslayer import SnapshotFormatError, parse_snapshot
from .ledger import ContentStore, parse_chain, verify_chain, verify_payloads
from .metrics import MetricsReport, summarize_sweep
from .policy_adapter import DEFAULT_TIMEOUT_MS, ExternalPolicy, parse_policy_spec
from .runner import round_log_csv, simulate, write_run
from .scenario import (
    ConfigError,
    DisruptionParams,
    ScenarioConfig,
    config_digest,
    config_from_dict,
    default_config,
    load_config,
)

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_AUDIT = 0, 1, 2, 3
SWEEP_KEYS = ("disruption", "alpha", "epsilon", "severity", "seed")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def build_config(args: argparse.Namespace) -> ScenarioConfig:
    if args.config:
        if args.regions is not None or args.drugs is not None or args.severity is not None:
            raise ConfigError("--regions, --drugs and --severity cannot be combined with --config")
        cfg = load_config(args.config)
    else:
        cfg = default_config(
            regions=3 if args.regions is None else args.regions,
            drugs=3 if args.drugs is None else args.drugs,
            severity=0.8 if args.severity is None else args.severity,
        )
    changes = {}
    if args.days is not None:
        changes["horizon_days"] = args.days
    if args.alpha is not None:
        changes["alpha"] = args.alpha
    if args.epsilon is not None:
        changes["epsilon"] = args.epsilon
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.disruption_prob is not None:
        changes["disruption"] = _with_probability(cfg, args.disruption_prob)
    return cfg.replace(**changes)


def _with_probability(cfg: ScenarioConfig, p: float) -> DisruptionParams:
    probs = {"manufacturer-0": p}
    probs.update({f"distributor-{r}": p for r in range(cfg.num_regions)})
    return DisruptionParams(probs)


def _parse_sweep(text: str) -> tuple[str, list[str]]:
    key, sep, values = text.partition("=")
    if not sep or key not in SWEEP_KEYS or not values:
        raise ConfigError(f"--sweep expects KEY=v1,v2,... with KEY in {', '.join(SWEEP_KEYS)}")
    return key, [v.strip() for v in values.split(",") if v.strip()]


def _sweep_config(cfg: ScenarioConfig, key: str, value: str, severity: float | None) -> ScenarioConfig:
    try:
        if key == "disruption":
            return cfg.replace(disruption=_with_probability(cfg, float(value)))
        if key == "seed":
            return cfg.replace(seed=int(value))
        if key == "severity":
            factor = float(value) / (0.8 if severity is None else severity)
            return cfg.replace(sir_params=tuple(p.__class__(p.beta * factor, p.gamma, p.population, p.initial_infected)
                                                for p in cfg.sir_params))
        return cfg.replace(**{key: float(value)})
    except ValueError as exc:
        raise ConfigError(f"bad sweep value {value!r} for {key}: {exc}") from None


def _run_one(cfg: ScenarioConfig, out: Path, policy_spec: str, timeout_ms: int) -> MetricsReport:
    started = time.strftime("%Y-%m-%dT%H:%M:%S+00:00", time.gmtime())
    command = parse_policy_spec(policy_spec)
    out.mkdir(parents=True, exist_ok=True)
    if command is None:
        result = simulate(cfg, store_dir=out / "store")
    else:
        with ExternalPolicy(command, timeout_ms) as policy:
            result = simulate(cfg, policy, store_dir=out / "store")
    write_run(result, out, started_at=started)
    return result.report


def _print_summary(name: str, report: MetricsReport) -> None:
    tau = "n/a" if report.mean_tau is None else f"{report.mean_tau:.2f}"
    delta = "n/a" if report.mean_fairness_deviation is None else f"{report.mean_fairness_deviation:.4f}"
    print(
        f"{name}: service_level={report.service_level:.1f}% unfulfilled={report.unfulfilled_pct:.1f}% "
        f"mean_tau={tau} mean_delta={delta} actions={sum(report.throughput.values())} "
        f"fallbacks={report.fallbacks} clamps={report.clamps}"
    )


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = build_config(args)
        parse_policy_spec(args.policy)
        if args.policy_timeout_ms <= 0:
            raise ConfigError("--policy-timeout-ms must be positive")
        out = Path(args.out)
        if args.sweep:
            key, values = _parse_sweep(args.sweep)
            runs = [(f"{key}={v}", _sweep_config(cfg, key, v, args.severity)) for v in values]
        else:
            runs = [("run", cfg)]
        reports = {}
        for name, run_cfg in runs:
            target = out / name if args.sweep else out
            reports[name] = _run_one(run_cfg, target, args.policy, args.policy_timeout_ms)
            _print_summary(name, reports[name])
        if args.sweep:
            (out / "sweep_summary.csv").write_text(summarize_sweep(reports))
    except (ConfigError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except (InvariantViolation, RoundAbort) as exc:
        name = getattr(exc, "invariant", "round_abort")
        _err(f"invariant violated [{name}]: {exc}")
        return EXIT_INVARIANT
    return EXIT_OK


def audit_directory(chain_path: Path, store_path: Path, manifest_path: Path | None = None) -> tuple[bool, str]:
    """verify-audit core: chain links, every payload, every snapshot, and the published head if a manifest exists."""
    records, parse_verdict = parse_chain(chain_path.read_bytes())
    verdict = verify_chain(records)
    if not verdict:
        return False, f"record {verdict.index}: {verdict.reason}"
    if not parse_verdict:
        return False, f"record {parse_verdict.index}: {parse_verdict.reason}"
    store = ContentStore(store_path) if store_path.is_dir() else None
    if store is None:
        return False, f"content store {store_path} not found"
    payloads = verify_payloads(records, store)
    if not payloads:
        return False, f"record {payloads.index}: {payloads.reason}"
    for rec in records:
        if rec.action == "snapshot_commit":
            try:
                if parse_snapshot(store.fetch(rec.payload_hash))["day"] != rec.timestamp:
                    return False, f"record {rec.tx_id}: snapshot day does not match its audit record"
            except SnapshotFormatError as exc:
                return False, f"record {rec.tx_id}: malformed snapshot ({exc})"
    if manifest_path is not None and manifest_path.is_file():
        head = json.loads(manifest_path.read_text()).get("audit_head_hash")
        actual = records[-1].record_hash if records else "0" * 64
        if head != actual:
            return False, f"head hash {actual} differs from published {head} (chain length {len(records)})"
    return True, f"ok: {len(records)} records verified"


def cmd_verify_audit(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else None
    chain = Path(args.chain) if args.chain else (run_dir / "audit_chain.jsonl" if run_dir else None)
    store = Path(args.store) if args.store else (run_dir / "store" if run_dir else None)
    manifest = run_dir / "manifest.json" if run_dir else (Path(args.manifest) if args.manifest else None)
    if chain is None or store is None:
        _err("give a run directory or both --chain and --store")
        return EXIT_CONFIG
    if not chain.is_file():
        _err(f"audit chain {chain} not found")
        return EXIT_AUDIT
    ok, message = audit_directory(chain, store, manifest)
    print(message if ok else f"FAIL {message}")
    return EXIT_OK if ok else EXIT_AUDIT


def _first_diff(a: str, b: str) -> str | None:
    la, lb = a.splitlines(), b.splitlines()
    for i, (x, y) in enumerate(zip(la, lb), start=1):
        if x != y:
            return f"line {i}: recorded {x!r} replayed {y!r}"
    if len(la) != len(lb):
        return f"line {min(len(la), len(lb)) + 1}: length differs ({len(la)} vs {len(lb)} lines)"
    return None


def cmd_replay(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
        run_dir = manifest_path.parent
        cfg = config_from_dict(json.loads((run_dir / "config.json").read_text()))
    except (OSError, ValueError, ConfigError) as exc:
        _err(f"cannot load run: {exc}")
        return EXIT_CONFIG
    if config_digest(cfg) != manifest["config_hash"]:
        _err("config hash mismatch: config.json was edited after the run; refusing to replay")
        return EXIT_CONFIG
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    try:
        command = parse_policy_spec(manifest["policy"])
        if command is None:
            result = simulate(cfg)
        else:
            with ExternalPolicy(command, args.policy_timeout_ms) as policy:
                result = simulate(cfg, policy)
    except (InvariantViolation, RoundAbort) as exc:
        _err(f"invariant violated during replay: {exc}")
        return EXIT_INVARIANT
    recorded = (run_dir / "round_log.csv").read_text()
    diff = _first_diff(recorded, round_log_csv(result.round_log))
    if diff is None and result.head_hash != manifest["audit_head_hash"]:
        diff = f"audit head: recorded {manifest['audit_head_hash']} replayed {result.head_hash}"
    if diff is None:
        print("replay identical: round log and audit head match")
        return EXIT_OK
    print(f"DIFF {diff}")
    return EXIT_AUDIT


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="medsupply", description="Pandemic medical supply-chain simulation with an audited allocation ledger.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario and write a run directory")
    run.add_argument("--config", help="scenario JSON file")
    run.add_argument("--alpha", type=float)
    run.add_argument("--epsilon", type=float)
    run.add_argument("--disruption-prob", type=float)
    run.add_argument("--days", type=int)
    run.add_argument("--regions", type=int)
    run.add_argument("--drugs", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--severity", type=float, help="multiplier on the baseline transmission rate")
    run.add_argument("--policy", default="builtin", help="builtin | external:<command>")
    run.add_argument("--policy-timeout-ms", type=int, default=DEFAULT_TIMEOUT_MS)
    run.add_argument("--sweep", help="KEY=v1,v2,... one run per value, e.g. disruption=0.05,0.15,0.25")
    run.add_argument("--out", default="runs/latest")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify-audit", help="check an exported audit chain and content store")
    ver.add_argument("run_dir", nargs="?")
    ver.add_argument("--chain")
    ver.add_argument("--store")
    ver.add_argument("--manifest")
    ver.set_defaults(func=cmd_verify_audit)

    rep = sub.add_parser("replay", help="re-run a recorded run and compare")
    rep.add_argument("manifest", help="manifest.json or its run directory")
    rep.add_argument("--seed", type=int, help="override the recorded seed")
    rep.add_argument("--policy-timeout-ms", type=int, default=DEFAULT_TIMEOUT_MS)
    rep.set_defaults(func=cmd_replay)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
