#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Main module for covertsim.
Loads scenario files, runs channels, cryptanalysis jobs and sweeps, and
writes every artifact of a run.
"""

import os
import sys
import json
import logging
import argparse
import time
from pathlib import Path
from typing import Dict, List, Any, Optional

import pandas as pd

try:
    from target_hosts import OS_KINDS, VARIANTS
    from exfiltration import CHANNELS, execute_scenario, parse_message
    from flowlabel_cryptanalysis import (
        CryptanalysisError, SampleFormatError, PhaseError, build_log_table, full_attack, parse_sample_file,
    )
    from channels import ChannelError, ChannelConfigError
    from net_sim import TopologyError, SimulationError
    from os_models import ModelError
    from benchmark import ChannelBenchmark, SweepError
    from report_generator import ReportGenerator
except ImportError:
    # If running from another directory, add src to path
    sys.path.append(str(Path(__file__).resolve().parent))
    from target_hosts import OS_KINDS, VARIANTS
    from exfiltration import CHANNELS, execute_scenario, parse_message
    from flowlabel_cryptanalysis import (
        CryptanalysisError, SampleFormatError, PhaseError, build_log_table, full_attack, parse_sample_file,
    )
    from channels import ChannelError, ChannelConfigError
    from net_sim import TopologyError, SimulationError
    from os_models import ModelError
    from benchmark import ChannelBenchmark, SweepError
    from report_generator import ReportGenerator

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parent.parent

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class ScenarioError(Exception):
    """A scenario file that does not parse or names things that do not exist."""

    def __init__(self, path: str, field: str, message: str):
        self.path = str(path)
        self.field = field
        self.message = message
        super().__init__(f"{self.path}: {field}: {message}")


def load_scenario(path: str) -> Dict[str, Any]:
    """
    Read and validate a scenario file.

    Raises:
        ScenarioError: With the offending field (or line) and the reason
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            scenario = json.load(f)
    except FileNotFoundError:
        raise ScenarioError(path, "file", "not found")
    except json.JSONDecodeError as e:
        raise ScenarioError(path, f"line {e.lineno} column {e.colno}", e.msg)
    validate_scenario(scenario, path)
    return scenario


def validate_scenario(scenario: Any, path: str = "<scenario>") -> None:
    if not isinstance(scenario, dict):
        raise ScenarioError(path, "<root>", "a scenario is a JSON object")
    if "master_seed" not in scenario:
        raise ScenarioError(path, "master_seed", "required; runs never draw wall-clock entropy")
    if not isinstance(scenario["master_seed"], int) or isinstance(scenario["master_seed"], bool):
        raise ScenarioError(path, "master_seed", "must be an integer")
    channel = scenario.get("channel")
    if not isinstance(channel, dict) or "kind" not in channel:
        raise ScenarioError(path, "channel.kind", "required")
    if channel["kind"] not in CHANNELS:
        raise ScenarioError(path, "channel.kind",
                            f"unknown channel kind '{channel['kind']}' (expected one of {', '.join(sorted(CHANNELS))})")
    if not isinstance(channel.get("params", {}), dict):
        raise ScenarioError(path, "channel.params", "must be an object")
    topology = scenario.get("topology", {})
    if not isinstance(topology, dict):
        raise ScenarioError(path, "topology", "must be an object")
    variant = topology.get("variant", "dmz_exfil")
    if variant not in VARIANTS:
        raise ScenarioError(path, "topology.variant", f"unknown variant '{variant}'")
    os_kind = topology.get("target", {}).get("os", "linux")
    if os_kind not in OS_KINDS:
        raise ScenarioError(path, "topology.target.os", f"unknown OS kind '{os_kind}'")
    repetitions = scenario.get("repetitions", 1)
    if not isinstance(repetitions, int) or repetitions < 1:
        raise ScenarioError(path, "repetitions", "must be a positive integer")
    message = scenario.get("message")
    if message is not None and not (isinstance(message, dict) and "random_bits" in message):
        try:
            parse_message(message)
        except ValueError as e:
            raise ScenarioError(path, "message", str(e))


class CovertSimPipeline:
    """Runs scenarios, cryptanalysis jobs and sweeps with one configuration."""

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Dict[str, Dict[str, Any]]] = None):
        """
        Args:
            config_path: Optional JSON file merged over the defaults, section by section
            overrides: Settings taking precedence over both (the CLI flags)
        """
        self.config = self._load_config(config_path)
        for section, settings in (overrides or {}).items():
            self.config.setdefault(section, {}).update({k: v for k, v in settings.items() if v is not None})
        self._create_directories()
        self.report_generator = ReportGenerator(template_dir=self.config["paths"]["template_dir"],
                                                output_dir=self.config["paths"]["output_dir"])
        logger.info("covertsim pipeline initialized")

    def _load_config(self, config_path: Optional[str] = None) -> Dict[str, Any]:
        """Load configuration from file or use defaults."""
        default_config = {
            "paths": {
                "scenario_dir": str(REPO_ROOT / "data" / "scenarios"),
                "output_dir": "output",
                "template_dir": str(REPO_ROOT / "templates")
            },
            "run_settings": {
                "format": "records",
                "repetitions": None,
                "max_events": 10_000_000,
                "max_grid_points": 256,
                "workers": 1,
                "verbose": False
            },
            "report_settings": {
                "html": True,
                "excel": True,
                "charts": True
            }
        }

        if config_path:
            try:
                with open(config_path, 'r', encoding='utf-8') as f:
                    user_config = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise ScenarioError(config_path, "config", str(e))
            for section, settings in user_config.items():
                if section in default_config and isinstance(settings, dict):
                    default_config[section].update(settings)
                else:
                    default_config[section] = settings
            logger.info(f"Loaded configuration from {config_path}")

        return default_config

    def _create_directories(self):
        for directory in (self.config["paths"]["output_dir"], self.config["paths"]["template_dir"]):
            os.makedirs(directory, exist_ok=True)

    # -- scenarios ------------------------------------------------------------

    def resolve_scenario(self, name: str) -> str:
        """A path as given, else a bundled scenario by test id."""
        if os.path.exists(name):
            return name
        candidate = Path(self.config["paths"]["scenario_dir"]) / f"{name}.json"
        if candidate.exists():
            return str(candidate)
        raise ScenarioError(name, "file", "no such file or bundled scenario")

    def list_scenarios(self) -> List[Dict[str, Any]]:
        rows = []
        for path in sorted(Path(self.config["paths"]["scenario_dir"]).glob("*.json")):
            try:
                scenario = load_scenario(str(path))
            except ScenarioError as e:
                logger.warning(str(e))
                continue
            rows.append({"test_id": scenario.get("test_id", path.stem), "os": scenario.get("os", ""),
                         "scenario": scenario.get("scenario", ""), "channel": scenario["channel"]["kind"],
                         "description": scenario.get("description", "")})
        return rows

    def run_scenario(self, name: str, seed: Optional[int] = None) -> Dict[str, Any]:
        """
        Run every repetition of a scenario and write its artifacts.

        Returns:
            Dict with the summary rows, artifact paths, invariant violations and an exit status
        """
        path = self.resolve_scenario(name)
        scenario = load_scenario(path)
        settings = self.config["run_settings"]
        master_seed = scenario["master_seed"] if seed is None else seed
        repetitions = settings.get("repetitions") or scenario.get("repetitions", 1)
        fmt = settings.get("format", "records")
        test_id = scenario.get("test_id", Path(path).stem)
        prefix = f"{test_id}/"
        logger.info(f"Running scenario {test_id} ({scenario['channel']['kind']}, "
                    f"{repetitions} repetition(s), seed {master_seed})")

        start_time = time.time()
        rows, timing_frames, artifacts = [], [], {}
        violations = {"sav": 0, "stateful": 0, "non_disruption": 0}
        first_per_bit: List[Dict[str, Any]] = []
        aliases = []
        for rep in range(repetitions):
            run_seed = master_seed + rep
            result = execute_scenario(scenario, run_seed, rep, max_events=settings["max_events"])
            rows.append(result["summary"])
            for key, count in result["violations"].items():
                violations[key] = violations.get(key, 0) + count
            per_bit = result["per_bit"]
            if rep == 0:
                first_per_bit = per_bit
            if "alias" in result:
                aliases.append(result["alias"])
            ext = "csv" if fmt == "csv" else "jsonl"
            artifacts[f"transcript_{rep}"] = self.report_generator.write_transcript(
                per_bit, f"{prefix}transcript_rep{rep}.{ext}", fmt=fmt, repetition=rep)
            artifacts[f"events_{rep}"] = self.report_generator.write_event_log(
                result["topology"].log, f"{prefix}events_rep{rep}.jsonl")
            timing_frames.append(self.report_generator.bit_timing_frame(per_bit, rep))

        artifacts["summary"] = self.report_generator.write_summary(rows, f"{prefix}summary.csv")
        timing = _concat(timing_frames)
        timing_path = self.report_generator.output_dir / f"{prefix}bit_timing.csv"
        timing.to_csv(timing_path, index=False)
        artifacts["bit_timing"] = str(timing_path)
        if aliases:
            artifacts["alias"] = self.report_generator.write_seed_report({"test_id": test_id, "trials": aliases},
                                                                         f"{prefix}alias.json")
        reports = self.config["report_settings"]
        if reports.get("html"):
            audit = {"sav": violations["sav"], "stateful": violations["stateful"]}
            run_info = {"test_id": test_id, "channel": scenario["channel"]["kind"], "os": scenario.get("os", ""),
                        "scenario": scenario.get("scenario", ""), "seed": master_seed, "summary_rows": rows,
                        "per_bit": first_per_bit if reports.get("charts") else [], "audit": audit}
            artifacts["html"] = self.report_generator.generate_html_report(run_info, f"{prefix}report.html")
        if reports.get("excel"):
            artifacts["excel"] = self.report_generator.generate_excel_report(rows, timing, f"{prefix}report.xlsx")

        failed = sum(violations.values())
        if failed:
            logger.warning(f"Invariant violations in {test_id}: {violations}")
        elapsed = time.time() - start_time
        logger.info(f"Scenario {test_id} completed in {elapsed:.2f} seconds")
        return {"summary": rows, "artifacts": artifacts, "violations": violations,
                "status": EXIT_FAILURE if failed else EXIT_OK}

    # -- cryptanalysis ----------------------------------------------------------

    def run_crypto(self, samples_path: str) -> Dict[str, Any]:
        """
        Recover a flow-label seed from a sample file and write the seed report.

        Raises:
            SampleFormatError: Empty or malformed sample file
            PhaseError: The failing phase and its diagnostic
        """
        samples = parse_sample_file(samples_path)
        logger.info(f"Loaded {samples.L_count} labels ({samples.P} consecutive pairs) from {samples_path}")
        logtab = build_log_table()
        seed = full_attack(samples, logtab)
        ratio = seed.diagnostics.get("validation_ratio", 0.0)
        report = {"samples": str(samples_path), "seed": seed.to_dict(),
                  "timings": seed.diagnostics.get("timings", {}),
                  "validation_ratio": ratio, "verdict": "OK" if ratio >= 0.5 else "FAILED"}
        report["path"] = self.report_generator.write_seed_report(report, f"crypto/{Path(samples_path).stem}_seed.json")
        return report

    # -- sweeps -----------------------------------------------------------------

    def run_sweep(self, sweep_path: str, seed: Optional[int] = None) -> Dict[str, Any]:
        """
        Run a sweep file: {"scenario": ..., "grid": {...}} over channel runs, or
        {"monte_carlo": ..., "grid": {...}, "trials": n} over a model property.
        """
        try:
            with open(sweep_path, 'r', encoding='utf-8') as f:
                sweep = json.load(f)
        except FileNotFoundError:
            raise ScenarioError(sweep_path, "file", "not found")
        except json.JSONDecodeError as e:
            raise ScenarioError(sweep_path, f"line {e.lineno} column {e.colno}", e.msg)
        settings = self.config["run_settings"]
        bench = ChannelBenchmark(output_dir=self.report_generator.output_dir / "sweeps",
                                 max_grid_points=settings["max_grid_points"], workers=settings["workers"],
                                 max_events=settings["max_events"])
        grid = sweep.get("grid", {})
        name = sweep.get("name", Path(sweep_path).stem)
        if "monte_carlo" in sweep:
            master_seed = sweep.get("master_seed", 0) if seed is None else seed
            rows, columns = bench.run_monte_carlo(sweep["monte_carlo"], grid, int(sweep.get("trials", 1000)),
                                                  master_seed)
        else:
            if "scenario" not in sweep:
                raise ScenarioError(sweep_path, "scenario", "a sweep names a scenario or a monte_carlo run")
            scenario = load_scenario(self.resolve_scenario(sweep["scenario"]))
            master_seed = scenario["master_seed"] if seed is None else seed
            repetitions = settings.get("repetitions") or int(sweep.get("repetitions", 1))
            rows, columns = bench.run_sweep(scenario, grid, master_seed, repetitions)
        path = self.report_generator.write_sweep(rows, columns, f"sweeps/{name}.csv")
        chart = None
        if rows and len(grid) == 1 and self.config["report_settings"].get("charts"):
            (field, _), = grid.items()
            xs = [r[field] for r in rows]
            if "closed_form" in columns:
                chart = self.report_generator.plot_curve(xs, [r["measured"] for r in rows], f"sweeps/{name}",
                                                         field, "rate", [r["closed_form"] for r in rows])
            elif all(r.get("ber") is not None for r in rows):
                chart = self.report_generator.plot_curve(xs, [r["ber"] for r in rows], f"sweeps/{name}",
                                                         field, "BER")
        failed = sum(r.get(k, 0) or 0 for r in rows for k in ("sav", "stateful", "non_disruption"))
        return {"rows": rows, "path": path, "chart": chart, "status": EXIT_FAILURE if failed else EXIT_OK}


def _concat(frames: List[pd.DataFrame]) -> pd.DataFrame:
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def _print_rows(rows: List[Dict[str, Any]], columns: List[str]) -> None:
    print("\t".join(columns))
    for row in rows:
        print("\t".join("" if row.get(c) is None else str(row.get(c)) for c in columns))


def main(argv: Optional[List[str]] = None) -> int:
    """Main function to run covertsim."""
    parser = argparse.ArgumentParser(description='covertsim: deterministic covert channel simulation')
    parser.add_argument('--config', type=str, default=None, help='Path to configuration file')
    parser.add_argument('--seed', type=int, default=None, help='Override the master seed')
    parser.add_argument('--out-dir', type=str, default=None, help='Output directory')
    parser.add_argument('--format', choices=['csv', 'records'], default=None, help='Transcript format')
    parser.add_argument('--repetitions', type=int, default=None, help='Override the repetition count')
    parser.add_argument('--workers', type=int, default=None, help='Processes for sweeps')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')
    commands = parser.add_subparsers(dest='command', required=True)
    run = commands.add_parser('run', help='Run a scenario file or bundled scenario')
    run.add_argument('scenario', type=str)
    crypto = commands.add_parser('crypto', help='Recover a flow-label seed from a sample file')
    crypto.add_argument('samples', type=str)
    sweep = commands.add_parser('sweep', help='Run a parameter sweep file')
    sweep.add_argument('sweep', type=str)
    commands.add_parser('list-scenarios', help='List bundled scenarios')
    args = parser.parse_args(argv)

    if args.repetitions is not None and args.repetitions < 1:
        parser.error("--repetitions must be positive")
    overrides = {"paths": {"output_dir": args.out_dir},
                 "run_settings": {"format": args.format, "repetitions": args.repetitions,
                                  "workers": args.workers, "verbose": args.verbose or None}}
    try:
        pipeline = CovertSimPipeline(args.config, overrides)
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    root = logging.getLogger()
    if pipeline.config["run_settings"].get("verbose"):
        root.setLevel(logging.DEBUG)
    log_handler = logging.FileHandler(Path(pipeline.config["paths"]["output_dir"]) / 'covertsim.log')
    log_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
    root.addHandler(log_handler)

    try:
        if args.command == 'list-scenarios':
            _print_rows(pipeline.list_scenarios(), ["test_id", "os", "scenario", "channel"])
            return EXIT_OK
        if args.command == 'run':
            result = pipeline.run_scenario(args.scenario, seed=args.seed)
            _print_rows(result["summary"], ["test_id", "repetition", "bits", "successes", "invalid",
                                            "ber", "bit_rate_bph"])
            if result["status"] != EXIT_OK:
                print(f"invariant violations: {result['violations']}", file=sys.stderr)
            return result["status"]
        if args.command == 'crypto':
            report = pipeline.run_crypto(args.samples)
            seed = report["seed"]
            print(f"s1={seed['s1']} g={seed['g']} e={seed['e']} s2={seed['s2']} a={seed['a']} b={seed['b']}")
            print("timings: " + ", ".join(f"{k}={v * 1000:.1f}ms" for k, v in sorted(report["timings"].items())))
            print(f"validation: {report['validation_ratio']:.1%} {report['verdict']}")
            return EXIT_OK if report["verdict"] == "OK" else EXIT_FAILURE
        result = pipeline.run_sweep(args.sweep, seed=args.seed)
        print(f"{len(result['rows'])} row(s) written to {result['path']}")
        return result["status"]
    except (ScenarioError, SampleFormatError, SweepError, ChannelError, TopologyError, ModelError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, (ScenarioError, SampleFormatError, SweepError, ChannelConfigError)) else EXIT_FAILURE
    except PhaseError as e:
        print(f"error: phase {e.phase}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except (CryptanalysisError, SimulationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        root.removeHandler(log_handler)
        log_handler.close()


if __name__ == "__main__":
    sys.exit(main())
