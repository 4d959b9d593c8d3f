"""Command-line front end: run, estimate, report, genmap, replay.

Exit codes: 0 ok, 2 config error, 3 co-sim timeout, 4 insufficient events.
"""

from __future__ import annotations

import json
import os
import sys
import time

import click

from . import engine as eng
from . import road
from .adversity import ConfigError as AdversityConfigError
from .engine import CosimTimeout, TrajectoryLog, canonical_json
from .estimation import (
    ConfigError as EstimationConfigError,
    estimate_crash_rate,
    read_records,
    write_records,
)
from .reporting import DEFAULT_HUMAN_BASELINE, build_report, report_to_text

EXIT_CONFIG = 2
EXIT_COSIM_TIMEOUT = 3
EXIT_INSUFFICIENT = 4

_CONFIG_ERRORS = (AdversityConfigError, EstimationConfigError, road.MapSchemaError)


@click.group()
def main():
    """Generative traffic simulation with adversity injection and co-simulation."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--episodes", default=1, show_default=True)
@click.option("--workers", default=1, show_default=True)
@click.option("--mode", type=click.Choice(["nde", "nade"]), default=None,
              help="Override the config's sampling mode.")
@click.option("--seed", type=int, default=None, help="Override the config's base seed.")
@click.option("--out", "out_dir", default="runs/latest", show_default=True)
@click.option("--save-logs", type=click.Choice(["none", "crashes", "all"]),
              default="crashes", show_default=True)
def run(config_path, episodes, workers, mode, seed, out_dir, save_logs):
    """Run a batch of seeded episodes and write records + estimate."""
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if mode is not None:
            doc["mode"] = mode.upper()
        if seed is not None:
            doc["seed"] = seed
        config = eng.config_from_dict(doc)
    except (json.JSONDecodeError, *_CONFIG_ERRORS) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    os.makedirs(out_dir, exist_ok=True)
    server = None
    try:
        if config.cosim.enabled:
            if config.cosim.external:
                from .cosim.external import ExternalCosim
                server = ExternalCosim(config.cosim.external, config.cosim.password)
                click.echo(f"co-sim using external server at {config.cosim.external}")
            else:
                from .cosim.server import CosimServer
                host, _, port = config.cosim.listen.partition(":")
                server = CosimServer(host=host, port=int(port or 6379),
                                     password=config.cosim.password)
                bound = server.start()
                click.echo(f"co-sim server listening on {bound[0]}:{bound[1]}")
            server.status = "running"
            server.start_heartbeat()
            records = []
            for i in range(episodes):
                record, log = eng.run_episode(config, config.seed + i, server)
                records.append(record)
                if save_logs == "all" or (save_logs == "crashes" and record.crash):
                    os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
                    log.to_jsonl(os.path.join(out_dir, "logs", f"episode_{record.seed}.jsonl"))
            estimate = estimate_crash_rate(records)
            aborted = []
        else:
            result = eng.run_batch(config, episodes, workers, out_dir=out_dir,
                                   save_logs=save_logs, config_doc=doc)
            records, estimate, aborted = result.records, result.estimate, result.aborted_seeds
    except CosimTimeout as exc:
        click.echo(f"co-sim timeout: {exc}", err=True)
        sys.exit(EXIT_COSIM_TIMEOUT)
    except _CONFIG_ERRORS as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    finally:
        if server is not None:
            server.status = "ended"
            server.publish_heartbeat("ended")
            time.sleep(0.05)
            server.stop()

    write_records(records, os.path.join(out_dir, "records.jsonl"))
    with open(os.path.join(out_dir, "estimate.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(estimate.to_dict()))
    if aborted:
        click.echo(f"warning: {len(aborted)} episode(s) aborted: {aborted}", err=True)
    click.echo(
        f"{len(records)} episodes, {estimate.n_crashes_raw} crashes, "
        f"r_hat={estimate.r_hat:.6g}/mile "
        f"CI=[{estimate.ci_low:.6g}, {estimate.ci_high:.6g}]"
    )
    click.echo(f"records: {os.path.join(out_dir, 'records.jsonl')}")


@main.command()
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
def estimate(records_path):
    """Estimate the crash rate from stored episode records."""
    try:
        records = read_records(records_path)
        est = estimate_crash_rate(records)
    except _CONFIG_ERRORS as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(json.dumps(est.to_dict(), indent=2, sort_keys=True))
    if est.n_crashes_raw == 0:
        click.echo("insufficient events: no crashes in the record set", err=True)
        sys.exit(EXIT_INSUFFICIENT)


@main.command()
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--logs", "logs_dir", type=click.Path(exists=True), default=None)
@click.option("--baseline", type=float, default=DEFAULT_HUMAN_BASELINE, show_default=True,
              help="Human crashes-per-mile baseline for the comparison ratio.")
@click.option("--nde-records", "nde_records_path", type=click.Path(exists=True), default=None,
              help="Paired natural-mode records for the acceleration factor.")
@click.option("--out", "out_dir", default=None,
              help="Output directory (default: alongside the records).")
@click.option("--figures/--no-figures", default=True, show_default=True)
def report(records_path, logs_dir, baseline, nde_records_path, out_dir, figures):
    """Build the quantitative safety report (text + JSON + figures)."""
    try:
        records = read_records(records_path)
        nde_records = read_records(nde_records_path) if nde_records_path else None
        logs = []
        if logs_dir:
            for name in sorted(os.listdir(logs_dir)):
                if name.endswith(".jsonl"):
                    logs.append(TrajectoryLog.from_jsonl(os.path.join(logs_dir, name)))
        rep = build_report(records, logs=logs or None, human_baseline=baseline,
                           nde_records=nde_records)
    except _CONFIG_ERRORS as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except ValueError as exc:
        click.echo(f"report error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if out_dir is None:
        out_dir = records_path if os.path.isdir(records_path) else os.path.dirname(records_path) or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(rep.to_json())
    text = report_to_text(rep)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    click.echo(text, nl=False)
    if figures:
        from .figures import render_report_figures
        paths = render_report_figures(rep, records, logs or None,
                                      os.path.join(out_dir, "figures"))
        for path in paths:
            click.echo(f"figure: {path}")


@main.command()
@click.option("--template", required=True,
              type=click.Choice(sorted(road.GENERATORS)))
@click.option("--out", "out_path", required=True, type=click.Path())
def genmap(template, out_path):
    """Write a built-in map template to a JSON document."""
    network = road.generate(template)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(road.serialize_network(network))
        fh.write("\n")
    click.echo(f"{template}: {len(network.lanes)} lanes, "
               f"{len(network.signals)} signals -> {out_path}")


@main.command()
@click.option("--log", "log_path", required=True, type=click.Path(exists=True))
@click.option("--publish", is_flag=True, default=False,
              help="Serve the log over the co-sim protocol.")
@click.option("--listen", default="127.0.0.1:6379", show_default=True)
@click.option("--rate", default=1.0, show_default=True,
              help="Playback speed multiplier; 0 replays as fast as possible.")
def replay(log_path, publish, listen, rate):
    """Re-publish a trajectory log for downstream co-sim consumers."""
    log = TrajectoryLog.from_jsonl(log_path)
    if not publish:
        click.echo(f"{len(log.steps)} steps, digest {log.digest()}")
        return
    from .cosim.schema import actor_state_message
    from .cosim.server import CosimServer
    host, _, port = listen.partition(":")
    server = CosimServer(host=host, port=int(port or 6379))
    bound = server.start()
    server.status = "running"
    server.start_heartbeat()
    click.echo(f"replaying {len(log.steps)} steps on {bound[0]}:{bound[1]}")
    try:
        prev_t = None
        for step in log.steps:
            actors = [
                {
                    "id": row[0], "type": row[1], "x": row[8], "y": row[9],
                    "heading": row[7], "speed": row[5], "accel": row[6],
                    "length": row[10], "width": row[11],
                }
                for row in step["actors"]
            ]
            signals = [{"id": sid, "state": state}
                       for sid, state in sorted(step.get("signals", {}).items())]
            server.publish_world(actor_state_message(step["t"], actors, signals))
            if rate > 0 and prev_t is not None:
                time.sleep(max(0.0, (step["t"] - prev_t) / rate))
            prev_t = step["t"]
    finally:
        server.status = "ended"
        server.publish_heartbeat("ended")
        time.sleep(0.05)
        server.stop()


if __name__ == "__main__":
    main()
