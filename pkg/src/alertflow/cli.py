"""Command-line entry points: run, generate, train, report.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import base64
import json
import logging
import signal
import sys
import threading
import urllib.request

import click

from .config import load_config
from .errors import AlertflowError, ConfigError
from .system import System, build_report, offline_train
from .workload import WorkloadConfig, generate_workload

logger = logging.getLogger(__name__)


def _fail(exc: Exception):
    click.echo(f"error: {exc}", err=True)
    sys.exit(1 if isinstance(exc, ConfigError) else 2)


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def run(config_path):
    """Start the pipeline and serve the ingestion API until interrupted."""
    try:
        config = load_config(config_path)
        system = System(config)
        system.start()
    except AlertflowError as e:
        _fail(e)
    click.echo(f"ingress listening at {system.http.url}/api/v1/ingest/pagerduty")
    click.echo("press Ctrl-C to drain and shut down")
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait()
    click.echo("draining...")
    drained = system.shutdown(drain=True)
    counts = system.conservation()
    click.echo(
        f"accepted={counts['accepted']} reported={counts['reported']} "
        f"saved={counts['saved']} dead_lettered={counts['dead_lettered']}"
    )
    sys.exit(0 if drained else 2)


@main.command()
@click.option("--rate", type=float, default=120.0, show_default=True, help="Alerts per minute.")
@click.option("--duration", type=float, default=60.0, show_default=True, help="Seconds of arrivals.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--services", type=int, default=2000, show_default=True)
@click.option("--signal-strength", type=float, default=0.8, show_default=True)
@click.option("--no-lifecycle", is_flag=True, help="Emit only trigger webhooks.")
@click.option("--target", help="POST each webhook to this base URL.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Write webhooks to a JSONL file.")
def generate(rate, duration, seed, services, signal_strength, no_lifecycle, target, out_path):
    """Generate a synthetic webhook workload; send it or save it."""
    if not target and not out_path:
        _fail(ConfigError("generate needs --target or --out"))
    try:
        workload = generate_workload(
            WorkloadConfig(
                rate_per_minute=rate,
                duration_seconds=duration,
                seed=seed,
                n_services=services,
                signal_strength=signal_strength,
                emit_lifecycle=not no_lifecycle,
            )
        )
    except ValueError as e:
        _fail(ConfigError(str(e)))
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            for event in workload.events:
                f.write(json.dumps({
                    "time": event.time,
                    "kind": event.kind,
                    "incident_id": event.incident_id,
                    "payload_b64": base64.b64encode(event.payload).decode("ascii"),
                }) + "\n")
        click.echo(f"wrote {len(workload.events)} webhooks ({workload.triggered_count()} alerts) to {out_path}")
    if target:
        url = target.rstrip("/") + "/api/v1/ingest/pagerduty"
        sent = 0
        for event in workload.events:
            req = urllib.request.Request(
                url, data=event.payload, headers={"Content-Type": "application/json"},
                method="POST",
            )
            try:
                with urllib.request.urlopen(req, timeout=10) as resp:
                    if resp.status != 202:
                        _fail(AlertflowError(f"ingest answered HTTP {resp.status}"))
            except OSError as e:
                _fail(AlertflowError(f"cannot reach {url}: {e}"))
            sent += 1
        click.echo(f"posted {sent} webhooks to {url}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--window", default="all", show_default=True,
              help="Trailing event-time span to train on (e.g. 24h, 7d, all).")
def train(config_path, window):
    """Build a training set from the persisted history and fit a model."""
    try:
        config = load_config(config_path)
        version, n, d = offline_train(config, window_spec=window)
    except AlertflowError as e:
        _fail(e)
    click.echo(f"trained model v{version} on {n} x {d}; stored under model/current")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--kind", type=click.Choice(["reported", "saved"]), default=None,
              help="Restrict to one egress kind.")
@click.option("--format", "fmt", type=click.Choice(["table", "csv"]), default="table",
              show_default=True)
@click.option("--bin-width", type=float, default=1.0, show_default=True)
def report(config_path, kind, fmt, bin_width):
    """Latency summary (six-number rows), histogram CSV, and ROC/AUC."""
    try:
        config = load_config(config_path)
        bundle = build_report(config, kind=kind, bin_width=bin_width)
    except AlertflowError as e:
        _fail(e)
    if fmt == "csv":
        click.echo(bundle.histogram_csv, nl=False)
        return
    click.echo(bundle.table)
    for k, frac in sorted(bundle.fractions.items()):
        click.echo(f"{k}: {frac * 100:.2f}% within 15 seconds")
    if bundle.roc is not None:
        click.echo(f"model AUC over {bundle.n_scored} labeled predictions: {bundle.roc.auc:.4f}")
    elif bundle.n_scored:
        click.echo(f"{bundle.n_scored} labeled predictions (single class; no ROC)")


if __name__ == "__main__":
    main()
