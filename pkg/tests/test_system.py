import json
import time

import pytest
import requests
from conftest import pagerduty_webhook

from alertflow.clock import SimulatedClock
from alertflow.config import AppConfig, load_config
from alertflow.errors import NoData
from alertflow.pipeline import FileSink
from alertflow.system import System, build_report, offline_train, parse_window_spec
from alertflow.workload import WorkloadConfig, generate_workload


def make_config(tmp_path, **overrides) -> AppConfig:
    config = load_config(None, environ={})
    config.pipeline.data_dir = str(tmp_path / "data")
    config.http.port = 0
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        setattr(getattr(config, section), name, value)
    return config.validate()


def wait_for(predicate, timeout=10.0, interval=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False


class TestSmoke:
    def test_healthz_and_single_webhook_to_sink(self, tmp_path):
        config = make_config(tmp_path)
        system = System(config)
        system.start()
        try:
            base = system.http.url
            assert requests.get(f"{base}/healthz", timeout=5).status_code == 200

            resp = requests.post(
                f"{base}/api/v1/ingest/pagerduty",
                data=pagerduty_webhook(),
                headers={"Content-Type": "application/json"},
                timeout=5,
            )
            assert resp.status_code == 202
            receipt = resp.json()["receipt_id"]
            assert receipt

            sink: FileSink = system.sink
            assert wait_for(lambda: len(sink.lines()) == 1)
            [line] = sink.lines()
            assert line["receipt_id"] == receipt
            assert "true-alert probability 0.5" in line["text"]  # untrained fallback
        finally:
            system.shutdown()

    def test_http_error_codes(self, tmp_path):
        system = System(make_config(tmp_path))
        system.start()
        try:
            base = system.http.url
            assert requests.post(f"{base}/nope", data=b"{}", timeout=5).status_code == 404
            assert (
                requests.post(
                    f"{base}/api/v1/ingest/pagerduty", data=b"not json", timeout=5
                ).status_code
                == 400
            )
            big = b"x" * (1_048_577)
            assert (
                requests.post(
                    f"{base}/api/v1/ingest/pagerduty", data=big, timeout=5
                ).status_code
                == 413
            )
        finally:
            system.shutdown()

    def test_resolved_webhook_is_saved_not_reported(self, tmp_path):
        system = System(make_config(tmp_path))
        system.start()
        try:
            receipt = system.ingest(pagerduty_webhook(event="incident.resolve"))
            recorder = system.production_metrics()
            assert wait_for(lambda: recorder.has_egress(receipt, "saved"))
            assert system.drain(timeout=10)
            assert not recorder.has_egress(receipt, "reported")
            assert system.sink.lines() == []
        finally:
            system.shutdown()

    def test_malformed_webhook_lands_in_dlq(self, tmp_path):
        system = System(make_config(tmp_path))
        system.start()
        try:
            system.ingest(json.dumps({"event": "incident.trigger", "incident": {}}).encode())
            dlq = f"production.{system.topics.raw}.dlq"
            assert wait_for(
                lambda: system.broker.topic_exists(dlq)
                and system.broker.end_offset(dlq) == 1
            )
            assert system.drain(timeout=10)
            counts = system.conservation()
            assert counts["dead_lettered"] == 1
            assert counts["conserved"]
        finally:
            system.shutdown()

    def test_shutdown_drains_in_flight(self, tmp_path):
        system = System(make_config(tmp_path))
        system.start()
        receipts = [system.ingest(pagerduty_webhook(incident_id=f"I-{i}")) for i in range(10)]
        drained = system.shutdown(drain=True, timeout=30)
        assert drained
        recorder = system.production_metrics()
        for r in receipts:
            assert recorder.has_egress(r, "reported")
        assert len(system.sink.lines()) == 10


class TestWorkloadRun:
    def test_simulated_run_conserves_and_reports(self, tmp_path):
        config = make_config(tmp_path)
        clock = SimulatedClock()
        system = System(config, pacing_clock=clock)
        system.start()
        try:
            workload = generate_workload(
                WorkloadConfig(rate_per_minute=120, duration_seconds=30, seed=5, n_services=10)
            )
            receipts = system.run_workload(workload)
            assert len(receipts) == len(workload.events)
            assert system.drain(timeout=30)
            counts = system.conservation()
            assert counts["accepted"] == len(workload.events)
            assert counts["conserved"]
            assert counts["reported"] == workload.triggered_count()
            # reported records equal sink posts; saved equal non-forwarded events
            assert len(system.sink.lines()) == counts["reported"]
            assert counts["saved"] == len(workload.events) - workload.triggered_count()
            # forward filter: layer-4 carries exactly the first-seen triggered ids
            from alertflow.events import IncidentEvent

            forwarded = [
                IncidentEvent.decode(m.payload).incident_id
                for m in system.broker.read(f"production.{system.topics.new_incidents}")
            ]
            triggered_ids = {e.incident_id for e in workload.events if e.kind == "triggered"}
            assert sorted(forwarded) == sorted(triggered_ids)
        finally:
            system.shutdown()

        bundle = build_report(config)
        assert "Reported" in bundle.table
        assert "Saved" in bundle.table
        assert bundle.histogram_csv.startswith("kind,bin_low_seconds,count")

    def test_rate_headroom_600_per_minute(self, tmp_path):
        # well beyond the observed 120/min: the stack keeps up without loss
        system = System(make_config(tmp_path), pacing_clock=SimulatedClock())
        system.start()
        try:
            workload = generate_workload(
                WorkloadConfig(
                    rate_per_minute=600, duration_seconds=60, seed=8,
                    n_services=100, emit_lifecycle=False,
                )
            )
            assert workload.triggered_count() > 500
            system.run_workload(workload)
            assert system.drain(timeout=60)
            counts = system.conservation()
            assert counts["conserved"]
            assert counts["dead_lettered"] == 0
            assert counts["reported"] == workload.triggered_count()
        finally:
            system.shutdown()

    def test_fire_and_forget_mode_end_to_end(self, tmp_path):
        config = make_config(tmp_path, **{"pipeline.delivery_mode": "fire-and-forget"})
        system = System(config)
        system.start()
        try:
            receipts = [system.ingest(pagerduty_webhook(incident_id=f"I-{i}")) for i in range(5)]
            recorder = system.production_metrics()
            # healthy handlers: nothing to lose even in fire-and-forget mode
            assert wait_for(
                lambda: all(recorder.has_egress(r, "reported") for r in receipts)
            )
            assert len(system.sink.lines()) == 5
        finally:
            system.shutdown()

    def test_timer_driven_retraining_loop(self, tmp_path):
        config = make_config(
            tmp_path,
            **{
                "pipeline.feature_dimension": 64,
                "pipeline.retrain_period_seconds": 400.0,
                "model.n_trees": 5,
            },
        )
        clock = SimulatedClock()
        system = System(config, pacing_clock=clock)
        system.start()
        try:
            workload = generate_workload(
                WorkloadConfig(rate_per_minute=60, duration_seconds=600, seed=6, n_services=5)
            )
            system.run_workload(workload)
            assert system.drain(timeout=60)
            # one more period with full history in view fires a tick whose
            # dataset covers every completed lifecycle
            clock.advance(401)
            assert wait_for(lambda: system.slots["production"].version >= 1, timeout=60)
            assert system.drain(timeout=60)
            assert system.objects.obj_exists("production/model/current")

            receipt = system.ingest(pagerduty_webhook(incident_id="I-post-train"))
            assert wait_for(
                lambda: system.production_metrics().has_egress(receipt, "reported")
            )
            [line] = [l for l in system.sink.lines() if l["receipt_id"] == receipt]
            version = system.slots["production"].version
            assert f"(model v{version})" in line["text"]
        finally:
            system.shutdown()


class TestOfflineTrainAndRestart:
    def test_train_then_restart_restores_model(self, tmp_path):
        config = make_config(tmp_path, **{"model.n_trees": 5, "pipeline.feature_dimension": 64})
        clock = SimulatedClock()
        system = System(config, pacing_clock=clock)
        system.start()
        workload = generate_workload(
            WorkloadConfig(rate_per_minute=200, duration_seconds=120, seed=2, n_services=5)
        )
        system.run_workload(workload)
        assert system.drain(timeout=30)
        system.shutdown()

        version, n, d = offline_train(config, window_spec="all")
        assert version == 1
        assert n == len(workload.labels)
        assert d == 64

        revived = System(make_config(tmp_path, **{
            "model.n_trees": 5, "pipeline.feature_dimension": 64,
        }))
        revived.start()
        try:
            forest, v = revived.slots["production"].get()
            assert v == 1
            assert forest is not None
            receipt = revived.ingest(pagerduty_webhook(incident_id="I-fresh"))
            assert wait_for(lambda: revived.production_metrics().has_egress(receipt, "reported"))
            [line] = [l for l in revived.sink.lines() if l["receipt_id"] == receipt]
            assert "(model v1)" in line["text"]
        finally:
            revived.shutdown()

    def test_report_before_any_run_is_nodata(self, tmp_path):
        config = make_config(tmp_path)
        with pytest.raises(NoData):
            build_report(config)

    def test_window_spec_parsing(self):
        from alertflow.errors import ConfigError

        assert parse_window_spec("all") is None
        assert parse_window_spec("90m") == 5400
        assert parse_window_spec("24h") == 86400
        assert parse_window_spec("7d") == 7 * 86400
        with pytest.raises(ConfigError):
            parse_window_spec("fortnight")


class TestPortInUse:
    def test_taken_port_raises(self, tmp_path):
        from alertflow.errors import PortInUse

        first = System(make_config(tmp_path))
        first.start()
        try:
            taken = first.http.port
            config = make_config(tmp_path / "second")
            config.http.port = taken
            second = System(config, http_port=taken)
            with pytest.raises(PortInUse):
                second.start()
            second.shutdown()
        finally:
            first.shutdown()


class TestStagingSampling:
    def test_every_nth_message_cloned(self, tmp_path):
        config = make_config(
            tmp_path,
            **{"pipeline.staging_enabled": True, "pipeline.sampling_divisor": 5},
        )
        system = System(config)
        system.start()
        try:
            for i in range(20):
                system.ingest(pagerduty_webhook(incident_id=f"I-{i}"))
            assert system.drain(timeout=30)
            staging_raw = f"staging.{system.topics.raw}"
            assert system.broker.end_offset(staging_raw) == 4
            assert system.broker.end_offset(f"production.{system.topics.raw}") == 20
            # the staging clone flows through staging's own pipeline to its sink
            staging_sink = FileSink(system.data_dir / "sink-staging.jsonl")
            assert wait_for(lambda: len(staging_sink.lines()) == 4)
        finally:
            system.shutdown()
