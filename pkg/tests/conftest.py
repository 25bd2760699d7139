import json

from hypothesis import settings

from alertflow.clock import SimulatedClock

settings.register_profile("deterministic", derandomize=True)
settings.load_profile("deterministic")
from alertflow.metrics import TimingRecorder
from alertflow.runtime import EnvDocuments, EnvObjects
from alertflow.store import ClaimCheck, DocumentStore, ObjectStore


class FakeContext:
    """Stands in for the runtime's per-invocation context in handler tests;
    publishes are recorded instead of hitting a broker."""

    def __init__(self, env="production", clock=None, claim_threshold=900_000):
        self.env = env
        self.document_store = DocumentStore()
        self.object_store = ObjectStore()
        self.docs = EnvDocuments(self.document_store, env)
        self.objects = EnvObjects(self.object_store, env)
        self.claim = ClaimCheck(self.objects, threshold=claim_threshold)
        self.clock = clock if clock is not None else SimulatedClock()
        self.metrics = TimingRecorder(now=self.clock.now)
        self.published = []
        self.cross_published = []

    def publish(self, topic, message):
        self.published.append((topic, message))
        return len(self.published) - 1

    def publish_batch(self, topic, batch):
        return [self.publish(topic, m) for m in batch]

    def publish_to_env(self, env, topic, message):
        self.cross_published.append((env, topic, message))
        return len(self.cross_published) - 1

    def topic_messages(self, topic):
        return [m for t, m in self.published if t == topic]


def pagerduty_webhook(
    incident_id="I-1",
    event="incident.trigger",
    service_id="svc-1",
    urgency="high",
    metric="cpu_load",
    value=0.9,
    threshold=0.8,
    created_at="2025-06-01T12:00:00Z",
    **extra,
) -> bytes:
    body = {
        "event": event,
        "incident": {
            "id": incident_id,
            "created_at": created_at,
            "urgency": urgency,
            "service": {"id": service_id, "name": f"name-of-{service_id}"},
            "alerts": [
                {
                    "alert_key": f"{metric}-breach",
                    "custom_details": {"metric": metric, "value": value, "threshold": threshold},
                }
            ],
        },
    }
    body.update(extra)
    return json.dumps(body).encode("utf-8")


class MemorySink:
    """In-memory Slack stand-in; can be told to fail the next N posts."""

    def __init__(self, fail_times=0):
        self.posts = []
        self.fail_times = fail_times

    def post(self, body):
        from alertflow.errors import SinkUnreachable

        if self.fail_times > 0:
            self.fail_times -= 1
            raise SinkUnreachable("sink is down (injected)")
        self.posts.append(body)
