"""alertflow: a desk-scale streaming alert-triage pipeline.

Webhook alerts enter over HTTP, flow through pub-sub topics connecting
stateless functions (convert, persist/route, enrich, classify, notify),
and leave as classified notifications, with a retrainable random-forest
model and end-to-end latency reporting.
"""

from .broker import MAX_MESSAGE_BYTES, Broker, Message, Subscription
from .clock import SimulatedClock, SystemClock
from .config import AppConfig, load_config
from .evaluation import RocCurve, auc_score, roc_points
from .events import FeatureVector, IncidentEvent, Prediction, RouteDecision
from .features import Featurizer
from .forest import (
    Dataset,
    RandomForestAlertClassifier,
    deserialize_dataset,
    deserialize_forest,
    serialize_dataset,
    serialize_forest,
)
from .metrics import SixNumberSummary, TimingRecord, TimingRecorder, fraction_within, summarize
from .runtime import FunctionRuntime, FunctionSpec, HttpTrigger, TimerTrigger, TopicTrigger
from .store import ClaimCheck, ClaimTicket, Document, DocumentStore, ObjectStore
from .system import System, build_report, offline_train
from .workload import Workload, WorkloadConfig, generate_workload

__version__ = "0.1.0"

__all__ = [
    "MAX_MESSAGE_BYTES",
    "Broker",
    "Message",
    "Subscription",
    "SimulatedClock",
    "SystemClock",
    "AppConfig",
    "load_config",
    "RocCurve",
    "auc_score",
    "roc_points",
    "FeatureVector",
    "IncidentEvent",
    "Prediction",
    "RouteDecision",
    "Featurizer",
    "Dataset",
    "RandomForestAlertClassifier",
    "deserialize_dataset",
    "deserialize_forest",
    "serialize_dataset",
    "serialize_forest",
    "SixNumberSummary",
    "TimingRecord",
    "TimingRecorder",
    "fraction_within",
    "summarize",
    "FunctionRuntime",
    "FunctionSpec",
    "HttpTrigger",
    "TimerTrigger",
    "TopicTrigger",
    "ClaimCheck",
    "ClaimTicket",
    "Document",
    "DocumentStore",
    "ObjectStore",
    "System",
    "build_report",
    "offline_train",
    "Workload",
    "WorkloadConfig",
    "generate_workload",
]
