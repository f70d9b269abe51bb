"""Synthetic power traces for LLM-inference servers, from one server to a facility."""

from powertrace.bundle import ModelBundle, load_bundle, save_bundle
from powertrace.errors import PowerTraceError
from powertrace.facility import FacilityTopology, SiteAssumptions, TrafficMode, aggregate, planning_metrics
from powertrace.generator import GenerationRequest, generate_server_trace
from powertrace.states import StateCatalog, build_catalog
from powertrace.types import ArrivalSchedule, PowerTrace, ServingConfig

__version__ = "0.1.0"

__all__ = [
    "ArrivalSchedule",
    "FacilityTopology",
    "GenerationRequest",
    "ModelBundle",
    "PowerTrace",
    "PowerTraceError",
    "ServingConfig",
    "SiteAssumptions",
    "StateCatalog",
    "TrafficMode",
    "aggregate",
    "build_catalog",
    "generate_server_trace",
    "load_bundle",
    "planning_metrics",
    "save_bundle",
]
