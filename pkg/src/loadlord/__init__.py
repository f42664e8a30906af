"""Dynamic function loading and gadget-chain breaking for x86-64 ELF executables."""

from .artifacts import Artifacts, analyze, analyze_path, load_bundle, load_target, save_bundle
from .errors import LoadLordError
from .functions import FunctionMap, FunctionRecord, LegalAddressTable, identify_functions
from .gadgets import Gadget, GadgetIndex, scan_gadgets
from .image import LoadableImage, load_image, parse_image
from .policy import PolicyConfig, PolicyState, init_state, resident_gadget_census
from .simulator import SimReport, TraceEvent, measure_reduction, replay, sweep_limits

__version__ = "0.1.0"

__all__ = [
    "Artifacts", "FunctionMap", "FunctionRecord", "Gadget", "GadgetIndex", "LegalAddressTable",
    "LoadLordError", "LoadableImage", "PolicyConfig", "PolicyState", "SimReport", "TraceEvent",
    "analyze", "analyze_path", "identify_functions", "init_state", "load_bundle", "load_image",
    "load_target", "measure_reduction", "parse_image", "replay", "resident_gadget_census",
    "save_bundle", "scan_gadgets", "sweep_limits",
]
