"""Reduced-basis/DEIM models for coupled Stokes/Darcy flow on parametric phase-field geometries."""
from importlib.metadata import PackageNotFoundError, version

from .calibration import MeasurementSet, calibrate, flow_error, synthesize_measurements
from .deim import DeimModel, reconstruct_classical, reconstruct_nonneg
from .errors import (AssemblyError, ConfigurationError, FormatError, MeasurementError, NumericsError,
                     ParameterError, PhasefieldRBError, RefinementRequiredError)
from .fem import MaterialData, MixedSolution, MixedSpace, solve_hifi
from .mesh import TriMesh, make_annulus_mesh, make_hexagon_mesh, make_rect_mesh
from .phasefield import (GeometryFamily, hex_damage_family, rotating_channel_family, sample_fields, spiral_family,
                         three_holes_family)
from .pod import ModeBasis, SamplingPlan, SnapshotSet, epsilon, epsilon_table, svd_modes
from .presets import build_problem, preset_config, train_bundle
from .rom import RomBundle, plan_mode_counts, reduce_offline, solve_online
from .site import SiteModel

try:
    __version__ = version("phasefield-rb")
except PackageNotFoundError:  # pragma: no cover - running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "AssemblyError", "ConfigurationError", "DeimModel", "FormatError", "GeometryFamily", "MaterialData",
    "MeasurementError", "MeasurementSet", "MixedSolution", "MixedSpace", "ModeBasis", "NumericsError",
    "ParameterError", "PhasefieldRBError", "RefinementRequiredError", "RomBundle", "SamplingPlan", "SiteModel",
    "SnapshotSet", "TriMesh", "build_problem", "calibrate", "epsilon", "epsilon_table", "flow_error",
    "hex_damage_family", "make_annulus_mesh", "make_hexagon_mesh", "make_rect_mesh", "plan_mode_counts",
    "preset_config", "reconstruct_classical", "reconstruct_nonneg", "reduce_offline", "rotating_channel_family",
    "sample_fields", "solve_hifi", "solve_online", "spiral_family", "svd_modes", "synthesize_measurements",
    "three_holes_family", "train_bundle",
]
