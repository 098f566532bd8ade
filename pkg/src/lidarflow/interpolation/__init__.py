"""Edge-aware sparse-to-dense interpolation of scene flow matches."""
from .edges import EdgeMap, compute_edge_map, load_edge_map
from .geodesic import geodesic_distance, nearest_anchor_neighbourhoods, pairwise_geodesic, step_cost_graph
from .pipeline import (
    InterpConfig,
    InterpolationResult,
    ModelSet,
    PiecewiseModel,
    SuperpixelGraph,
    assign_anchors,
    build_superpixel_graph,
    densify_field,
    edge_aware_neighborhoods,
    fit_and_refine_models,
    interpolate_matches,
)
from .superpixels import segment_superpixels

__all__ = [
    "EdgeMap", "compute_edge_map", "load_edge_map",
    "geodesic_distance", "nearest_anchor_neighbourhoods", "pairwise_geodesic", "step_cost_graph",
    "InterpConfig", "InterpolationResult", "ModelSet", "PiecewiseModel", "SuperpixelGraph",
    "assign_anchors", "build_superpixel_graph", "densify_field", "edge_aware_neighborhoods",
    "fit_and_refine_models", "interpolate_matches", "segment_superpixels",
]
