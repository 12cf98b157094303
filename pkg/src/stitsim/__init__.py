"""Three-dimensional STIT tessellations: simulation and analytic verification."""
from .analytic import (AnalyticContext, MarkSample, birth_laws, edge_length_intensity, eval_pmn,
                       eval_pn, eval_pn_exact, length_laws, poisson_edge_laws,
                       sample_typical_marks, sample_weighted_marks, starred_laws, vertex_moments)
from .directional import DirectionalModel, Hyperplane
from .engine import (EventCapExceeded, TessellationResult, collect_complete_segments,
                     linear_section, nest, simulate)
from .geometry import ConvexPolytope, split_polytope
from .harness import (ComparisonReport, ExperimentConfig, VertexHistogram, compare_to_oracle,
                      empirical_vertex_histogram, gof_tests, replicate, run_experiment)

__all__ = [
    "AnalyticContext", "MarkSample", "birth_laws", "edge_length_intensity", "eval_pmn", "eval_pn",
    "eval_pn_exact", "length_laws", "poisson_edge_laws", "sample_typical_marks",
    "sample_weighted_marks", "starred_laws", "vertex_moments", "DirectionalModel", "Hyperplane",
    "EventCapExceeded", "TessellationResult", "collect_complete_segments", "linear_section",
    "nest", "simulate", "ConvexPolytope", "split_polytope", "ComparisonReport",
    "ExperimentConfig", "VertexHistogram", "compare_to_oracle", "empirical_vertex_histogram",
    "gof_tests", "replicate", "run_experiment",
]
