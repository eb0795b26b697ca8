"""Semiclassical overlaps of integrable systems on the phase plane.

Leading-order overlap, transition-probability, and cyclic-amplitude sums over
fiber intersections, checked against an exact grid quantization, plus a
truncated Moyal star product with its operator and matrix-element
representations.
"""

from .geometry import (
    FiberCurve,
    IntersectionPoint,
    Observable,
    PhasePoint,
    PrequantumForm,
    ReferenceLagrangian,
    TraceOptions,
    action_along_fiber,
    find_intersections,
    loop_data,
    poisson_bracket,
    reference_point,
    trace_level_curve,
)
from .oracle import (
    Eigensystem,
    GridQuantization,
    GridSpec,
    build_weyl_operator,
    eigensystem,
    exact_overlap,
    half_density_bridge,
    match_levels,
)
from .semiclassics import (
    BSLevel,
    ComposedAmplitude,
    CyclicAmplitude,
    OverlapTerm,
    SemiclassicalAmplitude,
    bohr_sommerfeld_levels,
    compose_kernels,
    cyclic_amplitude,
    maslov_loop_index,
    maslov_segment,
    overlap,
    overlap_kernel,
    transition_probability,
)
from .starprod import (
    FormalSeries,
    PolynomialObservable,
    associativity_defect,
    homomorphism_check,
    moyal_product,
    semiclassical_matrix_element,
    weyl_operator_of,
)

__all__ = [
    "BSLevel",
    "ComposedAmplitude",
    "CyclicAmplitude",
    "Eigensystem",
    "FiberCurve",
    "FormalSeries",
    "GridQuantization",
    "GridSpec",
    "IntersectionPoint",
    "Observable",
    "OverlapTerm",
    "PhasePoint",
    "PolynomialObservable",
    "PrequantumForm",
    "ReferenceLagrangian",
    "SemiclassicalAmplitude",
    "TraceOptions",
    "action_along_fiber",
    "associativity_defect",
    "bohr_sommerfeld_levels",
    "build_weyl_operator",
    "compose_kernels",
    "cyclic_amplitude",
    "eigensystem",
    "exact_overlap",
    "find_intersections",
    "half_density_bridge",
    "homomorphism_check",
    "loop_data",
    "match_levels",
    "maslov_loop_index",
    "maslov_segment",
    "moyal_product",
    "overlap",
    "overlap_kernel",
    "poisson_bracket",
    "reference_point",
    "semiclassical_matrix_element",
    "trace_level_curve",
    "transition_probability",
    "weyl_operator_of",
]
