"""Event-driven simulation and nonsmooth sensitivity analysis of mechanical
systems with unilateral constraints."""

from ._uflow import (
    BDerivative,
    ConfigError,
    Error,
    GrazingError,
    HybridTrajectory,
    InadmissibleError,
    MechSystem,
    ModelError,
    NoReturnError,
    PiecewiseLinearMap,
    SimConfig,
    State,
    b_derivative,
    build_system,
    dump_config,
    impact_map,
    instability_eigenvector_test,
    list_systems,
    orthogonality_check,
    poincare_bderivative,
    run,
    simulate,
    stability_contraction_test,
)

__all__ = [name for name in dir() if not name.startswith("_")]
