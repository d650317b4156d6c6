from .checkers import (  # noqa: F401
    ConsistencyViolation,
    PropagationViolation,
    check_consistency,
    check_linearizable_register,
    check_update_propagation,
    ops_from_history,
)
from .explore import ExploreBounds, ExploreConfig, explore  # noqa: F401
from .scenario import ScenarioConfig  # noqa: F401
from .sim import InvariantViolation, RunReport, Simulation, run  # noqa: F401
