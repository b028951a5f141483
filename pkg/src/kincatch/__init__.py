"""kincatch: offline-to-online impact-aware catching on a learned
kinodynamic trajectory manifold.

Pipeline: a cross-entropy explorer collects successful catching episodes in a
planar kinodynamic simulator, a conditional Riemannian trajectory manifold is
trained on the interception-aligned dataset, and incoming object states are
mapped online to feasible references tracked by a compliant controller.
"""

__version__ = "0.1.0"

from .dynamics import (  # noqa: F401
    ArmModel, ContactParams, ContactReport, LaunchConfig, ObjectState,
    ObjectVariant, PalmFrame, RobotState, WorldState,
    arm_accel, contact_force, fk_palm, inverse_dynamics, sample_object_init,
    step_world,
)
from .reward import (  # noqa: F401
    RewardBreakdown, RewardConfig, RewardWeights, SuccessConfig,
    episode_success, reward_step,
)
from .engine import HAVE_COMPILED, Trace, simulate_episode  # noqa: F401
