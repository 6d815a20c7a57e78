"""Motion transfer from reference bone sequences onto static point sets via differentiable MPM."""

from .kinematics import (
    Bone,
    BoneFrame,
    BoneSequence,
    SkinningModel,
    backward_warp,
    bone_deltas,
    forward_warp,
    part_labels,
    skinning_weights,
)
from .mpm import (
    MaterialParams,
    NumericalDivergenceError,
    OutOfBoundsError,
    ParticleState,
    SimConfig,
    SimGrid,
    kirchhoff_stress,
    lame_parameters,
    simulate,
    step,
)
from .adjoint import gradient_check, simulate_with_gradient
from .correspondence import FeatureSet, PartAssignment, assign_particles, match_parts, remove_outliers
from .triplane import TriplaneField
from .transfer import (
    TransferScene,
    TransferSettings,
    build_scene,
    run_transfer,
    train_phase,
)
from .transforms import RigidTransform

__version__ = "0.1.0"
