"""Symmetric differentiable planning on 2D grids.

Value iteration networks whose convolutions are constrained to be equivariant
under discrete rotation/reflection groups, with exact planning oracles,
dataset generators, a self-contained trainer, and equivariance audits.
"""

from .autodiff import Parameter, RMSProp, backward
from .datasets import (Dataset, ManipSpec, MazeSpec, Sample, bfs_distances, expert_labels,
                       gen_maze, gen_workspace, generate_dataset, read_dataset,
                       workspace_to_cspace, write_dataset)
from .estimator import GridPathPlanner, TrainingDivergedError, validate_labels, validate_maps
from .fields import (FeatureField, FieldType, channel_block_max, pointwise_add,
                     pointwise_scale, stack_fields, transform_field)
from .groups import (ACTIONS, Group, GroupElement, Representation, action_on_actions,
                     compose, elements, grid_action, group_from_token, inverse,
                     quotient_rep, regular_rep, rep_matrix, standard_rep, trivial_rep)
from .kernels import (ConvSpec, SteerableKernel, check_steerability, conv2d, project_kernel,
                      translation_equivariance_check)
from .metrics import MetricsRow, evaluate_model, evaluate_oracle, evaluate_policy
from .planner import (OccupancyMap, PlannerModel, SpatialMDP, build_spatial_mdp,
                      equivariance_audit, equivariance_audit_per_iteration,
                      exact_value_iteration, extract_policy, load_checkpoint, make_model,
                      rollout, save_checkpoint, symvin_forward, vin_forward)

__version__ = "0.1.0"
