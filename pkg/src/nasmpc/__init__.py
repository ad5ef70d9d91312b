"""Nonlinear MPC for automated driving: model DSL, integrators, reference handling, FTOCP and the NAS solver."""
from .controller import Controller, ControllerConfig, ControllerOutputs
from .dynamics import IntegratorConfig, integrate_step, linearize_discrete, rollout
from .errors import NasMpcError
from .ftocp import FtocpInstance, InputConstraints, PenaltyParams, Weights
from .model_dsl import ModelSpec, builtin_kbm, parse_model, serialize_model
from .nas import NasConfig, NasResult, nas_solve
from .reference import Trajectory, generate_references, localize, make_trajectory, validate_trajectory

__version__ = "0.1.0"
