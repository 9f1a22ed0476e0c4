"""Bird's-eye-view multibody pose-graph SLAM backend with a synthetic harness."""

from .geometry import Pose2, Pose3, compose, inverse, relative, project_to_se2
from .posegraph import Edge, EdgeKind, Mode, Node, NodeKind, PoseGraph, total_cost
from .builder import FramePayload, GraphBuilder, GraphConfig, filter_landmarks_by_depth
from .optimizer import SolverConfig, SolveReport, linearize, optimize_batch, optimize_incremental
from .metrology import CameraModel, backproject_ground, estimate_scale
from .lanemap import extract_lanes, hough_lines
from .simulator import NoiseModel, ScenarioSpec, load_dataset, save_dataset, simulate
from .evaluation import ate_rms, solve_dataset

__version__ = "0.1.0"
