"""Fanbeam CT toolkit: differentiable projector, FBP, geometry self-calibration,
model-based solvers and unrolled reconstruction networks."""

from .calibrate import CalibrationConfig, CalibrationResult, FitSchedule, calibrate, fit_fbp_scale, fit_geometry
from .fbp import FbpParams, fbp, fbp_adjoint
from .geometry import FanbeamGeometry, equispaced_angles
from .metrics import EvalReport, psnr, rmse, ssim, wcrmse
from .phantom import PhantomConfig, SimConfig, generate_phantom, simulate_dataset
from .projector import OperatorParams, forward_project, unfiltered_backproject
from .solvers import OperatorBundle, dc_step, landweber_fbp, tv_reconstruct, unrolled_reconstruct
from .tensor_io import DatasetManifest, load_manifest, read_tensor, write_tensor

__version__ = "0.1.0"
