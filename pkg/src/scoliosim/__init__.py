"""Desk-scale robotic ultrasound scoliosis-assessment simulator."""

__version__ = "0.1.0"

from .phantom import (  # noqa: F401
    CurveAngle,
    CurveSpec,
    PhantomConfig,
    SpinePhantom,
    build_phantom,
    ground_truth_spa,
)
from .bmode import BModeFrame, ImagingConfig, ProbePose, ScanRecording  # noqa: F401
from .detector import Detection, DetectorNoise, detect  # noqa: F401
from .controller import ScanConfig, SpineTrack, run_scan  # noqa: F401
from .recon import CoronalImage, Volume, compound, vpi_direct, vpi_volume  # noqa: F401
from .spa import RaterModel, SpinousPath, extract_path, measure_spa  # noqa: F401
from .stats import IccResult, RatingTable, icc_absolute, wilcoxon_signed_rank  # noqa: F401
from .study import StudyConfig, StudyOutput, generate_cohort, run_study  # noqa: F401
