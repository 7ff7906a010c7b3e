"""Dite-HRNet: dynamic lightweight high-resolution pose network in numpy."""
from .complexity import ComplexityReport, analyze, sweep_hyperparams, verify_against_paper
from .network import DiteHRNet, ModelConfig, PoseOutput, build, decode_heatmaps, export_summary, predict

__all__ = [
    "ComplexityReport", "DiteHRNet", "ModelConfig", "PoseOutput", "analyze", "build",
    "decode_heatmaps", "export_summary", "predict", "sweep_hyperparams", "verify_against_paper",
]
__version__ = "0.1.0"
