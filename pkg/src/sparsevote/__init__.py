"""Sparse voting convolution, graph networks and point cloud anomaly detection."""

from .core import PointCloud, SparseVoxelGrid
from .detect import AnomalyResult, MemoryBank, bank_build, bank_score
from .errors import SparseVoteError
from .metrics import auroc, p_pro
from .pipeline import PipelineConfig, run_ablation, run_pipeline
from .sparse_conv import ConvKernel3D, voting_conv

__version__ = "0.1.0"

__all__ = [
    "AnomalyResult",
    "ConvKernel3D",
    "MemoryBank",
    "PipelineConfig",
    "PointCloud",
    "SparseVoteError",
    "SparseVoxelGrid",
    "auroc",
    "bank_build",
    "bank_score",
    "p_pro",
    "run_ablation",
    "run_pipeline",
    "voting_conv",
]
