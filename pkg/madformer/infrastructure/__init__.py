"""Infrastructure implementations for the madformer application."""

from madformer.infrastructure.checkpoint_store import LocalCheckpointStore
from madformer.infrastructure.config_loader import FileConfigLoader
from madformer.infrastructure.csv_sink import CsvSink
from madformer.infrastructure.sample_store import LocalSampleStore
from madformer.infrastructure.stub_handler import OracleBlockDenoiser, create_stub_denoiser

__all__ = [
    "LocalCheckpointStore",
    "FileConfigLoader",
    "CsvSink",
    "LocalSampleStore",
    "OracleBlockDenoiser",
    "create_stub_denoiser",
]
