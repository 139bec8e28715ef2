"""Online source-free domain adaptation with a cross-attention memory.

A source-trained model adapts to a shifted target stream one sample at a
time: a teacher pseudo-labels each sample and writes its features into a
global memory bank; the student reads the memory for contrastive positive
and negative pairs, takes one SGD step, and the teacher follows by EMA.
"""

from . import adapt, backend, harness, losses, memory, numerics, streamsim
from .adapt import AdaptConfig, EncoderParams, StudentTeacherState, adapt_one
from .harness import RunConfig, RunReport, run_offline, run_online, train_source
from .memory import MemoryBank, ProjectionSet, ReadResult
from .streamsim import DomainSpec, ShiftSpec, StreamSample

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "DomainSpec",
    "EncoderParams",
    "MemoryBank",
    "ProjectionSet",
    "ReadResult",
    "RunConfig",
    "RunReport",
    "ShiftSpec",
    "StreamSample",
    "StudentTeacherState",
    "adapt",
    "adapt_one",
    "backend",
    "harness",
    "losses",
    "memory",
    "numerics",
    "run_offline",
    "run_online",
    "streamsim",
    "train_source",
    "__version__",
]
