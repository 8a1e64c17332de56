from .epoch import EpochRecord
from .run import PipelineRun, RunArtifact
