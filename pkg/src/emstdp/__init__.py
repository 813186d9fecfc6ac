"""Two-phase spike-count learning (EMSTDP) on an integer neuromorphic core model."""
from .config import RunConfig, load_config
from .network import BuildParams, BuiltNetwork, Sample, build_network, infer_sample, train_sample
from .plasticity import LearningParams
from .structure import NetworkSpec, parse_structure

__all__ = ["BuildParams", "BuiltNetwork", "LearningParams", "NetworkSpec", "RunConfig", "Sample",
           "build_network", "infer_sample", "load_config", "parse_structure", "train_sample"]
__version__ = "0.1.0"
