"""Graph-context generation of multimodal nodes on desk-scale attributed graphs."""

from .graph import Mmag, MmagNode, SyntheticSpec, generate_synthetic, ingest
from .ppr import PprConfig, build_normalized_adjacency, ppr_vector, sample_neighborhood, select_neighbors
from .linearize import GraphMode, LinearizationSpec, Modality, Order, linearize
from .config import RunConfig, load_config
from .pipeline import build_pipeline, load_pipeline, save_pipeline

__version__ = "0.1.0"
