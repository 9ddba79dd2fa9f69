"""Graph-network autoencoder with attention-based latent dynamics for fields on unstructured meshes."""

__version__ = "0.1.0"

from .errors import (ConfigError, FormatError, GenerationError, MeshromError, NumericError, ShapeError,
                     UnsupportedError, ValidationError)
from .mesh import FieldSnapshot, MeshGraph, build_graph, neighbors, permute_nodes
from .sampling import CoordSet, farthest_point_sample, knn_interpolate

__all__ = [
    "ConfigError", "CoordSet", "FieldSnapshot", "FormatError", "GenerationError", "MeshGraph", "MeshromError",
    "NumericError", "ShapeError", "UnsupportedError", "ValidationError", "build_graph", "farthest_point_sample",
    "knn_interpolate", "neighbors", "permute_nodes",
]
