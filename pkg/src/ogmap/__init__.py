"""Object-centric open-vocabulary mapping with a hierarchical graph layer
stack: point cloud, lane graph, instances, segments, environment."""

__version__ = "0.1.0"
