"""Graph-based building damage classification from pre/post disaster imagery.

Stages: ``ingest`` (footprints, rasters, meta features), ``graphbuild``
(weighted Delaunay building graph), ``neuralcore`` (siamese encoder and GCN),
``training``, ``evaluation`` and ``synth`` (synthetic disaster scenarios).
"""
__version__ = "0.1.0"
