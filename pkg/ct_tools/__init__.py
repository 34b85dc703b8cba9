"""
TomoStage tools package
Artifact simulation, classical baselines, learned stages and metrics for the
projection -> sinogram -> reconstruction pipeline.
"""

__version__ = "1.0.0"
