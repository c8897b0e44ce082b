"""Two-stage point cloud reconstruction: sparse voxel generation, then attention-based relocalization."""

__version__ = "0.1.0"
