"""Dense scene flow from stereo image pairs fused with sparse LiDAR."""

__version__ = "0.1.0"
