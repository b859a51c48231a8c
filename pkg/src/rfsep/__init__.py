"""Language-queried audio source separation with rectified flow matching, at desk scale."""

__version__ = "0.1.0"
