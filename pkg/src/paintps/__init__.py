"""Near-light photometric stereo and protrusion statistics for painted surfaces."""

__version__ = "0.1.0"
