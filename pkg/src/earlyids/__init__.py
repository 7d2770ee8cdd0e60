"""Early intrusion detection on raw packet flows with time-aware positional encodings."""

__version__ = "0.1.0"
