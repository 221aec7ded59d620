"""Light-field salient object detection with synergistic attention, at desk scale."""

__version__ = "0.1.0"
