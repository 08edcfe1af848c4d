"""CNN toolkit for classifying segmented wearable-sensor exercise reps."""

__version__ = "0.1.0"
