"""Scene-aware pedestrian trajectory prediction with coupled LSTMs on numpy."""

__version__ = "0.1.0"
