"""Writer retrieval with masked HOG-reconstruction pretraining."""

__version__ = "0.1.0"
