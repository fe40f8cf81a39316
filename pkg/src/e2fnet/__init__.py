"""EEG-to-fMRI synthesis with an encoder / U-Net / decoder network."""

__version__ = "0.1.0"
