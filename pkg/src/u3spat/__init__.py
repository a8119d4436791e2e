"""Ultra-sparse spiral-sampling multispectral photoacoustic tomography toolkit."""

__version__ = "0.1.0"
