"""q-space conditioned synthesis of diffusion-weighted slices from structural MRI."""

__version__ = "0.1.0"
