"""quietpatch: inconspicuous adversarial patch synthesis from a single image."""

__version__ = "0.1.0"
