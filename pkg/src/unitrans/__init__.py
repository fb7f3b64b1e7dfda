"""Speech-to-unit translation toolkit: perturbation, units, CTC tuning, mask-predict."""

__version__ = "0.1.0"
