"""Teacher/student knowledge distillation for retinal OCT classification."""

__version__ = "0.1.0"
