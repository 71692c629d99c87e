"""Target-speaker speech recognition with speaker-querying prompts, built on a
small numpy autodiff engine."""

__version__ = "0.1.0"
