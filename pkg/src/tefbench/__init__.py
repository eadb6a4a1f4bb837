"""tefbench: black-box evasion and model-extraction benchmark on a toy executable format."""

__version__ = "0.1.0"
