"""
Prompt Decoupler - decouple-before-align prompt tuning at desk scale.

This package provides a miniature dual encoder with a reverse-mode autograd core,
learnable coupled prompts, foreground/background disentanglement of images and the
alignment objectives used to tune the prompts, together with an experiment harness.
"""

__version__ = "0.1.0"
