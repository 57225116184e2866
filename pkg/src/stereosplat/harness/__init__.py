"""Runnable system around the core library: synthetic scenes, training,
evaluation, ablations, file formats, and the command-line interface."""
