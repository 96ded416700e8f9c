"""Desk-scale lab for joint denoiser / noise-generator adversarial training.

Submodules are imported explicitly (danet.tensor, danet.nets, danet.engine,
danet.train, danet.metrics, danet.data, danet.gradcheck).  The package root
stays import-light so the CLI can pin thread environment variables before
numpy loads.
"""

__version__ = "0.1.0"
