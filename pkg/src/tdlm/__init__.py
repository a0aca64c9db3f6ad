"""Tree-structured discrete diffusion language modeling.

A desk-scale engine: builds a uniform-depth K-ary vocabulary tree over a
byte-level corpus, corrupts sequences with a level-wise absorbing CTMC,
trains a small child-prediction denoiser, generates text coarse-to-fine
through the closed-form reverse kernel, and verifies every closed form
against independent brute-force oracles.
"""

__version__ = "0.1.0"
