"""Structure-texture GAN with decomposed, orthogonally regularized weights."""

__version__ = "0.1.0"
