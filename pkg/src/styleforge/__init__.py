"""Semi-supervised text style transfer toolkit.

Library plus a `styleforge` command line covering tokenizer training,
synthetic data generation, discriminator pretraining, generator training,
beam-search generation, and evaluation.
"""

__version__ = "0.1.0"
