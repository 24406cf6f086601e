"""Reference-based variational autoencoders.

Weakly-supervised disentangling of a chosen set of generative factors
("target factors" e) from everything else ("common factors" z), where the
only supervision is a reference set of images in which the target factors
are constant.  Ships the conventional variational objective (rbvae), its
adversarial symmetric variant (srbvae), VAE/beta-VAE baselines, a synthetic
colored-digit data pipeline, linear-probe evaluation, attribute transfer,
and a numerical verification suite for the underlying variational
identities.
"""

__version__ = "0.1.0"
