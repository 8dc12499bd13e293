"""Recurrent variational autoencoder speech priors and VEM speech enhancement."""

__version__ = "0.1.0"
