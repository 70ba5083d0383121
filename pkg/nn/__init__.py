"""Networks, data and training for generalized cross-domain recognition."""
