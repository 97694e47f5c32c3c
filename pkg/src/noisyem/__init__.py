"""EM and noisy EM for mixture and censored-data models."""
