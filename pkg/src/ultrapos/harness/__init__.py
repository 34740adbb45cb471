"""Scene rendering, end-to-end pipeline and canned experiments."""
