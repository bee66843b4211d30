"""Cross-modal gated and fuzzy token alignment losses."""
