"""Two-step global-search / local-refine parameter inference for SDEs."""
