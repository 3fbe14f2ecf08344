"""Multi-agent crowd trajectory interpolation with data-driven priors."""
