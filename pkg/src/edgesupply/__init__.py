"""On-device re-ranking and uplift-driven auto-paging for mobile feeds, with a simulated edge-cloud loop."""

__version__ = "0.1.0"
