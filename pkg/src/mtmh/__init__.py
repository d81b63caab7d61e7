"""Multi-task multi-head item-to-item retrieval on synthetic engagement data."""
