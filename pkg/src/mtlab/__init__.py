"""Multi-task CT lab."""
