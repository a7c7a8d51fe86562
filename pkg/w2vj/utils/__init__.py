"""Configuration, checkpoints, audio I/O, logging and error types."""
