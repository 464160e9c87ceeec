"""Training, evaluation, checkpoints, rendering and the command line."""
