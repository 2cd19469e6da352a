"""Episode and checkpoint formats, training, forecasting, evaluation and the CLI."""
