"""visemeflow: word-level lip reading with a CAE+LSTM pipeline built from scratch."""

__version__ = "0.1.0"
