"""FAST: functional-area spatio-temporal transformer for covert-speech EEG decoding."""

__version__ = "0.1.0"
