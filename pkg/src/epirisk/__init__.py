"""Person-to-infrastructure epidemic risk notification: protocol library
and deterministic discrete-event simulator."""

__version__ = "0.1.0"
